from __future__ import annotations

import dataclasses
from importlib import resources

import numpy as np
import pytest

from persona_ar.config import tiny_config
from persona_ar.data import apply_mlm_corruption, build_vocabs, collate_batch, load_sessions, truncate_session
from persona_ar.model import PersonaDialogueModel

SAMPLE = resources.files("persona_ar") / "data" / "sample_sessions.jsonl"


@pytest.fixture(scope="session")
def sample_sessions():
    return [truncate_session(s) for s in load_sessions(SAMPLE)]


@pytest.fixture(scope="session")
def vocabs(sample_sessions):
    return build_vocabs(sample_sessions, char_max=50, word_max=30)


@pytest.fixture
def tiny_batch(sample_sessions, vocabs):
    """B=2 with an 8-step decoder, MLM corruption applied."""
    cv, wv = vocabs
    # stretch two responses to 7 characters so the decoder sees 8 positions
    picked = [dataclasses.replace(s, response=(s.response + s.turns[0].text * 3)[:7]) for s in sample_sessions[:2]]
    batch = collate_batch(picked, cv, wv)
    assert batch.decoder_input.shape == (2, 8)
    return apply_mlm_corruption(batch, 0.3, 0, len(cv))


@pytest.fixture
def make_model(vocabs):
    cv, wv = vocabs

    def make(dtype=np.float64, seed=0, **overrides):
        assert len(cv) == 50 and len(wv) <= 30
        cfg = tiny_config(**overrides)
        return PersonaDialogueModel(cfg, seed, dtype=dtype)

    return make


# ---------------------------------------------------------------------------
# acceptance summary: one line per criterion at the end of the run

_CRITERIA: dict[int, tuple[str, str, float, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    number, title = mark.args
    detail = dict(item.user_properties).get("detail", "")
    if rep.failed:
        detail = rep.longreprtext.strip().splitlines()[-1][:160] if rep.longreprtext else detail
    _CRITERIA[number] = ("PASS" if rep.passed else "FAIL", title, rep.duration, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        status, title, duration, detail = _CRITERIA[number]
        terminalreporter.write_line(f"[{status}] criterion {number:2d} {title} ({duration:.1f}s) {detail}".rstrip())
