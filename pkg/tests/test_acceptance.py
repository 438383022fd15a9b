"""Acceptance suite: one test per criterion, summarized at the end of the run.

Run alone with ``pytest tests/test_acceptance.py -v``; the terminal summary
prints a PASS/FAIL line for each criterion.
"""

import dataclasses
import math
import time

import numpy as np
import pytest

from persona_ar import tensor as T
from persona_ar.config import TOGGLES, ModelConfig, tiny_config
from persona_ar.data import dedup_sessions
from persona_ar.decoding import SamplerConfig, generate_ids, nucleus_filter, sample_next
from persona_ar.metrics import bleu_corpus, distinct_n, overlap_f1, perplexity
from persona_ar.model import (
    PersonaDialogueModel, attention_routing, count_parameters, merge_routing, parameter_total,
)
from persona_ar.optim import AdamW, ReduceLROnPlateau, clip_global_norm, global_norm
from persona_ar.synthetic import make_sessions
from persona_ar.tensor import Tensor, no_grad
from persona_ar.train import Trainer, prepare_trainer

from _helpers import ALL_COMBOS, combo_config, gradcheck_model, open_gates, tiny_run

criterion = pytest.mark.criterion


@criterion(1, "gradient fidelity, 32 toggle combinations")
def test_gradient_fidelity(tiny_batch, record_property):
    assert tiny_batch.size == 2 and tiny_batch.decoder_input.shape[1] == 8
    start = time.perf_counter()
    worst = 0.0
    for combo in ALL_COMBOS:
        cfg = combo_config(combo)
        assert (cfg.hidden_size, cfg.num_heads, cfg.vocab_size, cfg.persona_vocab_size) == (16, 2, 50, 30)
        model = PersonaDialogueModel(cfg, 0, dtype=np.float64)
        open_gates(model)
        report = gradcheck_model(model, tiny_batch)
        assert report.ok, (combo, report.max_rel_error, report.failures[:3])
        worst = max(worst, report.max_rel_error)
    elapsed = time.perf_counter() - start
    record_property("detail", f"max rel err {worst:.2e} <= 1e-4, {elapsed:.0f}s")
    assert worst <= 1e-4
    assert elapsed <= 120


@criterion(2, "routing algebra, 1000 trials")
def test_routing_algebra(make_model, record_property):
    rng = np.random.default_rng(0)
    model = make_model()
    block = model.blocks[0]
    for trial in range(1000):
        if trial % 10 == 0:
            # outputs of the real routing sublayer
            lt, lc, lp = rng.integers(1, 9, size=3)
            r = attention_routing(block, Tensor(rng.normal(size=(2, lt, 16))), Tensor(rng.normal(size=(2, lc, 16))),
                                  Tensor(rng.normal(size=(2, lp, 16))))
            o_t, o_c, o_p = r.o_persona, r.o_context, r.o_prev
            assert r.o_merge.data.tobytes() == (o_t + o_c + o_p).data.tobytes()
        else:
            shape = tuple(rng.integers(1, 6, size=3))
            o_t, o_c, o_p = (Tensor(rng.normal(scale=10, size=shape)) for _ in range(3))
        eq2 = (o_t + o_c + o_p).data
        assert merge_routing(o_t, o_c, o_p, 1.0).data.tobytes() == eq2.tobytes()
        two_c = (2.0 * o_c.data + o_p.data)
        assert merge_routing(o_t, o_c, o_p, 0.0).data.tobytes() == two_c.tobytes()
    record_property("detail", "a=1 and a=0 bitwise over 1000 trials")


@criterion(3, "ReZero identity at zero gates")
def test_rezero_identity(make_model, tiny_batch, record_property):
    model = make_model(fix_attention=0.0)
    enc_trace, dec_trace = [], []
    with no_grad():
        enc = model.encode(tiny_batch, trace=enc_trace)
        model.decode(enc, tiny_batch.decoder_input, trace=dec_trace)
        stream = model.embed_and_project(tiny_batch.context_ids, tiny_batch.context_speaker, enc.speaker_embeddings)
    dev = max(np.abs(x.data - stream.data).max() for x in enc_trace)
    dev = max([dev] + [np.abs(y.data - dec_trace[0].data).max() for y, _ in dec_trace[1:]])
    assert dev <= 1e-6

    model = make_model(fix_attention=0.1)
    dec_trace = []
    with no_grad():
        model.decode(model.encode(tiny_batch), tiny_batch.decoder_input, trace=dec_trace)
    prev, gap = dec_trace[0].data, 0.0
    for y, routing in dec_trace[1:]:
        expected = prev + 0.1 * (routing.o_persona.data + routing.o_context.data)
        gap = max(gap, np.abs(y.data - expected).max())
        prev = y.data
    assert gap <= 1e-12
    record_property("detail", f"identity dev {dev:.1e}; b-term gap {gap:.1e}")


@criterion(4, "full-size parameter counts per ablation row")
def test_parameter_accounting(record_property):
    rows = {None: (31e6, 0.15), "albert": (45e6, 0.15), "factor_ff": (33e6, 0.15), "memn2n": (9e6, 0.20)}
    found = []
    for toggle, (target, tol) in rows.items():
        cfg = ModelConfig() if toggle is None else ModelConfig().without(toggle)
        analytic = count_parameters(cfg)["total"]
        assert abs(analytic - target) <= tol * target, (toggle, analytic)
        assert analytic == parameter_total(PersonaDialogueModel(cfg, 0))
        found.append(f"{'-' + toggle if toggle else 'AR+'}={analytic / 1e6:.1f}M")
    for combo in ALL_COMBOS:
        cfg = combo_config(combo)
        assert count_parameters(cfg)["total"] == parameter_total(PersonaDialogueModel(cfg, 0))
    record_property("detail", " ".join(found))


@criterion(5, "exact embedding and memory sub-counts")
def test_exact_subcounts(record_property):
    full = count_parameters(ModelConfig())
    plain = count_parameters(ModelConfig().without("albert"))
    assert full["char_embedding"] + full["embed_projection"] == 2_000_200
    assert plain["char_embedding"] + plain["embed_projection"] == 4_858_368
    assert full["persona_memory"] == 20_488_192
    record_property("detail", "2,000,200 / 4,858,368 / 20,488,192")


@criterion(6, "toy overfit, 32 sessions, 300 steps")
def test_toy_overfit(record_property):
    sessions = dedup_sessions(make_sessions(32, seed=7))
    assert len(sessions) == 32
    model = dataclasses.replace(
        ModelConfig(), embed_size=32, hidden_size=64, num_layers=2, num_heads=4, ff_size=128, ff_rank=16,
    )
    assert all(getattr(model, f"use_{t}") for t in TOGGLES)
    cfg = tiny_run(batch_size=32, max_steps=300, valid_every=50, seed=0).updated(**{
        k: v for k, v in dataclasses.asdict(model).items() if k not in ("vocab_size", "persona_vocab_size")
    })
    trainer = prepare_trainer(cfg, sessions)
    start = time.perf_counter()
    trainer.fit(sessions)
    elapsed = time.perf_counter() - start
    ppl = trainer.perplexity(sessions)
    record_property("detail", f"train PPL {ppl:.3f} <= 1.5 in {elapsed:.0f}s")
    assert ppl <= 1.5
    assert elapsed <= 300


@criterion(7, "decoder causality, 1000 trials")
def test_causality(tiny_batch, record_property):
    rng = np.random.default_rng(1)
    cases = []
    for combo in ALL_COMBOS:
        model = PersonaDialogueModel(combo_config(combo), 0, dtype=np.float64)
        open_gates(model, 0.5)
        with no_grad():
            enc = model.encode(tiny_batch)
            cases.append((model, enc, model.decode(enc, tiny_batch.decoder_input).data))
    with no_grad():
        for trial in range(1000):
            model, enc, base = cases[trial % len(cases)]
            t = int(rng.integers(0, 7))
            ids = tiny_batch.decoder_input.copy()
            cols = slice(t + 1, None)
            ids[:, cols] = rng.integers(0, 50, size=ids[:, cols].shape)
            out = model.decode(enc, ids).data
            assert out[:, :t + 1].tobytes() == base[:, :t + 1].tobytes(), (trial, t)
    record_property("detail", "bitwise over 1000 trials, all toggle combinations")


@criterion(8, "nucleus sampler")
def test_sampler(make_model, tiny_batch, record_property):
    probs = np.array([0.5, 0.3, 0.15, 0.05])
    filtered = nucleus_filter(probs, 0.9)
    assert np.count_nonzero(filtered) == 3
    assert np.abs(filtered[:3] - np.array([10, 6, 3]) / 19).max() <= 1e-9
    rng = np.random.default_rng(2024)
    cfg = SamplerConfig(temperature=1.0, top_p=0.9)
    draws = np.array([sample_next(np.log(probs), cfg, rng) for _ in range(10_000)])
    tv = 0.5 * np.abs(np.bincount(draws, minlength=4) / len(draws) - filtered).sum()
    assert tv <= 0.02
    model = make_model()
    longest = 0
    for seed in range(10):
        ids = generate_ids(model, tiny_batch, SamplerConfig(), np.random.default_rng(seed))
        longest = max(longest, *map(len, ids))
    assert longest <= 15
    record_property("detail", f"TV {tv:.4f}; longest generation {longest}")


@criterion(9, "optimizer and scheduler")
def test_optimizer(record_property):
    p = Tensor(np.array(1.0), requires_grad=True)
    p.grad = np.array(1.0)
    AdamW([p], lr=0.1, weight_decay=0.0).step()
    assert abs(float(p.data) - (1 - 0.1 / (1 + 1e-8))) <= 1e-9

    sched = ReduceLROnPlateau(2e-3, 0.5, 60, 1.5e-4)
    lrs = [sched.step(1.0) for _ in range(61)]
    assert lrs[59] == 2e-3 and lrs[60] == 1e-3
    lrs += [sched.step(1.0) for _ in range(600)]
    assert min(lrs) == 1.5e-4 and lrs[-1] == 1.5e-4

    rng = np.random.default_rng(0)
    for scale in (0.01, 0.3, 1.0, 3.0, 100.0):
        ps = [Tensor(np.zeros(s), requires_grad=True) for s in (3, (2, 2))]
        for q in ps:
            q.grad = rng.normal(size=q.shape) * scale
        n = clip_global_norm(ps, 1.0)
        assert abs(global_norm(q.grad for q in ps) - min(n, 1.0)) <= 1e-6
    record_property("detail", "AdamW step, plateau 2e-3 -> 1e-3 at call 61 -> 1.5e-4, clip")


@criterion(10, "metric oracles")
def test_metric_oracles(make_model, tiny_batch, record_property):
    refs = ["你好呀", "今天天气不错"]
    assert bleu_corpus(refs, refs) == 1.0
    assert overlap_f1("abc", "abd") == 2 / 3
    assert distinct_n(["aba"], 1) == 2 / 3
    model = make_model()
    model.head.weight.data[...] = 0.0
    model.head.bias.data[...] = 0.0
    ppl = perplexity(model, [tiny_batch])
    assert abs(ppl - 50) <= 1e-6 * 50
    record_property("detail", f"BLEU 1, F1 2/3, dist1 2/3, PPL {ppl:.9f}")


@criterion(11, "determinism and checkpoint resume")
def test_determinism(tmp_path, sample_sessions, record_property):
    def run(steps):
        trainer = prepare_trainer(tiny_run(max_steps=steps), sample_sessions)
        trainer.fit(sample_sessions)
        return trainer

    a, b = run(20), run(20)
    assert [tuple(r.values()) for r in a.history] == [tuple(r.values()) for r in b.history]

    part = prepare_trainer(tiny_run(max_steps=20), sample_sessions)
    part.fit(sample_sessions, until=15)
    part.save(tmp_path / "ck.bin")
    resumed = Trainer.from_checkpoint(tmp_path / "ck.bin")
    resumed.fit(sample_sessions)
    assert resumed.history == a.history[15:]
    for (_, x), (_, y) in zip(resumed.model.named_parameters(), a.model.named_parameters()):
        assert x.data.tobytes() == y.data.tobytes()
    record_property("detail", "20-step logs equal; resume matches steps 16-20 bitwise")


EXPECTED_DIFF = {
    "rezero": ({"blocks.0.gate_attn", "blocks.0.gate_ff"},
               {f"blocks.0.{n}.{p}" for n in ("post_attn", "post_ff") for p in ("gain", "bias")}),
    "albert": ({"embed_projection.weight"}, "second block copy"),
    "factor_ff": ({f"blocks.0.ff.{n}" for n in ("inner_a.weight", "inner_b.weight", "inner_b.bias",
                                                  "outer_a.weight", "outer_b.weight", "outer_b.bias")},
                  {f"blocks.0.ff.{n}.{p}" for n in ("inner", "outer") for p in ("weight", "bias")}),
    "memn2n": ({f"memory.tables.{k}" for k in range(4)}, set()),
    "bart_mlm": (set(), set()),
}


@criterion(12, "ablation toggles change only their own parameters")
def test_ablation_shape(sample_sessions, record_property):
    base_cfg = tiny_run(max_steps=3)
    base_names = dict((n, p.shape) for n, p in PersonaDialogueModel(base_cfg.model, 0).named_parameters())
    for toggle, (removed, added) in EXPECTED_DIFF.items():
        off = base_cfg.model.without(toggle)
        names = dict((n, p.shape) for n, p in PersonaDialogueModel(off, 0).named_parameters())
        if toggle == "albert":
            block0 = {n for n in base_names if n.startswith("blocks.0.")}
            added = {n.replace("blocks.0.", "blocks.1.") for n in block0}
        assert set(base_names) - set(names) == removed, toggle
        assert set(names) - set(base_names) == added, toggle
        changed = {n for n in set(names) & set(base_names) if names[n] != base_names[n]}
        assert changed == ({"char_embedding"} if toggle == "albert" else set()), toggle
        # switching the toggle back on gives the baseline run bitwise
        again = dataclasses.replace(base_cfg, model=dataclasses.replace(off, **{f"use_{toggle}": True}))
        assert again == base_cfg
    first = prepare_trainer(base_cfg, sample_sessions)
    first.fit(sample_sessions)
    second = prepare_trainer(again, sample_sessions)
    second.fit(sample_sessions)
    assert first.history == second.history
    record_property("detail", "expected name diffs for all five toggles; re-enable reproduces baseline")
