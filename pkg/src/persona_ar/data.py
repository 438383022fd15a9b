"""Session loading, cleaning, splitting, truncation, batching and MLM corruption."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .vocab import (
    BOS, EOS, MASK, PAD, SEP, CHAR_SPECIALS, Vocab, encode_chars, encode_dialogue_sequence,
    encode_persona_words, persona_items,
)

log = logging.getLogger(__name__)

MAX_UTTERANCE_CHARS = 15
MAX_CONTEXT_TURNS = 3
MAX_CONTEXT_UTTERANCES = 2 * MAX_CONTEXT_TURNS + 1
MAX_CONTEXT_CHARS = MAX_UTTERANCE_CHARS * MAX_CONTEXT_UTTERANCES  # 105
MAX_CONTEXT_LEN = MAX_CONTEXT_CHARS + MAX_CONTEXT_UTTERANCES - 1  # plus separators
MAX_TARGET_LEN = MAX_UTTERANCE_CHARS + 1  # plus BOS / EOS

DEFAULT_SPLIT_SIZES = (100_000, 20_000, 20_000)


class DataError(ValueError):
    """A session file or record does not follow the expected schema."""


@dataclass(frozen=True)
class PersonaProfile:
    gender: str | None = None
    address: str | None = None
    interests: tuple[str, ...] = ()

    def __post_init__(self):
        if self.gender is None and self.address is None and not self.interests:
            raise DataError("persona profile needs at least one field")

    def get(self, key, default=None):
        value = getattr(self, key, default)
        return default if value is None else value

    def to_dict(self) -> dict:
        d = {}
        if self.gender is not None:
            d["gender"] = self.gender
        if self.address is not None:
            d["address"] = self.address
        d["interests"] = list(self.interests)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PersonaProfile":
        return cls(d.get("gender"), d.get("address"), tuple(d.get("interests") or ()))


@dataclass(frozen=True)
class Turn:
    speaker: str
    text: str


@dataclass(frozen=True)
class Session:
    turns: tuple[Turn, ...]
    profiles: dict[str, PersonaProfile]
    responder: str
    response: str = ""

    def __post_init__(self):
        if not self.turns:
            raise DataError("session needs at least one context turn")
        if self.responder not in self.profiles:
            raise DataError(f"responder {self.responder!r} has no profile")

    def key(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False)

    def to_dict(self) -> dict:
        return {
            "turns": [{"speaker": t.speaker, "text": t.text} for t in self.turns],
            "profiles": {k: v.to_dict() for k, v in self.profiles.items()},
            "responder": self.responder,
            "response": self.response,
        }

    @classmethod
    def from_dict(cls, d: dict, require_response: bool = True) -> "Session":
        for key in ("turns", "profiles", "responder") + (("response",) if require_response else ()):
            if key not in d:
                raise DataError(f"missing field {key!r}")
        turns = tuple(Turn(str(t["speaker"]), str(t["text"])) for t in d["turns"])
        profiles = {str(k): PersonaProfile.from_dict(v) for k, v in d["profiles"].items()}
        return cls(turns, profiles, str(d["responder"]), str(d.get("response", "")))


def load_sessions(path: str | Path, require_response: bool = True) -> list[Session]:
    """Parse a JSON-lines session file, keeping file order."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    sessions = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            sessions.append(Session.from_dict(json.loads(line), require_response))
        except (json.JSONDecodeError, DataError, KeyError, TypeError, AttributeError) as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
    if not sessions:
        log.warning("no sessions in %s", path)
    return sessions


def save_sessions(sessions: Iterable[Session], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in sessions:
            fh.write(json.dumps(s.to_dict(), ensure_ascii=False) + "\n")


def dedup_sessions(sessions: Iterable[Session]) -> list[Session]:
    """Drop exact duplicates (turns, profiles and response), first occurrence wins."""
    seen = set()
    out = []
    for s in sessions:
        k = s.key()
        if k not in seen:
            seen.add(k)
            out.append(s)
    return out


def sample_splits(
    sessions: Sequence[Session], sizes: tuple[int, int, int], seed: int
) -> tuple[list[Session], list[Session], list[Session]]:
    """Draw disjoint train/valid/test subsets without replacement."""
    if any(n < 0 for n in sizes):
        raise ValueError("split sizes must be non-negative")
    if sum(sizes) > len(sessions):
        raise DataError(f"requested {sum(sizes)} sessions but only {len(sessions)} available")
    order = np.random.default_rng(seed).permutation(len(sessions))
    a, b, c = sizes
    pick = lambda idx: [sessions[i] for i in idx]
    return pick(order[:a]), pick(order[a:a + b]), pick(order[a + b:a + b + c])


def truncate_session(session: Session) -> Session:
    """Keep the most recent 7 utterances and the first 15 characters of each."""
    turns = session.turns[-MAX_CONTEXT_UTTERANCES:]
    turns = tuple(Turn(t.speaker, t.text[:MAX_UTTERANCE_CHARS]) for t in turns)
    return dataclasses.replace(session, turns=turns, response=session.response[:MAX_UTTERANCE_CHARS])


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    context_ids: np.ndarray          # (B, Lc)
    context_pad: np.ndarray          # (B, Lc) True at padding
    context_speaker: np.ndarray      # (B, Lc) speaker slot, 0 = no profile
    speaker_words: np.ndarray        # (B, S, Ws) persona word ids per speaker slot
    speaker_chars: np.ndarray        # (B, S, Lsc) spliced persona characters per slot
    persona_words: np.ndarray        # (B, I, Wi) target speaker items
    persona_item_pad: np.ndarray     # (B, I)
    persona_chars: np.ndarray        # (B, Lp) target speaker items spliced with _SEP
    persona_pad: np.ndarray          # (B, Lp)
    decoder_input: np.ndarray        # (B, Lt)
    decoder_target: np.ndarray       # (B, Lt)
    target_pad: np.ndarray           # (B, Lt)
    mlm_ids: np.ndarray | None = None
    mlm_positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    mlm_labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def size(self) -> int:
        return self.context_ids.shape[0]


def _pad2(rows: Sequence[Sequence[int]], fill: int = PAD, min_len: int = 1) -> np.ndarray:
    width = max([len(r) for r in rows] + [min_len])
    out = np.full((len(rows), width), fill, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, :len(r)] = r
    return out


def _pad3(blocks: Sequence[Sequence[Sequence[int]]]) -> np.ndarray:
    n1 = max([len(b) for b in blocks] + [1])
    n2 = max([len(r) for b in blocks for r in b] + [1])
    out = np.full((len(blocks), n1, n2), PAD, dtype=np.int64)
    for i, b in enumerate(blocks):
        for j, r in enumerate(b):
            out[i, j, :len(r)] = r
    return out


def _persona_char_ids(profile, vocab: Vocab) -> list[int]:
    values = [v for _, v in persona_items(profile)]
    return encode_dialogue_sequence(values, vocab) if values else []


def collate_batch(
    sessions: Sequence[Session],
    char_vocab: Vocab,
    word_vocab: Vocab,
    max_context_len: int = MAX_CONTEXT_LEN,
    max_target_len: int = MAX_TARGET_LEN,
) -> Batch:
    """Encode truncated sessions into padded id matrices."""
    if not sessions:
        raise ValueError("empty batch")
    ctx, ctx_spk, spk_words, spk_chars = [], [], [], []
    items, pchars, dec_in, dec_out = [], [], [], []
    for s in sessions:
        slots = []
        for t in s.turns:
            if t.speaker not in slots:
                slots.append(t.speaker)
        if s.responder not in slots:
            slots.append(s.responder)
        slot_of = {sp: i + 1 for i, sp in enumerate(slots) if sp in s.profiles}

        ids, owner = [], []
        for i, t in enumerate(s.turns):
            if i:
                ids.append(SEP)
                owner.append(slot_of.get(s.turns[i - 1].speaker, 0))
            chars = encode_chars(t.text, char_vocab)
            ids.extend(chars)
            owner.extend([slot_of.get(t.speaker, 0)] * len(chars))
        if not ids:
            # every utterance empty: keep one separator so attention has a key
            ids, owner = [SEP], [slot_of.get(s.turns[-1].speaker, 0)]
        if len(ids) > max_context_len:
            raise ValueError(f"context of {len(ids)} ids exceeds {max_context_len}")
        ctx.append(ids)
        ctx_spk.append(owner)

        words, chars = [[]], [[]]  # slot 0: no profile
        for sp in slots:
            prof = s.profiles.get(sp)
            if prof is None:
                words.append([])
                chars.append([])
            else:
                words.append([w for item in encode_persona_words(prof, word_vocab) for w in item])
                chars.append(_persona_char_ids(prof, char_vocab))
        spk_words.append(words)
        spk_chars.append(chars)

        target_profile = s.profiles[s.responder]
        items.append(encode_persona_words(target_profile, word_vocab))
        pchars.append(_persona_char_ids(target_profile, char_vocab) or [BOS])

        resp = encode_chars(s.response, char_vocab)
        if len(resp) + 1 > max_target_len:
            raise ValueError(f"response of {len(resp)} ids exceeds {max_target_len - 1}")
        dec_in.append([BOS] + resp)
        dec_out.append(resp + [EOS])

    context_ids = _pad2(ctx)
    persona_words = _pad3(items)
    persona_chars = _pad2(pchars)
    decoder_target = _pad2(dec_out)
    return Batch(
        context_ids=context_ids,
        context_pad=_pad2([[1] * len(r) for r in ctx], fill=0) == 0,
        context_speaker=_pad2(ctx_spk),
        speaker_words=_pad3(spk_words),
        speaker_chars=_pad3(spk_chars),
        persona_words=persona_words,
        persona_item_pad=_pad2([[1] * len(b) for b in items], fill=0) == 0,
        persona_chars=persona_chars,
        persona_pad=_pad2([[1] * len(r) for r in pchars], fill=0) == 0,
        decoder_input=_pad2(dec_in),
        decoder_target=decoder_target,
        target_pad=_pad2([[1] * len(r) for r in dec_out], fill=0) == 0,
    )


def apply_mlm_corruption(
    batch: Batch, rate: float, rng: np.random.Generator | int, vocab_size: int
) -> Batch:
    """Single-token masking of the encoder input (80% MASK, 10% random, 10% kept).

    Returns a copy of ``batch`` with ``mlm_ids`` and the label record set.
    """
    if not 0.0 < rate < 1.0:
        raise ValueError(f"MLM rate must be in (0, 1), got {rate}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    ids = batch.context_ids
    eligible = (ids >= len(CHAR_SPECIALS)) & ~batch.context_pad
    chosen = eligible & (rng.random(ids.shape) < rate)
    positions = np.argwhere(chosen)
    labels = ids[chosen]
    corrupted = ids.copy()
    action = rng.random(len(positions))
    random_ids = rng.integers(len(CHAR_SPECIALS), max(vocab_size, len(CHAR_SPECIALS) + 1), size=len(positions))
    rows, cols = positions[:, 0], positions[:, 1]
    to_mask = action < 0.8
    to_rand = (action >= 0.8) & (action < 0.9)
    corrupted[rows[to_mask], cols[to_mask]] = MASK
    corrupted[rows[to_rand], cols[to_rand]] = random_ids[to_rand]
    return dataclasses.replace(batch, mlm_ids=corrupted, mlm_positions=positions, mlm_labels=labels)


def iterate_batches(
    sessions: Sequence[Session], batch_size: int, order: Sequence[int] | None = None
) -> Iterator[list[Session]]:
    order = range(len(sessions)) if order is None else order
    order = list(order)
    for start in range(0, len(order), batch_size):
        yield [sessions[i] for i in order[start:start + batch_size]]


def steps_per_epoch(n_sessions: int, batch_size: int) -> int:
    return math.ceil(n_sessions / batch_size)


def session_texts(session: Session) -> Iterator[str]:
    for t in session.turns:
        yield t.text
    yield session.response
    for prof in session.profiles.values():
        for _, v in persona_items(prof):
            yield v


def build_vocabs(sessions: Sequence[Session], char_max: int = 9489, word_max: int = 10004) -> tuple[Vocab, Vocab]:
    """Character vocabulary over all text and word vocabulary over persona items."""
    from .vocab import build_char_vocab, build_word_vocab, segment_words

    chars = build_char_vocab((t for s in sessions for t in session_texts(s)), char_max)
    words = build_word_vocab(
        (w for s in sessions for p in s.profiles.values() for k, v in persona_items(p)
         for w in segment_words(f"{k} {v}")),
        word_max,
    )
    return chars, words
