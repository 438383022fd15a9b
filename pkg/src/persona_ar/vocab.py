"""Character vocabulary for dialogue text and word vocabulary for persona tags."""

from __future__ import annotations

import re
from collections import Counter
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

PAD, UNK, BOS, EOS, SEP, MASK = range(6)
CHAR_SPECIALS = ("<pad>", "<unk>", "<bos>", "<eos>", "_SEP", "<mask>")
WORD_SPECIALS = ("<pad>", "<unk>")

DEFAULT_CHAR_VOCAB_SIZE = 9489
DEFAULT_WORD_VOCAB_SIZE = 10004

PERSONA_FIELDS = ("gender", "address", "interests")

_WORD_RE = re.compile(r"[^\s\W]+|[^\s\w]", re.UNICODE)


def segment_words(text: str) -> list[str]:
    """Whitespace + punctuation segmentation; punctuation is dropped."""
    return [w for w in _WORD_RE.findall(text) if any(ch.isalnum() for ch in w)]


class Vocab:
    """Token <-> id bijection with a fixed block of special tokens first."""

    def __init__(self, tokens: Sequence[str], specials: Sequence[str]):
        if tuple(tokens[: len(specials)]) != tuple(specials):
            raise ValueError("vocabulary must start with its special tokens")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.tokens = list(tokens)
        self.specials = tuple(specials)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def id(self, token: str) -> int:
        return self.index.get(token, UNK)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        tokens = Path(path).read_text(encoding="utf-8").split("\n")
        if tokens and tokens[-1] == "":
            tokens.pop()
        specials = CHAR_SPECIALS if tuple(tokens[:6]) == CHAR_SPECIALS else WORD_SPECIALS
        return cls(tokens, specials)


def _ranked(counts: Counter, limit: int) -> list[str]:
    # descending frequency, ties by code point order
    return [t for t, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))][: max(limit, 0)]


def build_char_vocab(texts: Iterable[str], max_size: int = DEFAULT_CHAR_VOCAB_SIZE) -> Vocab:
    """Specials, then characters by frequency.  Specials count toward ``max_size``."""
    counts: Counter = Counter()
    seen_any = False
    for text in texts:
        seen_any = True
        counts.update(text)
    if not seen_any or not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    for s in CHAR_SPECIALS:
        counts.pop(s, None)
    return Vocab(list(CHAR_SPECIALS) + _ranked(counts, max_size - len(CHAR_SPECIALS)), CHAR_SPECIALS)


def build_word_vocab(
    words: Iterable[str], max_size: int = DEFAULT_WORD_VOCAB_SIZE
) -> Vocab:
    counts = Counter(w for w in words if w not in WORD_SPECIALS)
    return Vocab(list(WORD_SPECIALS) + _ranked(counts, max_size - len(WORD_SPECIALS)), WORD_SPECIALS)


def encode_chars(text: str, vocab: Vocab) -> list[int]:
    return [vocab.id(ch) for ch in text]


def encode_dialogue_sequence(turns: Sequence[str], vocab: Vocab) -> list[int]:
    """Splice utterances into one character sequence separated by ``_SEP``."""
    if not turns:
        raise ValueError("empty turn list")
    ids: list[int] = []
    for i, turn in enumerate(turns):
        if i:
            ids.append(SEP)
        ids.extend(encode_chars(turn, vocab))
    return ids


def persona_items(profile: Mapping) -> list[tuple[str, str]]:
    """Flatten a profile into (key, value) items; each interest is its own item."""
    items = []
    for key in PERSONA_FIELDS:
        value = profile.get(key)
        if value is None:
            continue
        values = value if isinstance(value, (list, tuple)) else [value]
        items.extend((key, str(v)) for v in values if str(v))
    return items


def encode_persona_words(
    profile: Mapping,
    vocab: Vocab,
    segmenter: Callable[[str], list[str]] = segment_words,
) -> list[list[int]]:
    """One word-id list per persona key-value item, rendered as ``"key value"``."""
    return [[vocab.id(w) for w in segmenter(f"{k} {v}")] for k, v in persona_items(profile)]


def decode_ids(ids: Iterable[int], vocab: Vocab) -> str:
    out = []
    n_special = len(vocab.specials)
    for i in ids:
        i = int(i)
        if not 0 <= i < len(vocab):
            raise ValueError(f"id {i} outside vocabulary of size {len(vocab)}")
        if i >= n_special:
            out.append(vocab.tokens[i])
    return "".join(out)
