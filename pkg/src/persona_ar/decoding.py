"""Nucleus (top-p / top-k) sampling of responses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Batch
from .tensor import no_grad
from .vocab import BOS, EOS, MASK, PAD, SEP, UNK, Vocab, decode_ids

# never sampled; EOS stays allowed
BLOCKED_IDS = (PAD, UNK, BOS, SEP, MASK)


@dataclass(frozen=True)
class SamplerConfig:
    temperature: float = 0.7
    top_k: int = 0
    top_p: float = 0.9
    max_length: int = 15

    def __post_init__(self):
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError("top_p must be in (0, 1]")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.top_k < 0:
            raise ValueError("top_k must be >= 0")


def nucleus_order(probs: np.ndarray) -> np.ndarray:
    """Token ids by descending probability, ties by ascending id."""
    return np.lexsort((np.arange(len(probs)), -probs))


def nucleus_filter(probs, top_p: float = 0.9, top_k: int = 0) -> np.ndarray:
    """Keep the smallest descending prefix with mass >= top_p (capped at top_k), renormalized."""
    probs = np.asarray(probs, dtype=np.float64)
    order = nucleus_order(probs)
    cumulative = np.cumsum(probs[order])
    keep = int(np.searchsorted(cumulative, top_p, side="left")) + 1
    keep = min(max(keep, 1), len(probs))
    if top_k > 0:
        keep = min(keep, top_k)
    out = np.zeros_like(probs)
    kept = order[:keep]
    out[kept] = probs[kept] / probs[kept].sum()
    return out


def softmax_with_temperature(logits: np.ndarray, temperature: float) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z[np.isfinite(z)].max()
    e = np.exp(z)
    return e / e.sum()


def sample_next(logits, config: SamplerConfig, rng: np.random.Generator) -> int:
    probs = nucleus_filter(softmax_with_temperature(logits, config.temperature), config.top_p, config.top_k)
    # inverse CDF over token ids keeps one uniform draw per token
    cdf = np.cumsum(probs)
    u = rng.random() * cdf[-1]
    idx = int(np.searchsorted(cdf, u, side="right"))
    idx = min(idx, len(probs) - 1)
    while probs[idx] == 0.0:  # guard against landing on a zero-width bin at the edge
        idx -= 1
    return idx


def generate_ids(model, batch: Batch, config: SamplerConfig, rng: np.random.Generator) -> list[list[int]]:
    """Autoregressive sampling for every session in ``batch``."""
    with no_grad():
        enc = model.encode(batch)
        b = batch.size
        seqs = np.full((b, 1), BOS, dtype=np.int64)
        done = np.zeros(b, dtype=bool)
        out: list[list[int]] = [[] for _ in range(b)]
        for _ in range(config.max_length):
            logits = model.decode(enc, seqs).data[:, -1, :].astype(np.float64)
            logits[:, list(BLOCKED_IDS)] = -np.inf
            nxt = np.full(b, PAD, dtype=np.int64)
            for i in range(b):
                if done[i]:
                    continue
                tok = sample_next(logits[i], config, rng)
                if tok == EOS:
                    done[i] = True
                else:
                    out[i].append(tok)
                    nxt[i] = tok
            if done.all():
                break
            seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
    return out


def generate_response(model, batch: Batch, vocab: Vocab, config: SamplerConfig = SamplerConfig(),
                      rng: np.random.Generator | None = None) -> list[str]:
    rng = rng if rng is not None else np.random.default_rng(0)
    return [decode_ids(ids, vocab) for ids in generate_ids(model, batch, config, rng)]
