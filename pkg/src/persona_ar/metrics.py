"""Automatic evaluation: BLEU, F1, perplexity, Distinct-n, resource accounting.

All text metrics work on characters, matching the character-level model.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from .config import ModelConfig
from .tensor import no_grad


@dataclass
class MetricsReport:
    bleu: float
    f1: float
    ppl: float
    dist1: float
    dist2: float
    params: int
    peak_memory_estimate: int
    train_time: float

    def to_text(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=False) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu_corpus(hypotheses: Sequence[str], references: Sequence[str], max_order: int = 4,
                epsilon: float = 1e-9) -> float:
    """Corpus BLEU over character n-grams with brevity penalty.

    Orders with no hypothesis n-grams anywhere in the corpus are left out
    of the geometric mean; an order with n-grams but no matches gets
    ``epsilon`` matches.
    """
    if len(hypotheses) != len(references):
        raise ValueError("hypotheses and references differ in length")
    if not hypotheses:
        raise ValueError("empty corpus")
    matches = [0] * max_order
    totals = [0] * max_order
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_order + 1):
            h, r = _ngrams(hyp, n), _ngrams(ref, n)
            matches[n - 1] += sum((h & r).values())
            totals[n - 1] += sum(h.values())
    logs = []
    for m, t in zip(matches, totals):
        if t == 0:
            continue
        logs.append(math.log((m if m > 0 else epsilon) / t))
    if not logs or hyp_len == 0:
        return 0.0
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return bp * math.exp(sum(logs) / len(logs))


def overlap_f1(hypothesis: str, reference: str) -> float:
    if not hypothesis and not reference:
        return 0.0
    common = sum((Counter(hypothesis) & Counter(reference)).values())
    if common == 0:
        return 0.0
    p = common / len(hypothesis)
    r = common / len(reference)
    return 2 * p * r / (p + r)


def corpus_f1(hypotheses: Sequence[str], references: Sequence[str]) -> float:
    if not hypotheses:
        return 0.0
    return float(np.mean([overlap_f1(h, r) for h, r in zip(hypotheses, references)]))


def distinct_n(responses: Iterable[str], n: int, pooled: bool = True) -> float:
    """Distinct n-grams over total n-grams; ``pooled=False`` averages per response."""
    responses = list(responses)
    if not pooled:
        scores = [distinct_n([r], n) for r in responses if len(r) >= n]
        return float(np.mean(scores)) if scores else 0.0
    grams: Counter = Counter()
    for r in responses:
        grams.update(_ngrams(r, n))
    total = sum(grams.values())
    return len(grams) / total if total else 0.0


def token_nll(model, batches) -> tuple[float, int]:
    """Summed dialogue cross-entropy (nats) and supervised token count."""
    from .objectives import dialogue_loss

    total, count = 0.0, 0
    with no_grad():
        for batch in batches:
            n = int((~batch.target_pad).sum())
            loss = dialogue_loss(model(batch), batch.decoder_target, batch.target_pad)
            total += float(loss.data) * n
            count += n
    return total, count


def perplexity(model, batches) -> float:
    """exp of the token-weighted mean dialogue cross-entropy."""
    total, count = token_nll(model, batches)
    return math.exp(total / count) if count else float("nan")


def activation_floats(cfg: ModelConfig, batch_size: int, context_len: int, target_len: int) -> int:
    """Floats kept for backward in one training step, linear in batch size."""
    h, f, heads, v = cfg.hidden_size, cfg.ff_size, cfg.num_heads, cfg.vocab_size
    ff_width = 2 * cfg.ff_rank + f if cfg.use_factor_ff else f
    def layer(q_len: int, k_len: int, sources: int) -> int:
        attn = sources * (3 * q_len * h + heads * q_len * k_len) + q_len * h
        return attn + q_len * (ff_width + 4 * h)
    enc = cfg.num_layers * layer(context_len, context_len, 1)
    passes = 2  # dialogue encoder + auxiliary LM encoder
    dec = cfg.num_layers * layer(target_len, max(context_len, target_len), 3)
    per_sample = passes * enc + dec + target_len * v + 2 * (context_len + target_len) * h
    return batch_size * per_sample


def resource_report(cfg: ModelConfig, batch_size: int, context_len: int, target_len: int,
                    bytes_per_float: int = 4) -> dict[str, int]:
    from .model import count_parameters

    params = count_parameters(cfg)["total"]
    param_bytes = params * bytes_per_float
    optimizer_bytes = 2 * param_bytes
    activation_bytes = activation_floats(cfg, batch_size, context_len, target_len) * bytes_per_float
    return {
        "params": params,
        "parameter_bytes": param_bytes,
        "optimizer_bytes": optimizer_bytes,
        "activation_bytes": activation_bytes,
        "peak_memory_estimate": param_bytes + optimizer_bytes + activation_bytes,
    }
