"""Training objective: dialogue cross-entropy plus a weighted auxiliary LM loss."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import Batch
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class LossBreakdown:
    dialogue: Tensor
    lm: Tensor
    lm_weight: float
    total: Tensor

    def as_floats(self) -> dict[str, float]:
        return {"L_D": float(self.dialogue.data), "L_LM": float(self.lm.data),
                "total": float(self.total.data)}


def dialogue_loss(logits: Tensor, targets: np.ndarray, pad: np.ndarray) -> Tensor:
    """Mean token cross-entropy over non-pad target positions."""
    pad = np.asarray(pad, dtype=bool)
    if pad.all():
        raise ValueError("dialogue loss over an all-padding batch")
    return T.cross_entropy(logits, targets, (~pad).astype(np.float64))


def mlm_loss(logits: Tensor | None, labels: np.ndarray, dtype=np.float32) -> Tensor:
    """Mean cross-entropy at corrupted positions; 0 when nothing was corrupted."""
    if logits is None or len(labels) == 0:
        log.warning("no corrupted positions in batch; LM loss is 0")
        return Tensor(np.zeros((), dtype=dtype))
    return T.cross_entropy(logits, labels)


lm_loss = mlm_loss


def combined_loss(l_dialogue: Tensor, l_lm: Tensor, lm_weight: float) -> Tensor:
    if lm_weight < 0:
        raise ValueError("lm_weight must be non-negative")
    return l_dialogue + T.scale(l_lm, lm_weight)


def compute_loss(model, batch: Batch, lm_weight: float = 0.5, train: bool = False, rng=None) -> LossBreakdown:
    """Full forward pass and both losses for one batch."""
    enc = model.encode(batch, train, rng)
    logits = model.decode(enc, batch.decoder_input, train, rng)
    l_d = dialogue_loss(logits, batch.decoder_target, batch.target_pad)
    if lm_weight:
        lm_logits, labels = model.lm_logits(batch, enc, train, rng)
        l_lm = mlm_loss(lm_logits, labels, model.dtype)
    else:
        l_lm = Tensor(np.zeros((), dtype=model.dtype))
    return LossBreakdown(l_d, l_lm, lm_weight, combined_loss(l_d, l_lm, lm_weight))
