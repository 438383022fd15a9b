"""AdamW, global-norm clipping, reduce-on-plateau and the LR range test."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .tensor import Tensor, backward

log = logging.getLogger(__name__)


class NonFiniteGradient(FloatingPointError):
    pass


class AdamW:
    """Adam with bias-corrected moments and decoupled weight decay.

    p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)
    """

    def __init__(self, params: Sequence[Tensor], lr: float = 0.2e-2, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.05):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradient("non-finite gradient; step refused")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps) + self.weight_decay * p.data
            p.data -= (self.lr * update).astype(p.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def state_dict(self) -> dict:
        return {"lr": self.lr, "step": self.step_count, "m": self.m, "v": self.v}

    def load_state_dict(self, state: dict) -> None:
        self.lr = state["lr"]
        self.step_count = state["step"]
        for dst, src in zip(self.m, state["m"]):
            dst[...] = src
        for dst, src in zip(self.v, state["v"]):
            dst[...] = src


def adamw_step(params: Sequence[Tensor], state: AdamW) -> None:
    state.step()


def global_norm(grads: Iterable[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))


def clip_global_norm(params: Sequence[Tensor], threshold: float = 1.0) -> float:
    """Scale all grads in place so their joint L2 norm is at most ``threshold``.

    Returns the norm before clipping.
    """
    if threshold <= 0:
        raise ValueError("clip threshold must be positive")
    norm = global_norm(p.grad for p in params)
    if norm > threshold:
        factor = threshold / norm
        for p in params:
            p.grad *= p.grad.dtype.type(factor)
    return norm


@dataclass
class ReduceLROnPlateau:
    lr: float
    factor: float = 0.5
    patience: int = 60
    min_lr: float = 1.5e-4
    best: float = math.inf
    bad_steps: int = 0

    def step(self, metric: float) -> float:
        """Mode min, zero threshold; returns the (possibly reduced) lr.

        The lr is cut once ``patience`` consecutive calls fail to improve.
        """
        if not math.isfinite(metric):
            raise ValueError("plateau metric must be finite")
        if metric < self.best:
            self.best = metric
            self.bad_steps = 0
        else:
            self.bad_steps += 1
            if self.bad_steps >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.bad_steps = 0
        return self.lr

    def state_dict(self) -> dict:
        return {"lr": self.lr, "factor": self.factor, "patience": self.patience,
                "min_lr": self.min_lr, "best": self.best, "bad_steps": self.bad_steps}

    def load_state_dict(self, state: dict) -> None:
        for k, v in state.items():
            setattr(self, k, v)


def plateau_step(state: ReduceLROnPlateau, metric: float) -> float:
    return state.step(metric)


# ---------------------------------------------------------------------------
# LR range test


class LRFinderDiverged(RuntimeError):
    def __init__(self, message: str, curve: "LRCurve"):
        super().__init__(message)
        self.curve = curve


@dataclass
class LRCurve:
    lrs: list[float] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    suggestion: float = float("nan")
    steepest: float = float("nan")
    diverged_at: float | None = None

    def to_text(self) -> str:
        return "".join(f"{lr:.10g}\t{loss:.10g}\n" for lr, loss in zip(self.lrs, self.losses))


def exponential_lrs(lr_min: float, lr_max: float, steps: int) -> np.ndarray:
    return lr_min * (lr_max / lr_min) ** (np.arange(steps) / (steps - 1))


def lr_range_test(
    build: Callable[[], tuple[Sequence[Tensor], Callable[[object], Tensor]]],
    batches: Iterable,
    lr_min: float = 1e-7,
    lr_max: float = 1.0,
    steps: int = 100,
    smoothing: float = 0.98,
    diverge_factor: float = 4.0,
    clip: float | None = 1.0,
    weight_decay: float = 0.0,
) -> LRCurve:
    """Train with exponentially increasing lr and record the smoothed loss.

    ``build()`` returns fresh parameters and a loss function of one batch.
    The suggestion is the lr at minimal smoothed loss divided by ten (never
    below ``lr_min``); the lr of steepest descent is reported alongside.
    """
    if not lr_min < lr_max:
        raise ValueError("lr_min must be below lr_max")
    if steps < 10:
        raise ValueError("lr range test needs at least 10 steps")
    params, loss_fn = build()
    opt = AdamW(params, lr=lr_min, weight_decay=weight_decay)
    curve = LRCurve()
    avg, best = 0.0, math.inf
    batches = iter(batches)
    for k, lr in enumerate(exponential_lrs(lr_min, lr_max, steps)):
        opt.lr = float(lr)
        opt.zero_grad()
        loss = loss_fn(next(batches))
        backward(loss)
        if clip:
            clip_global_norm(params, clip)
        value = float(loss.data)
        avg = smoothing * avg + (1 - smoothing) * value
        smoothed = avg / (1 - smoothing ** (k + 1))
        if not math.isfinite(smoothed) or (k > 0 and smoothed > diverge_factor * best):
            curve.diverged_at = float(lr)
            if k <= 1:
                raise LRFinderDiverged(f"loss diverged immediately at lr={lr:.3g}", curve)
            break
        curve.lrs.append(float(lr))
        curve.losses.append(smoothed)
        best = min(best, smoothed)
        try:
            opt.step()
        except NonFiniteGradient:
            curve.diverged_at = float(lr)
            break
    i = int(np.argmin(curve.losses))
    curve.suggestion = max(curve.lrs[i] / 10.0, lr_min)
    if len(curve.losses) > 2:
        slope = np.gradient(np.asarray(curve.losses), np.log(curve.lrs))
        curve.steepest = curve.lrs[int(np.argmin(slope))]
    else:
        curve.steepest = curve.lrs[0]
    return curve
