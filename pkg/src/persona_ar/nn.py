"""Small module system on top of :mod:`persona_ar.tensor`."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Parameter container; child modules and parameters are found by attribute walk.

    A module or tensor reachable under several names (shared layers) is
    reported once, under the first name in attribute order.
    """

    def named_parameters(self, prefix: str = "", _seen: set | None = None) -> Iterator[tuple[str, Tensor]]:
        seen = set() if _seen is None else _seen
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            yield from _walk(value, full, seen)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        if set(params) != set(state):
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            raise KeyError(f"state mismatch: missing {missing}, unexpected {extra}")
        for k, p in params.items():
            if p.shape != state[k].shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {p.shape}")
            p.data[...] = state[k]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.zero_grad()
        return self


def _walk(value, name: str, seen: set):
    if isinstance(value, Tensor):
        if value.requires_grad and id(value) not in seen:
            seen.add(id(value))
            yield name, value
    elif isinstance(value, Module):
        if id(value) not in seen:
            seen.add(id(value))
            yield from value.named_parameters(name + ".", seen)
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(v, f"{name}.{i}", seen)
    elif isinstance(value, dict):
        for k, v in value.items():
            yield from _walk(v, f"{name}.{k}", seen)


def parameter(data, dtype=T.DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


def uniform_fan_in(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return parameter(rng.uniform(-bound, bound, size=shape))


def normal(rng: np.random.Generator, shape, std: float = 0.02) -> Tensor:
    return parameter(rng.normal(0.0, std, size=shape))


class Linear(Module):
    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int, bias: bool = True):
        self.weight = uniform_fan_in(rng, n_in, (n_in, n_out))
        self.bias = parameter(np.zeros(n_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


class LayerNorm(Module):
    def __init__(self, size: int, eps: float = 1e-5):
        self.gain = parameter(np.ones(size))
        self.bias = parameter(np.zeros(size))
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self._eps)
