"""Dense numpy tensors with reverse-mode automatic differentiation.

Every primitive records its inputs and a backward closure on the output
tensor; :func:`backward` walks the recorded graph in reverse topological
order.  Only what the dialogue model needs is provided.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

_ids = itertools.count()
_grad_enabled = True

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when a primitive receives operands of incompatible shape."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}")


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "node_id", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = np.zeros_like(arr) if requires_grad else None
        self.op = "leaf"
        self.node_id = next(_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other, self), scale(self, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        raise TypeError("only division by a python scalar is supported")

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _record(out_data: np.ndarray, op: str, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(out_data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _check_broadcast("add", a, b)
    return _record(
        a.data + b.data, "add", (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    return _record(a.data * a.dtype.type(c), "scale", (a,), lambda g: (g * a.dtype.type(c),))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _check_broadcast("mul", a, b)
    return _record(
        a.data * b.data, "mul", (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = a.data @ b.data
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(out, "matmul", (a, b), backward)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", a.shape, axes)
    inverse = tuple(np.argsort(axes))
    return _record(np.transpose(a.data, axes), "transpose", (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return _record(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in tensors)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(out, "concat", tensors, backward)


def slice_(a: Tensor, index) -> Tensor:
    try:
        out = a.data[index]
    except IndexError:
        raise ShapeError("slice", a.shape, index) from None

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _record(np.array(out, copy=True), "slice", (a,), backward)


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` at integer ``ids`` (any shape)."""
    ids = np.asarray(ids)
    if table.ndim != 2 or not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("embedding-gather", table.shape, ids.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding-gather", table.shape, f"ids out of range [{ids.min()}, {ids.max()}]")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _record(table.data[ids], "embedding-gather", (table,), backward)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(np.asarray(out), "sum", (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum_(a, axis, keepdims), 1.0 / float(n))


def _softmax_np(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    s = e.sum(axis=-1, keepdims=True)
    # fully masked rows produce all-zero weights rather than NaN
    return np.divide(e, s, out=np.zeros_like(e), where=s > 0)


def softmax(a: Tensor) -> Tensor:
    y = _softmax_np(a.data)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record(y, "softmax", (a,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeError("layer-norm", x.shape, gain.shape, bias.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    n = x.shape[-1]

    def backward(g):
        gx_hat = g * gain.data
        gx = inv / n * (n * gx_hat - gx_hat.sum(-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
        lead = tuple(range(x.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record(out.astype(x.dtype, copy=False), "layer-norm", (x, gain, bias), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record(a.data * mask, "relu", (a,), lambda g: (g * mask,))


def gelu(a: Tensor) -> Tensor:
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    out = (x * cdf).astype(x.dtype, copy=False)
    return _record(out, "gelu", (a,), lambda g: ((g * (cdf + x * pdf)).astype(x.dtype, copy=False),))


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None, train: bool = True) -> Tensor:
    """Inverted dropout; identity when ``rate == 0`` or not training."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0 or not train:
        return a
    if rng is None:
        raise ValueError("dropout at train time needs an rng")
    keep = (rng.random(a.shape) >= rate).astype(a.dtype) / a.dtype.type(1.0 - rate)
    out = _record(a.data * keep, "dropout", (a,), lambda g: (g * keep,))
    return out


def masked_fill(a: Tensor, mask, value: float) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    try:
        out = np.where(mask, a.dtype.type(value), a.data)
    except ValueError:
        raise ShapeError("masked-fill", a.shape, mask.shape) from None
    if out.shape != a.shape:
        raise ShapeError("masked-fill", a.shape, mask.shape)
    return _record(out, "masked-fill", (a,), lambda g: (np.where(mask, 0.0, g).astype(g.dtype),))


def cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Weighted mean cross-entropy of ``logits`` (..., V) against integer targets.

    ``weights`` (same shape as targets) selects supervised positions; the
    mean is taken over their total weight.
    """
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError("cross-entropy-from-logits", logits.shape, targets.shape)
    w = np.ones(targets.shape) if weights is None else np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if total <= 0:
        raise ValueError("cross-entropy over zero supervised positions")
    x = logits.data.reshape(-1, logits.shape[-1])
    t = targets.reshape(-1)
    wf = w.reshape(-1)
    m = x.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=-1))
    nll = lse - x[np.arange(len(t)), t]
    loss = np.asarray((wf * nll).sum() / total, dtype=logits.dtype)

    def backward(g):
        p = _softmax_np(x)
        p[np.arange(len(t)), t] -= 1.0
        gx = p * (wf / total)[:, None] * g
        return (gx.reshape(logits.shape).astype(logits.dtype, copy=False),)

    return _record(loss, "cross-entropy-from-logits", (logits,), backward)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _record(y, "exp", (a,), lambda g: (g * y,))


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "scale": scale,
    "elementwise-mul": mul,
    "matmul": matmul,
    "transpose": transpose,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "slice": slice_,
    "embedding-gather": embedding,
    "softmax-over-last-axis": softmax,
    "layer-norm": layer_norm,
    "relu": relu,
    "gelu": gelu,
    "dropout": dropout,
    "masked-fill": masked_fill,
    "cross-entropy-from-logits": cross_entropy,
    "reshape": reshape,
    "sum": sum_,
    "exp": exp,
}


def primitive_forward(op_name: str, *inputs, **kwargs) -> Tensor:
    """Apply a primitive by name."""
    try:
        fn = PRIMITIVES[op_name]
    except KeyError:
        raise ValueError(f"unknown primitive {op_name!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# reverse pass


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and p.node_id not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Returns a map from node id to gradient for the leaves reached.  Leaves
    not reachable from ``loss`` keep whatever (normally zero) grad they had.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    leaves: dict[int, np.ndarray] = {}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            leaves[node.node_id] = node.grad
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.node_id in grads:
                grads[parent.node_id] = grads[parent.node_id] + pg
            else:
                grads[parent.node_id] = pg
    return leaves


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    errors: dict[str, float] = field(default_factory=dict)
    failures: list[tuple[str, tuple[int, ...], float, float]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def finite_difference_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor] | Iterable[tuple[str, Tensor]],
    step: float = 1e-5,
    tolerance: float = 1e-6,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare autodiff gradients with central differences.

    ``f`` rebuilds the scalar loss from the current parameter values.  The
    relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    With ``max_coords`` only a random subset of each tensor is probed.
    """
    params = dict(params)
    for p in params.values():
        p.zero_grad()
    loss = f()
    base = loss.data.copy()
    if not np.array_equal(f().data, base):
        raise ValueError("f is not deterministic under a frozen seed")
    backward(loss)
    analytic = {k: p.grad.copy() for k, p in params.items()}
    rng = rng or np.random.default_rng(0)

    report = GradCheckReport(max_rel_error=0.0)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            up = float(f().data)
            flat[c] = orig - step
            down = float(f().data)
            flat[c] = orig
            numeric = (up - down) / (2 * step)
            a = float(analytic[name].reshape(-1)[c])
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
            if err > tolerance:
                report.failures.append((name, np.unravel_index(c, p.shape), a, numeric))
        report.errors[name] = worst
        report.max_rel_error = max(report.max_rel_error, worst)
    return report


# ---------------------------------------------------------------------------
# random streams

STREAM_PURPOSES = ("init", "dropout", "sampling", "shuffle", "mlm")


class RNGStreams:
    """Independent PCG64 generators, one per purpose, derived from one seed.

    Each stream is seeded by ``SeedSequence(seed, spawn_key=(index,))`` so
    drawing from one purpose never shifts another.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFF_FFFF_FFFF_FFFF
        self._streams = {
            name: np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=(i,))))
            for i, name in enumerate(STREAM_PURPOSES)
        }

    def __getitem__(self, purpose: str) -> np.random.Generator:
        return self._streams[purpose]

    def get_state(self) -> dict:
        return {k: g.bit_generator.state for k, g in self._streams.items()}

    def set_state(self, state: dict) -> None:
        for k, s in state.items():
            self._streams[k].bit_generator.state = s


def seeded_rng(seed: int) -> RNGStreams:
    return RNGStreams(seed)
