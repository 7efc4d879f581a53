"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every op returns a new :class:`Tensor`. When any input requires gradients the
output keeps a reference to its parents and a closure that maps the output
gradient to parent gradients. :func:`backward` linearises the graph into a
:class:`Tape` (a topological order) and replays it in reverse.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

PROB_FLOOR = 1e-12
LEAKY_SLOPE = 0.2


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        joined = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return _make(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
        "matmul",
    )


def leaky_relu(x, slope: float = LEAKY_SLOPE) -> Tensor:
    x = as_tensor(x)
    scale = np.where(x.data > 0, 1.0, slope)
    return _make(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,), "exp")


def log(x, floor: float = PROB_FLOOR) -> Tensor:
    """Natural log of ``max(x, floor)``; the gradient is zero where the floor is active."""
    x = as_tensor(x)
    if np.any(x.data < 0):
        raise ValueError("log: negative entries")
    clamped = np.maximum(x.data, floor)
    live = x.data >= floor
    return _make(np.log(clamped), (x,), lambda g: (np.where(live, g / clamped, 0.0),), "log")


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum(x, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    shape = x.shape

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis)), (x,), back, "sum")


def mean(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    return mul(sum(x, axis=axis), 1.0 / n)


def sq_norm(x) -> Tensor:
    """Squared L2 norm of all entries."""
    x = as_tensor(x)
    return _make(np.asarray(np.dot(x.data.ravel(), x.data.ravel())), (x,), lambda g: (2.0 * g * x.data,), "sq_norm")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, shape) from None
    return _make(y, (x,), lambda g: (g.reshape(old),), "reshape")


def take_slice(flat, start: int, shape: tuple[int, ...]) -> Tensor:
    """View ``flat[start:start+prod(shape)]`` reshaped; gradients scatter back."""
    flat = as_tensor(flat)
    n = int(np.prod(shape))
    if flat.data.ndim != 1 or start < 0 or start + n > flat.size:
        raise ShapeError("take_slice", flat.shape, shape)
    total = flat.size

    def back(g):
        out = np.zeros(total)
        out[start:start + n] = g.ravel()
        return (out,)

    return _make(flat.data[start:start + n].reshape(shape), (flat,), back, "take_slice")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        y = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in ts]) from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make(y, ts, lambda g: tuple(np.split(g, sizes, axis=axis)), "concat")


# ---------------------------------------------------------------------------
# probability ops


def softmax(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, (x,), back, "softmax")


def log_softmax(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    s = np.exp(y)

    def back(g):
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return _make(y, (x,), back, "log_softmax")


def pairwise_distances(x) -> Tensor:
    """Euclidean distance matrix between the rows of a 2-D tensor.

    The gradient of a zero distance is taken as zero.
    """
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError("pairwise_distances", x.shape)
    diff = x.data[:, None, :] - x.data[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    inv = np.divide(1.0, dist, out=np.zeros_like(dist), where=dist > 0)

    def back(g):
        w = (g + g.T) * inv
        return (np.einsum("ij,ijk->ik", w, diff),)

    return _make(dist, (x,), back, "pairwise_distances")


def one_hot(labels, classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"labels must lie in [0, {classes}), got range [{labels.min()}, {labels.max()}]")
    out = np.zeros((labels.size, classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def kl_divergence(p, q, reduction: str = "mean") -> Tensor:
    """Row-wise KL(p || q) with ``0 * log(0/q) := 0``; logs use a floor of PROB_FLOOR.

    ``reduction`` is ``"mean"`` (batch mean, scalar) or ``"none"`` (one value per row).
    """
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise ShapeError("kl_divergence", p.shape, q.shape)
    if np.any(p.data < 0) or np.any(q.data < 0):
        raise ValueError("kl_divergence: negative probability entries")
    rows = sum(mul(p, sub(log(p), log(q))), axis=-1)
    return _reduce(rows, reduction)


def cross_entropy(logits, labels, reduction: str = "mean") -> Tensor:
    """Mean over the batch of ``-log_softmax(logits)[label]``."""
    logits = as_tensor(logits)
    if logits.data.ndim != 2:
        raise ShapeError("cross_entropy", logits.shape)
    mask = one_hot(labels, logits.shape[1])
    if mask.shape[0] != logits.shape[0]:
        raise ShapeError("cross_entropy", logits.shape, (mask.shape[0],))
    rows = mul(sum(mul(log_softmax(logits), mask), axis=-1), -1.0)
    return _reduce(rows, reduction)


def _reduce(rows: Tensor, reduction: str) -> Tensor:
    if reduction == "mean":
        return mean(rows)
    if reduction == "none":
        return rows
    raise ValueError(f"unknown reduction {reduction!r}")


# ---------------------------------------------------------------------------
# backward pass


class Tape:
    """Nodes reachable from a root, in topological order (inputs before outputs)."""

    def __init__(self, root: Tensor):
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self.nodes = order

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(loss: Tensor) -> Tape:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor requiring grad."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not depend on any tensor requiring grad")
    tape = Tape(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg
    return tape


# ---------------------------------------------------------------------------
# optimizer


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.1
    weight_decay: float = 1e-3
    decay_factor: float = 0.998

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if not 0 < self.decay_factor <= 1:
            raise ValueError("decay_factor must lie in (0, 1]")

    def lr_at(self, round_index: int) -> float:
        """Learning rate for a 0-based communication round."""
        return self.learning_rate * self.decay_factor ** round_index


def sgd_update(params: np.ndarray, grads: np.ndarray, lr: float, weight_decay: float) -> np.ndarray:
    if params.shape != grads.shape:
        raise ShapeError("sgd_step", params.shape, grads.shape)
    if lr == 0.0:
        return params.copy()
    return params - lr * (grads + weight_decay * params)


def sgd_step(params, grads, cfg: SgdConfig, round_index: int = 0):
    """One plain SGD step with L2 weight decay at the round's decayed learning rate.

    Accepts ParamVectors or bare arrays; returns the same kind as ``params``.
    """
    from fedftg.models import ParamVector

    g = grads.values if isinstance(grads, ParamVector) else np.asarray(grads, dtype=np.float64)
    if isinstance(params, ParamVector):
        return params.with_values(sgd_update(params.values, g, cfg.lr_at(round_index), cfg.weight_decay))
    return sgd_update(np.asarray(params, dtype=np.float64), g, cfg.lr_at(round_index), cfg.weight_decay)
