"""Flat parameter vectors, the MLP classifier and the conditional generator."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fedftg import autodiff as ad
from fedftg.autodiff import Tensor

Layout = tuple[tuple[int, ...], ...]


class LayoutError(ValueError):
    pass


class ParamVector:
    """Immutable flat float64 parameter array plus the shapes of the tensors it packs."""

    __slots__ = ("_values", "layout", "offsets")

    def __init__(self, values, layout):
        self.layout: Layout = tuple(tuple(int(n) for n in s) for s in layout)
        sizes = [int(np.prod(s)) for s in self.layout]
        self.offsets = tuple(int(o) for o in np.concatenate([[0], np.cumsum(sizes)]))
        arr = np.array(values, dtype=np.float64).ravel()
        if arr.size != self.offsets[-1]:
            raise LayoutError(f"{arr.size} values do not fill layout of size {self.offsets[-1]}")
        arr.flags.writeable = False
        self._values = arr

    @property
    def values(self) -> np.ndarray:
        return self._values

    def __len__(self) -> int:
        return self._values.size

    def __repr__(self) -> str:
        return f"ParamVector(n={len(self)}, layout={self.layout})"

    def with_values(self, values) -> "ParamVector":
        return ParamVector(values, self.layout)

    @classmethod
    def zeros_like(cls, other: "ParamVector") -> "ParamVector":
        return cls(np.zeros(len(other)), other.layout)

    @classmethod
    def flatten(cls, arrays) -> "ParamVector":
        arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
        return cls(np.concatenate([a.ravel() for a in arrays]), [a.shape for a in arrays])

    def unflatten(self) -> list[np.ndarray]:
        return [
            self._values[a:b].reshape(s)
            for a, b, s in zip(self.offsets[:-1], self.offsets[1:], self.layout)
        ]

    def _check(self, other: "ParamVector") -> None:
        if not isinstance(other, ParamVector):
            raise TypeError(f"expected ParamVector, got {type(other).__name__}")
        if other.layout != self.layout:
            raise LayoutError("ParamVector layouts differ")

    def __add__(self, other: "ParamVector") -> "ParamVector":
        self._check(other)
        return self.with_values(self._values + other._values)

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        self._check(other)
        return self.with_values(self._values - other._values)

    def __mul__(self, scalar: float) -> "ParamVector":
        return self.with_values(self._values * float(scalar))

    __rmul__ = __mul__

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, ParamVector)
            and other.layout == self.layout
            and np.array_equal(other._values, self._values)
        )

    __hash__ = None

    def dot(self, other: "ParamVector") -> float:
        self._check(other)
        return float(self._values @ other._values)

    def norm(self) -> float:
        return float(np.linalg.norm(self._values))

    def tensor(self, requires_grad: bool = False) -> Tensor:
        return Tensor(self._values.copy(), requires_grad=requires_grad)

    def to_bytes(self) -> bytes:
        """Layout descriptor then values, all little-endian.

        Descriptor: u64 entry count, then one (rows, cols) u64 pair per entry;
        1-D entries are written as (n, 0).
        """
        head = [len(self.layout)]
        for shape in self.layout:
            if len(shape) == 1:
                head += [shape[0], 0]
            elif len(shape) == 2:
                head += list(shape)
            else:
                raise LayoutError(f"cannot serialise {len(shape)}-D entry")
        return struct.pack(f"<{len(head)}Q", *head) + self._values.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ParamVector":
        if len(blob) < 8:
            raise LayoutError("truncated ParamVector header")
        (count,) = struct.unpack_from("<Q", blob, 0)
        if len(blob) < 8 + 16 * count:
            raise LayoutError("truncated ParamVector layout")
        dims = struct.unpack_from(f"<{2 * count}Q", blob, 8)
        layout = [(r,) if c == 0 else (r, c) for r, c in zip(dims[::2], dims[1::2])]
        start = 8 + 16 * count
        n = sum(int(np.prod(s)) for s in layout)
        if len(blob) - start != 8 * n:
            raise LayoutError(f"expected {8 * n} value bytes, found {len(blob) - start}")
        return cls(np.frombuffer(blob, dtype="<f8", offset=start).astype(np.float64), layout)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ParamVector":
        return cls.from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# configs


@dataclass(frozen=True)
class ClassifierConfig:
    input_dim: int
    class_count: int
    hidden_widths: tuple[int, ...] = (64, 64)

    def __post_init__(self):
        if min((self.input_dim, self.class_count, *self.hidden_widths)) < 1:
            raise ValueError("all classifier widths must be >= 1")

    def layout(self) -> Layout:
        widths = [self.input_dim, *self.hidden_widths, self.class_count]
        out = []
        for a, b in zip(widths[:-1], widths[1:]):
            out += [(a, b), (b,)]
        return tuple(out)


@dataclass(frozen=True)
class GeneratorConfig:
    noise_dim: int
    class_count: int
    output_dim: int
    hidden_widths: tuple[int, ...] = (64,)
    label_embed_dim: int | None = None  # defaults to noise_dim

    def __post_init__(self):
        if self.noise_dim < 1:
            raise ValueError("noise_dim must be >= 1")
        if min((self.class_count, self.output_dim, self.embed_dim, *self.hidden_widths)) < 1:
            raise ValueError("all generator widths must be >= 1")

    @property
    def embed_dim(self) -> int:
        return self.noise_dim if self.label_embed_dim is None else self.label_embed_dim

    def layout(self) -> Layout:
        widths = [self.noise_dim + self.embed_dim, *self.hidden_widths, self.output_dim]
        out = [(self.class_count, self.embed_dim)]
        for a, b in zip(widths[:-1], widths[1:]):
            out += [(a, b), (b,)]
        return tuple(out)


def init_params(cfg: ClassifierConfig | GeneratorConfig, seed: int) -> ParamVector:
    """Glorot-uniform weights, zero biases. Embedding tables are treated as weights."""
    rng = np.random.default_rng(seed)
    arrays = []
    for shape in cfg.layout():
        if len(shape) == 1:
            arrays.append(np.zeros(shape))
        else:
            a = np.sqrt(6.0 / (shape[0] + shape[1]))
            arrays.append(rng.uniform(-a, a, size=shape))
    return ParamVector.flatten(arrays)


# ---------------------------------------------------------------------------
# forward passes


def _as_param_tensor(params) -> tuple[Tensor, Layout, tuple[int, ...]]:
    if isinstance(params, ParamVector):
        return params.tensor(), params.layout, params.offsets
    if isinstance(params, tuple) and len(params) == 2:
        t, pv = params
        return t, pv.layout, pv.offsets
    raise TypeError("params must be a ParamVector or a (Tensor, ParamVector) pair")


def _mlp(h: Tensor, flat: Tensor, layout: Layout, offsets, first: int) -> Tensor:
    n_layers = (len(layout) - first) // 2
    for i in range(n_layers):
        wi = first + 2 * i
        w = ad.take_slice(flat, offsets[wi], layout[wi])
        b = ad.take_slice(flat, offsets[wi + 1], layout[wi + 1])
        if h.shape[1] != layout[wi][0]:
            raise ad.ShapeError("mlp_layer", h.shape, layout[wi])
        h = ad.add(ad.matmul(h, w), b)
        if i < n_layers - 1:
            h = ad.leaky_relu(h)
    return h


def classifier_forward(x, params) -> Tensor:
    """Logits of the leaky-ReLU MLP classifier.

    ``params`` is either a ParamVector (treated as a constant) or a pair
    ``(flat_tensor, template)`` where ``flat_tensor`` carries the values to
    differentiate and ``template`` supplies the layout.
    """
    x = ad.as_tensor(x)
    flat, layout, offsets = _as_param_tensor(params)
    if len(layout) % 2 or len(layout) < 2:
        raise LayoutError("classifier layout must be (weight, bias) pairs")
    if x.data.ndim != 2 or x.shape[1] != layout[0][0]:
        raise ad.ShapeError("classifier_forward", x.shape, layout[0])
    return _mlp(x, flat, layout, offsets, 0)


def generator_forward(z, labels, params) -> Tensor:
    """``tanh(MLP(concat(z, embed[y])))``; params as in :func:`classifier_forward`."""
    z = ad.as_tensor(z)
    flat, layout, offsets = _as_param_tensor(params)
    if len(layout) % 2 == 0:
        raise LayoutError("generator layout must start with an embedding table")
    classes, embed_dim = layout[0]
    if z.data.ndim != 2 or z.shape[1] + embed_dim != layout[1][0]:
        raise ad.ShapeError("generator_forward", z.shape, layout[1])
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (z.shape[0],):
        raise ad.ShapeError("generator_forward", z.shape, labels.shape)
    onehot = ad.one_hot(labels, classes)
    table = ad.take_slice(flat, offsets[0], layout[0])
    h = ad.concat([z, ad.matmul(Tensor(onehot), table)], axis=1)
    return ad.tanh(_mlp(h, flat, layout, offsets, 1))


def predict(x: np.ndarray, params: ParamVector) -> np.ndarray:
    """Class predictions, no tape."""
    return classifier_forward(Tensor(x), params).data.argmax(axis=1)


def accuracy(x: np.ndarray, labels: np.ndarray, params: ParamVector) -> float:
    return float(np.mean(predict(x, params) == np.asarray(labels)))
