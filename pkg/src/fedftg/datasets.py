"""Datasets, Dirichlet label partitioning across clients, and label statistics."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Malformed IDX file; ``offset`` is the byte position where reading failed."""

    def __init__(self, path, offset: int, message: str):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{path}: {message} (at byte offset {offset})")


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if features.ndim != 2 or labels.shape != (features.shape[0],):
            raise ValueError(f"features {features.shape} and labels {labels.shape} disagree")
        if features.shape[0] < 1:
            raise ValueError("dataset must hold at least one example")
        if labels.min() < 0 or labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if not np.all(np.isfinite(features)):
            raise ValueError("features must be finite")
        features.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.labels.size

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def class_counts(self, indices=None) -> np.ndarray:
        labels = self.labels if indices is None else self.labels[np.asarray(indices, dtype=np.int64)]
        return np.bincount(labels, minlength=self.num_classes)

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.num_classes)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["label"] + [f"f{i}" for i in range(self.dim)])
            for y, row in zip(self.labels, self.features):
                w.writerow([int(y)] + [repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path, num_classes: int | None = None) -> "LabeledDataset":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        if not header or header[0] != "label":
            raise ValueError(f"{path}: header must start with 'label'")
        labels = np.array([int(r[0]) for r in body], dtype=np.int64)
        feats = np.array([[float(v) for v in r[1:]] for r in body], dtype=np.float64)
        m = int(labels.max()) + 1 if num_classes is None else num_classes
        return cls(feats.reshape(len(body), len(header) - 1), labels, m)


@dataclass(frozen=True)
class ClientShard:
    client_id: int
    indices: np.ndarray
    counts: np.ndarray

    def __len__(self) -> int:
        return self.indices.size


@dataclass(frozen=True)
class PartitionSpec:
    num_clients: int
    beta: float | None = 0.3  # None means IID
    seed: int = 0

    def __post_init__(self):
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if self.beta is not None and not self.beta > 0:
            raise ValueError("beta must be positive")

    @property
    def iid(self) -> bool:
        return self.beta is None


def make_synthetic(classes: int, per_class: int, dims: int, spread: float, seed: int) -> LabeledDataset:
    """Gaussian blobs whose means sit on the unit circle in the first two coordinates.

    Features are clipped to [-1, 1] to match the generator's output range.
    """
    if classes < 2 or per_class < 1:
        raise ValueError("need classes >= 2 and per_class >= 1")
    if dims < 2:
        raise ValueError("need dims >= 2")
    rng = np.random.default_rng(seed)
    angles = 2 * np.pi * np.arange(classes) / classes
    means = np.zeros((classes, dims))
    means[:, 0] = np.cos(angles)
    means[:, 1] = np.sin(angles)
    labels = np.repeat(np.arange(classes), per_class)
    feats = means[labels] + spread * rng.standard_normal((labels.size, dims))
    order = rng.permutation(labels.size)
    return LabeledDataset(np.clip(feats[order], -1.0, 1.0), labels[order], classes)


def make_synthetic_split(
    classes: int, train_per_class: int, test_per_class: int, dims: int, spread: float, seed: int
) -> tuple[LabeledDataset, LabeledDataset]:
    """Train and balanced test sets drawn from the same blobs with independent noise."""
    train = make_synthetic(classes, train_per_class, dims, spread, seed)
    test = make_synthetic(classes, test_per_class, dims, spread, seed + 0x9E3779B9)
    return train, test


# ---------------------------------------------------------------------------
# IDX


def _read_idx(path, magic: int, ndims: int) -> np.ndarray:
    blob = Path(path).read_bytes()
    header = 4 + 4 * ndims
    if len(blob) < 4:
        raise IdxFormatError(path, len(blob), "file too short for magic number")
    (found,) = struct.unpack_from(">I", blob, 0)
    if found != magic:
        raise IdxFormatError(path, 0, f"bad magic 0x{found:08x}, expected 0x{magic:08x}")
    if len(blob) < header:
        raise IdxFormatError(path, len(blob), "truncated header")
    dims = struct.unpack_from(f">{ndims}I", blob, 4)
    expected = int(np.prod(dims))
    have = len(blob) - header
    if have < expected:
        record = int(np.prod(dims[1:]))
        raise IdxFormatError(
            path, len(blob),
            f"truncated: header declares {dims[0]} records, found {have // record}",
        )
    return np.frombuffer(blob, dtype=np.uint8, count=expected, offset=header).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int | None = None) -> LabeledDataset:
    """Read an IDX image/label pair; pixels map to [-1, 1] via v/127.5 - 1."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1).astype(np.int64)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(labels_path, 4, f"{labels.shape[0]} labels for {images.shape[0]} images")
    feats = images.reshape(images.shape[0], -1).astype(np.float64) / 127.5 - 1.0
    m = int(labels.max()) + 1 if num_classes is None else num_classes
    return LabeledDataset(feats, labels, m)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, labels.size) + labels.tobytes())


# ---------------------------------------------------------------------------
# partitioning


def largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    """Integer allocation of ``total`` proportional to ``weights`` that sums exactly to ``total``."""
    raw = np.asarray(weights, dtype=np.float64) * total
    base = np.floor(raw).astype(np.int64)
    short = total - int(base.sum())
    if short > 0:
        # stable sort keeps ties deterministic (lowest client id wins)
        order = np.argsort(-(raw - base), kind="stable")
        base[order[:short]] += 1
    return base


def _split(ds: LabeledDataset, spec: PartitionSpec, seed: int) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    k = spec.num_clients
    if spec.iid:
        perm = rng.permutation(len(ds))
        return [np.sort(part) for part in np.array_split(perm, k)]
    buckets: list[list[np.ndarray]] = [[] for _ in range(k)]
    for y in range(ds.num_classes):
        members = np.flatnonzero(ds.labels == y)
        if members.size == 0:
            continue
        members = rng.permutation(members)
        q = rng.dirichlet(np.full(k, spec.beta))
        sizes = largest_remainder(q, members.size)
        for cid, part in enumerate(np.split(members, np.cumsum(sizes)[:-1])):
            buckets[cid].append(part)
    return [np.sort(np.concatenate(b)) if b else np.zeros(0, dtype=np.int64) for b in buckets]


def dirichlet_partition(ds: LabeledDataset, spec: PartitionSpec, max_rerolls: int = 1000) -> list[ClientShard]:
    """Split ``ds`` across clients with per-class Dirichlet(beta) proportions.

    A draw leaving any client empty is re-rolled with seed + 1.
    """
    if spec.num_clients > len(ds):
        raise ValueError(f"{spec.num_clients} clients but only {len(ds)} examples")
    seed = spec.seed
    for _ in range(max_rerolls):
        parts = _split(ds, spec, seed)
        if all(p.size for p in parts):
            break
        seed += 1
    else:
        raise RuntimeError(f"could not give every client data after {max_rerolls} draws")
    return [
        ClientShard(cid, part.astype(np.int64), ds.class_counts(part))
        for cid, part in enumerate(parts)
    ]


def label_entropy(counts: np.ndarray) -> float:
    """Shannon entropy (nats) of a count vector's normalised distribution."""
    counts = np.asarray(counts, dtype=np.float64)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def perturb_label_stats(counts, noise_ratio: float, seed: int) -> np.ndarray:
    """Multiply every count by (1 + u), u ~ U[-noise_ratio, noise_ratio], and round."""
    if not 0 <= noise_ratio <= 1:
        raise ValueError("noise_ratio must lie in [0, 1]")
    counts = np.asarray(counts, dtype=np.int64)
    if noise_ratio == 0:
        return counts.copy()
    rng = np.random.default_rng(seed)
    u = rng.uniform(-noise_ratio, noise_ratio, size=counts.shape)
    return np.maximum(np.rint(counts * (1.0 + u)), 0).astype(np.int64)
