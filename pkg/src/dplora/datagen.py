"""Synthetic classification data and partitioning across nodes."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParameterError, ShapeError
from .numerics import STREAM_DATA, STREAM_PARTITION, Rng, read_matrix, write_matrix

_HEADER = struct.Struct("<QQQ")


@dataclass(frozen=True)
class Dataset:
    """Row-major inputs (N x d) with integer labels in ``[0, num_classes)``."""

    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if self.inputs.ndim != 2 or self.labels.ndim != 1 or len(self.labels) != len(self.inputs):
            raise ShapeError(f"inputs {self.inputs.shape} and labels {self.labels.shape} do not match")
        if not np.all(np.isfinite(self.inputs)):
            raise ParameterError("inputs must be finite")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ParameterError("labels out of range")
        for arr in (self.inputs, self.labels):
            arr.flags.writeable = False

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, indices: np.ndarray) -> Dataset:
        return Dataset(self.inputs[indices], self.labels[indices], self.num_classes)


@dataclass(frozen=True)
class Partition:
    shards: list[Dataset]
    indices: list[np.ndarray]
    mode: str

    @property
    def sizes(self) -> list[int]:
        return [len(s) for s in self.shards]

    @property
    def weights(self) -> list[float]:
        total = sum(self.sizes)
        return [n / total for n in self.sizes]


def make_synthetic(
    seed: int,
    n_samples: int,
    dim: int,
    num_classes: int,
    margin: float,
    cluster_std: float = 1.0,
) -> Dataset:
    """Gaussian clusters around class means placed ``margin`` from the origin.

    Means are orthonormal directions (when ``num_classes <= dim``) scaled by
    ``margin``, so any two are ``margin * sqrt(2)`` apart.  Labels are balanced
    and shuffled.
    """
    if n_samples < 1 or dim < 1 or num_classes < 1:
        raise ParameterError("n_samples, dim and num_classes must be positive")
    if margin < 0 or cluster_std < 0:
        raise ParameterError("margin and cluster_std must be non-negative")
    rng = Rng(seed).generator(STREAM_DATA)
    raw = rng.standard_normal((dim, num_classes))
    if num_classes <= dim:
        directions, _ = np.linalg.qr(raw)
    else:
        directions = raw / np.linalg.norm(raw, axis=0, keepdims=True)
    means = margin * directions.T
    labels = rng.permutation(np.arange(n_samples) % num_classes)
    inputs = means[labels] + cluster_std * rng.standard_normal((n_samples, dim))
    return Dataset(inputs, labels.astype(np.int64), num_classes)


def partition(
    data: Dataset,
    k: int,
    mode: str = "even",
    seed: int = 0,
    alpha: float = 0.5,
    min_size: int = 1,
    max_tries: int = 1000,
) -> Partition:
    """Split ``data`` into ``k`` disjoint shards covering every sample.

    ``even`` shuffles then cuts contiguous blocks whose sizes differ by at
    most one.  ``dirichlet`` splits each class across nodes with proportions
    drawn from ``Dir(alpha)``, redrawing until every shard has ``min_size``
    samples.
    """
    n = len(data)
    if k < 1:
        raise ParameterError(f"k must be positive, got {k}")
    if k > n:
        raise ParameterError(f"cannot split {n} samples across {k} nodes")
    rng = Rng(seed).generator(STREAM_PARTITION)
    if mode == "even":
        order = rng.permutation(n)
        blocks = np.array_split(order, k)
    elif mode == "dirichlet":
        if not alpha > 0:
            raise ParameterError(f"dirichlet alpha must be positive, got {alpha}")
        if k * min_size > n:
            raise ParameterError(f"{n} samples cannot give {k} shards of at least {min_size}")
        for _ in range(max_tries):
            buckets: list[list[np.ndarray]] = [[] for _ in range(k)]
            for c in range(data.num_classes):
                members = rng.permutation(np.flatnonzero(data.labels == c))
                props = rng.dirichlet(np.full(k, alpha))
                cuts = (np.cumsum(props)[:-1] * len(members)).astype(int)
                for node, part in enumerate(np.split(members, cuts)):
                    buckets[node].append(part)
            blocks = [np.sort(np.concatenate(b)) for b in buckets]
            if min(len(b) for b in blocks) >= min_size:
                break
        else:
            raise ParameterError(f"no dirichlet draw gave every shard {min_size} samples in {max_tries} tries")
    else:
        raise ParameterError(f"unknown partition mode {mode!r}")
    blocks = [np.asarray(b, dtype=np.int64) for b in blocks]
    return Partition([data.subset(b) for b in blocks], blocks, mode)


def save_dataset(path: str | Path, data: Dataset) -> None:
    """Header (N, d, num_classes) as uint64, matrix-format inputs, int64 labels."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(len(data), data.dim, data.num_classes))
        write_matrix(fh, data.inputs)
        fh.write(np.ascontiguousarray(data.labels, dtype="<i8").tobytes())


def load_dataset(path: str | Path) -> Dataset:
    with open(path, "rb") as fh:
        n, d, classes = _HEADER.unpack(fh.read(_HEADER.size))
        inputs = read_matrix(fh)
        labels = np.frombuffer(fh.read(8 * n), dtype="<i8").astype(np.int64)
    if inputs.shape != (n, d) or len(labels) != n:
        raise ShapeError("dataset file is inconsistent with its header")
    return Dataset(inputs, labels, int(classes))
