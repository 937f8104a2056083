"""Dense linear algebra, seeded sampling and linear-layer passes.

Matrices are plain 2-D numpy arrays (float64 unless a run opts into float32).
Products and norms go through small numba kernels that accumulate in a fixed
order, so results are bitwise reproducible across runs, thread counts and
memory layouts, and agree exactly with a naive triple loop.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO

import numba
import numpy as np

from .errors import NumericalError, ParameterError, ShapeError

# Stream purposes for Rng.generator(); the first element of every spawn key.
STREAM_DATA = 0
STREAM_PARTITION = 1
STREAM_INIT = 2
STREAM_NODE = 3
STREAM_AUX = 4

_DIMS = struct.Struct("<QQ")


@numba.njit(nogil=True, cache=True)
def _matmul_kernel(a, b, out):
    n, m = a.shape
    p = b.shape[1]
    for i in range(n):
        for k in range(m):
            aik = a[i, k]
            for j in range(p):
                out[i, j] += aik * b[k, j]
    return out


@numba.njit(nogil=True, cache=True)
def _sum_squares_kernel(flat):
    acc = 0.0
    for v in flat:
        acc += v * v
    return acc


def check_finite(m: np.ndarray, what: str = "result") -> np.ndarray:
    if not np.all(np.isfinite(m)):
        raise NumericalError(f"{what} contains non-finite entries")
    return m


def as_matrix(x, dtype=None) -> np.ndarray:
    """Coerce ``x`` to a finite 2-D float array with positive dimensions."""
    m = np.asarray(x, dtype=dtype if dtype is not None else np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={m.ndim}")
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError(f"matrix dimensions must be positive, got {m.shape}")
    return check_finite(m, "matrix")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product ``a @ b``.

    Each output entry is accumulated over the inner index in ascending order
    with separate multiply and add roundings, which is what makes the result
    independent of BLAS blocking and FMA contraction.
    """
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    dtype = np.result_type(a.dtype, b.dtype, np.float32)
    out = np.zeros((a.shape[0], b.shape[1]), dtype=dtype)
    # row-major operands keep the inner loop unit-stride; values are unaffected
    _matmul_kernel(np.ascontiguousarray(a, dtype=dtype), np.ascontiguousarray(b, dtype=dtype), out)
    return check_finite(out, "matmul")


def frobenius_norm(m: np.ndarray) -> float:
    """Euclidean norm of the flattened matrix."""
    flat = np.ascontiguousarray(m, dtype=np.float64).ravel()
    return float(np.sqrt(_sum_squares_kernel(flat)))


def gaussian_sample(
    rng: np.random.Generator,
    shape: tuple[int, int],
    mean: float = 0.0,
    std: float = 1.0,
) -> np.ndarray:
    """I.i.d. normal matrix; ``std == 0`` gives the constant ``mean`` matrix."""
    if not np.isfinite(std) or std < 0:
        raise ParameterError(f"std must be finite and non-negative, got {std}")
    if std == 0:
        return np.full(shape, float(mean))
    return rng.normal(loc=mean, scale=std, size=shape)


def linear_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``w @ x + b`` with samples as columns of ``x``; ``b`` is a column or full matrix."""
    if b.shape[0] != w.shape[0] or b.shape[1] not in (1, x.shape[1]):
        raise ShapeError(f"bias {b.shape} does not conform to output ({w.shape[0]}, {x.shape[1]})")
    return check_finite(matmul(w, x) + b, "linear_forward")


def linear_backward(
    grad_out: np.ndarray, x: np.ndarray, w: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of a linear layer given the upstream gradient.

    Returns ``(grad_w, grad_b, grad_x)`` where ``grad_b`` is summed over the
    batch (columns) and kept as a column vector.
    """
    if grad_out.shape[0] != w.shape[0] or grad_out.shape[1] != x.shape[1] or w.shape[1] != x.shape[0]:
        raise ShapeError(
            f"linear_backward shapes do not conform: grad_out {grad_out.shape}, x {x.shape}, w {w.shape}"
        )
    grad_w = matmul(grad_out, x.T)
    grad_b = grad_out.sum(axis=1, keepdims=True)
    grad_x = matmul(w.T, grad_out)
    return grad_w, grad_b, grad_x


@dataclass(frozen=True)
class Rng:
    """Splittable seed: every stream is a pure function of the seed and a key."""

    seed: int

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2**64:
            raise ParameterError(f"seed must be a 64-bit unsigned integer, got {self.seed}")

    def generator(self, *key: int) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=int(self.seed), spawn_key=tuple(int(k) for k in key))
        return np.random.Generator(np.random.PCG64(ss))

    def substream(self, node: int, round_index: int) -> np.random.Generator:
        """Stream owned by one node for one round."""
        return self.generator(STREAM_NODE, node, round_index)


def write_matrix(fh: BinaryIO, m: np.ndarray) -> None:
    """Little-endian float64, row-major, preceded by two uint64 dims."""
    m = np.asarray(m)
    if m.ndim != 2:
        raise ShapeError(f"can only serialize 2-D matrices, got ndim={m.ndim}")
    fh.write(_DIMS.pack(*m.shape))
    fh.write(np.ascontiguousarray(m, dtype="<f8").tobytes(order="C"))


def read_matrix(fh: BinaryIO) -> np.ndarray:
    header = fh.read(_DIMS.size)
    if len(header) != _DIMS.size:
        raise ShapeError("truncated matrix header")
    rows, cols = _DIMS.unpack(header)
    payload = fh.read(8 * rows * cols)
    if len(payload) != 8 * rows * cols:
        raise ShapeError(f"truncated matrix payload for shape ({rows}, {cols})")
    return np.frombuffer(payload, dtype="<f8").reshape(rows, cols).astype(np.float64)
