from __future__ import annotations

import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dplora.errors import NumericalError, ParameterError, ShapeError
from dplora.numerics import (
    Rng,
    frobenius_norm,
    gaussian_sample,
    linear_backward,
    linear_forward,
    matmul,
    read_matrix,
    write_matrix,
)


def loop_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            s = 0.0
            for k in range(a.shape[1]):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


def test_matmul_matches_triple_loop_exactly():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((5, 7)), rng.standard_normal((7, 3))
    assert np.array_equal(matmul(a, b), loop_matmul(a, b))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_matmul_exact_for_random_shapes(m, k, n, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((m, k)), rng.standard_normal((k, n))
    assert np.array_equal(matmul(a, b), loop_matmul(a, b))


def test_matmul_rejects_mismatched_shapes():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_rejects_non_finite_result():
    with pytest.raises(NumericalError):
        matmul(np.array([[1e308, 1e308]]), np.array([[1e308], [1e308]]))


def test_matmul_keeps_float32():
    a = np.ones((2, 2), dtype=np.float32)
    assert matmul(a, a).dtype == np.float32


def test_gaussian_sample_moments():
    x = gaussian_sample(Rng(1).generator(0), (1000, 1000), mean=0.0, std=3.0)
    assert abs(x.mean()) < 0.01
    assert abs(x.std() / 3.0 - 1.0) < 0.01


def test_gaussian_sample_zero_std_is_constant():
    x = gaussian_sample(Rng(1).generator(0), (3, 4), mean=2.5, std=0.0)
    assert np.all(x == 2.5)


@pytest.mark.parametrize("std", [-1.0, math.nan, math.inf])
def test_gaussian_sample_rejects_bad_std(std):
    with pytest.raises(ParameterError):
        gaussian_sample(Rng(1).generator(0), (2, 2), std=std)


def test_frobenius_norm_matches_direct_sum():
    m = np.random.default_rng(2).standard_normal((9, 4))
    total = 0.0
    for v in m.ravel():
        total += v * v
    assert frobenius_norm(m) == pytest.approx(math.sqrt(total), rel=1e-14)
    assert frobenius_norm(np.zeros((3, 3))) == 0.0


def test_linear_forward_matches_oracle():
    rng = np.random.default_rng(3)
    w, x, b = rng.standard_normal((4, 5)), rng.standard_normal((5, 6)), rng.standard_normal((4, 1))
    assert np.array_equal(linear_forward(x, w, b), loop_matmul(w, x) + b)


def test_linear_backward_finite_differences():
    rng = np.random.default_rng(4)
    w, x, b = rng.standard_normal((4, 4)), rng.standard_normal((4, 3)), rng.standard_normal((4, 1))
    target = rng.standard_normal((4, 3))

    def loss(w_, x_, b_):
        return 0.5 * float(np.sum((linear_forward(x_, w_, b_) - target) ** 2))

    grad_out = linear_forward(x, w, b) - target
    gw, gb, gx = linear_backward(grad_out, x, w)
    h = 1e-5
    for analytic, param, which in ((gw, w, 0), (gb, b, 1), (gx, x, 2)):
        for idx in np.ndindex(param.shape):
            plus, minus = param.copy(), param.copy()
            plus[idx] += h
            minus[idx] -= h
            args_p, args_m = [w, x, b], [w, x, b]
            slot = {0: 0, 1: 2, 2: 1}[which]
            args_p[slot], args_m[slot] = plus, minus
            fd = (loss(*args_p) - loss(*args_m)) / (2 * h)
            assert abs(fd - analytic[idx]) <= 1e-6 * max(1.0, abs(fd))


def test_rng_streams_are_reproducible_and_distinct():
    r = Rng(7)
    a = r.substream(1, 2).standard_normal(5)
    assert np.array_equal(a, Rng(7).substream(1, 2).standard_normal(5))
    assert not np.array_equal(a, r.substream(2, 1).standard_normal(5))
    assert not np.array_equal(a, Rng(8).substream(1, 2).standard_normal(5))


def test_matrix_serialization_round_trip():
    m = np.random.default_rng(5).standard_normal((3, 7))
    buf = io.BytesIO()
    write_matrix(buf, m)
    assert len(buf.getvalue()) == 16 + 8 * m.size
    buf.seek(0)
    back = read_matrix(buf)
    assert back.shape == m.shape and np.array_equal(back, m)
