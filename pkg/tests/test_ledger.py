from __future__ import annotations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from dplora.errors import ParameterError
from dplora.ledger import (
    ModelShape,
    attention_block_count,
    attention_param_count,
    crossover_rank,
    dense_matrix_count,
    lora_matrix_count,
    lora_overhead,
    overhead_summary,
    reduction_ratio,
    rank_sweep_audit,
)


def test_attention_counts():
    assert attention_block_count(4096, 3) == 50_331_648
    assert attention_param_count(ModelShape(32, 4096, 3)) == 1_610_612_736
    assert attention_param_count(ModelShape(12, 768, 3, dense_total=124_000_000)) == 21_233_664


def test_per_matrix_counts():
    assert dense_matrix_count(4096) == 16_777_216
    assert lora_matrix_count(4096, 256) == 2_097_152


def test_worked_example():
    assert lora_overhead(50, 5, 1, 256, 4096).total == 2 * 5 * 50 * 4096 * 256 == 524_288_000


def test_reported_ratios():
    assert reduction_ratio(2.43e9, 6.7e9) == pytest.approx(36.27, abs=0.01)
    assert reduction_ratio(1.35e9, 6.7e9) == pytest.approx(20.15, abs=0.01)
    for row in rank_sweep_audit():
        assert row["recomputed_ratio_pct"] == pytest.approx(row["reported_ratio_pct"], abs=0.01)


def test_ratio_rejects_bad_input():
    with pytest.raises(ParameterError):
        reduction_ratio(2.0, 1.0)
    with pytest.raises(ParameterError):
        lora_overhead(0, 5, 1, 1, 4)


@given(st.integers(1, 4096), st.integers(1, 64))
def test_crossover(n, l):
    r_star = crossover_rank(n)
    for r in {max(1, int(r_star) - 1), int(r_star) + 1}:
        rep = lora_overhead(1, 1, l, r, n)
        assert (rep.total < rep.baseline_total) == (r < r_star)


@given(st.integers(1, 100), st.integers(1, 10), st.integers(1, 8), st.integers(1, 64), st.integers(64, 512))
def test_overhead_monotone_in_rank(t, k, l, r, n):
    a, b = lora_overhead(t, k, l, r, n), lora_overhead(t, k, l, r + 1, n)
    assert b.total > a.total
    assert a.total == t * k * l * r * 2 * n


def test_summary_gives_both_readings():
    s = overhead_summary(32, 4096, 256, nodes=5, rounds=50, proj=3)
    assert s["worked_example_without_L"] == 524_288_000
    assert s["worked_example_with_L"] == 96 * 524_288_000
