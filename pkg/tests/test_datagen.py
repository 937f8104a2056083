from __future__ import annotations

import numpy as np
import pytest

from dplora.datagen import load_dataset, make_synthetic, partition, save_dataset
from dplora.errors import ParameterError


def test_large_margin_is_linearly_separable():
    data = make_synthetic(0, 600, 8, 3, margin=10.0, cluster_std=1.0)
    # least-squares one-vs-rest probe
    x = np.hstack([data.inputs, np.ones((len(data), 1))])
    y = np.eye(3)[data.labels]
    w, *_ = np.linalg.lstsq(x, y, rcond=None)
    assert np.mean((x @ w).argmax(axis=1) == data.labels) == 1.0


def test_synthetic_is_seeded_and_balanced():
    a = make_synthetic(3, 300, 5, 3, 4.0)
    b = make_synthetic(3, 300, 5, 3, 4.0)
    assert np.array_equal(a.inputs, b.inputs) and np.array_equal(a.labels, b.labels)
    assert np.bincount(a.labels).tolist() == [100, 100, 100]
    assert not np.array_equal(a.inputs, make_synthetic(4, 300, 5, 3, 4.0).inputs)


def test_dataset_is_read_only():
    data = make_synthetic(0, 10, 3, 2, 1.0)
    with pytest.raises(ValueError):
        data.inputs[0, 0] = 1.0


@pytest.mark.parametrize("mode", ["even", "dirichlet"])
def test_partition_is_disjoint_cover(mode):
    data = make_synthetic(1, 1000, 4, 3, 5.0)
    part = partition(data, 5, mode, seed=7, alpha=0.5, min_size=8)
    all_idx = np.concatenate(part.indices)
    assert sum(part.sizes) == len(data)
    assert len(set(all_idx.tolist())) == len(data)
    assert sum(part.weights) == pytest.approx(1.0, abs=1e-12)
    for shard, idx in zip(part.shards, part.indices):
        assert np.array_equal(shard.inputs, data.inputs[idx])
    if mode == "even":
        assert max(part.sizes) - min(part.sizes) <= 1
    else:
        assert min(part.sizes) >= 8


def test_partition_rejects_too_many_nodes():
    data = make_synthetic(1, 4, 2, 2, 1.0)
    with pytest.raises(ParameterError):
        partition(data, 5)
    with pytest.raises(ParameterError):
        partition(data, 2, "round-robin")


def test_dataset_round_trip(tmp_path):
    data = make_synthetic(2, 50, 6, 4, 3.0)
    save_dataset(tmp_path / "d.bin", data)
    back = load_dataset(tmp_path / "d.bin")
    assert back.num_classes == 4
    assert np.array_equal(back.inputs, data.inputs) and np.array_equal(back.labels, data.labels)
