from __future__ import annotations

import math

import numpy as np
import pytest
from oracles import centralized_lora_sgd, lora_sgd_step

from dplora.config import parse_config
from dplora.datagen import make_synthetic, partition
from dplora.errors import ConfigError, ProtocolError
from dplora.federation import (
    NodeState,
    RoundRecord,
    aggregate,
    broadcast,
    flatten_adapters,
    frozen_digest,
    node_update,
    run_federated,
    run_fedavg_baseline,
)
from dplora.ledger import dense_upload_count
from dplora.lora import init_lora_model, lora_param_count
from dplora.numerics import STREAM_INIT, Rng


def small_cfg(**overrides):
    base = dict(width=12, rank=3, layers=2, classes=3, n_samples=600, nodes=3, rounds=5, margin=4.0)
    base.update(overrides)
    return parse_config(None, base)


def single_node(width=6, rank=2, seed=0):
    data = make_synthetic(seed, 40, width, 3, 3.0)
    node = NodeState(0, data, 1.0)
    model = init_lora_model(Rng(seed).generator(STREAM_INIT), 2, width, rank, 3)
    return node, model


def test_broadcast_copies_and_checks_shapes():
    node, model = single_node()
    broadcast(model, [node])
    assert node.local is not model
    node.local.adapters[0].a[0, 0] += 1.0
    assert node.local.adapters[0].a[0, 0] != model.adapters[0].a[0, 0]
    other = init_lora_model(Rng(1).generator(STREAM_INIT), 2, 6, 3, 3)
    with pytest.raises(ProtocolError):
        broadcast(other, [node])


def test_single_node_round_trip_is_bitwise():
    node, model = single_node()
    broadcast(model, [node])
    out = aggregate([flatten_adapters(node.local.adapters)], [1.0])
    assert all(np.array_equal(a, b) for a, b in zip(out, flatten_adapters(model.adapters)))


def test_node_update_without_privacy_is_plain_sgd():
    node, model = single_node()
    broadcast(model, [node])
    new = node_update(node, Rng(5).substream(0, 1), batch_size=8, learning_rate=0.1, clip=math.inf, sigma=0.0)
    stream = Rng(5).substream(0, 1)
    idx = stream.choice(node.n_k, size=8, replace=False)
    expected = lora_sgd_step(
        [np.array(layer.base) for layer in model.layers],
        [np.array(layer.bias) for layer in model.layers],
        [(ad.a, ad.b) for ad in model.adapters],
        model.scale,
        3,
        node.shard.inputs[idx].T,
        node.shard.labels[idx],
        0.1,
    )
    for ad, (a, b) in zip(new, expected):
        assert np.allclose(ad.a, a, rtol=0, atol=1e-13) and np.allclose(ad.b, b, rtol=0, atol=1e-13)


def test_node_update_rejects_small_shard():
    node, model = single_node()
    broadcast(model, [node])
    with pytest.raises(ConfigError):
        node_update(node, Rng(0).substream(0, 1), batch_size=100, learning_rate=0.1, clip=1.0, sigma=0.0)


def test_aggregate_matches_weighted_sum():
    rng = np.random.default_rng(0)
    uploads = [[rng.standard_normal((4, 2)), rng.standard_normal((2, 4))] for _ in range(4)]
    w = [0.1, 0.2, 0.3, 0.4]
    out = aggregate(uploads, w)
    for i in range(2):
        acc = w[0] * uploads[0][i]
        for k in range(1, 4):
            acc = acc + w[k] * uploads[k][i]
        assert np.array_equal(out[i], acc)
        lo = np.min([u[i] for u in uploads], axis=0)
        hi = np.max([u[i] for u in uploads], axis=0)
        assert np.all(out[i] >= lo - 1e-12) and np.all(out[i] <= hi + 1e-12)


def test_aggregate_rejects_bad_weights_and_shapes():
    up = [[np.ones((2, 2))], [np.ones((2, 2))]]
    with pytest.raises(ProtocolError):
        aggregate(up, [0.5, 0.6])
    with pytest.raises(ProtocolError):
        aggregate(up, [1.0])
    with pytest.raises(ProtocolError):
        aggregate([[np.ones((2, 2))], [np.ones((3, 2))]], [0.5, 0.5])


def test_table9_defaults_change_adapters():
    cfg = small_cfg(rounds=3, batch=8, sigma=2.0, learning_rate=5e-4, clip=10.0)
    result = run_federated(cfg)
    init = init_lora_model(Rng(cfg.seed).generator(STREAM_INIT), cfg.layers, cfg.width, cfg.rank, cfg.classes)
    assert not np.array_equal(result.model.adapters[0].b, init.adapters[0].b)
    assert frozen_digest(result.model) == frozen_digest(init)
    assert all(frozen_digest(node.local) == frozen_digest(init) for node in result.nodes)


def test_records_and_accounting():
    cfg = small_cfg(rounds=4, n_samples=1500, sigma=2.0)
    result = run_federated(cfg)
    assert [r.t for r in result.records] == [1, 2, 3, 4]
    per = lora_param_count(cfg.layers, cfg.width, cfg.rank)
    for r in result.records:
        assert r.params_up == (per,) * cfg.nodes
        assert r.bytes_up == per * cfg.nodes * cfg.bytes_per_param
        assert RoundRecord.from_json(r.to_json()) == r
    eps = [r.eps_spent for r in result.records]
    assert all(e is not None for e in eps) and eps == sorted(eps)
    assert result.rho_bar == pytest.approx(1 / math.sqrt(3), abs=1e-12)


def test_inapplicable_accountant_is_recorded_not_fatal():
    cfg = small_cfg(rounds=2, sigma=0.5)
    result = run_federated(cfg)
    assert all(r.eps_spent is None for r in result.records)
    assert any("inapplicable" in w for w in result.warnings)


def test_sequential_accountant():
    cfg = small_cfg(rounds=3, sigma=2.0, accountant="sequential")
    eps = [r.eps_spent for r in run_federated(cfg).records]
    assert eps[1] == pytest.approx(2 * eps[0]) and eps[2] == pytest.approx(3 * eps[0])


def test_deterministic_across_threads():
    cfg = small_cfg(rounds=4, sigma=1.5)
    a = [r.to_json() for r in run_federated(cfg, threads=1).records]
    b = [r.to_json() for r in run_federated(cfg, threads=3).records]
    assert a == b
    c = [r.to_json() for r in run_federated(small_cfg(rounds=4, sigma=1.5, seed=1)).records]
    assert a != c


def test_epsilon_target_calibrates_sigma():
    cfg = small_cfg(rounds=3, n_samples=3000, sigma=None, epsilon=4.0)
    result = run_federated(cfg)
    assert result.sigma > 1
    assert result.records[-1].eps_spent <= 4.0


def test_centralized_equivalence_short():
    cfg = small_cfg(nodes=1, rounds=10, sigma=0.0, clip=math.inf, learning_rate=0.05)
    data = make_synthetic(cfg.seed, cfg.n_samples, cfg.width, cfg.classes, cfg.margin)
    result = run_federated(cfg, data)
    init = init_lora_model(Rng(cfg.seed).generator(STREAM_INIT), cfg.layers, cfg.width, cfg.rank, cfg.classes)
    expected = centralized_lora_sgd(cfg, data, init, cfg.rounds)
    for ad, (a, b) in zip(result.model.adapters, expected):
        assert np.max(np.abs(ad.a - a)) < 1e-12 and np.max(np.abs(ad.b - b)) < 1e-12


def test_fedavg_baseline_uploads_dense_parameters():
    cfg = small_cfg(rounds=3, sigma=2.0)
    result = run_fedavg_baseline(cfg)
    per = dense_upload_count(cfg.layers, cfg.width)
    assert all(r.params_up == (per,) * cfg.nodes for r in result.records)
    assert all(r.eps_spent is None and r.accountant == "none" for r in result.records)
    trained = run_fedavg_baseline(small_cfg(rounds=20, sigma=2.0, learning_rate=0.05)).records
    assert trained[-1].loss < trained[0].loss


def test_weights_noise_target_and_global_clip_run():
    for extra in (dict(noise_target="weights"), dict(clip_mode="global"), dict(local_steps=2)):
        result = run_federated(small_cfg(rounds=2, sigma=1.5, **extra))
        assert len(result.records) == 2


def test_dirichlet_partition_run():
    cfg = small_cfg(rounds=2, partition="dirichlet", n_samples=900)
    result = run_federated(cfg)
    data = make_synthetic(cfg.seed, cfg.n_samples, cfg.width, cfg.classes, cfg.margin)
    part = partition(data, cfg.nodes, "dirichlet", seed=cfg.seed, alpha=cfg.dirichlet_alpha, min_size=cfg.batch)
    assert result.weights == pytest.approx(part.weights)
