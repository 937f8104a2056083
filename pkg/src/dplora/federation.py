"""Federated DP-LoRA rounds and the full-parameter FedAvg baseline.

Each round: the server broadcasts the global adapters, every node takes one
clipped, noised gradient step on a batch of its own shard, and the server
replaces the adapters with the ``rho``-weighted average of the uploads.
Node ``k`` in round ``t`` draws all of its randomness from the substream
``(seed, k, t)`` and uploads are summed in ascending node order, so results do
not depend on how node updates are scheduled.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .config import TrainConfig
from .datagen import Dataset, make_synthetic, partition
from .errors import AccountantInapplicable, ConfigError, ProtocolError
from .lora import (
    DenseModel,
    LoraAdapter,
    LoraModel,
    dense_loss_and_gradients,
    evaluate_dense,
    evaluate_lora,
    init_lora_model,
    lora_gradients,
    lora_param_count,
)
from .numerics import STREAM_INIT, Rng, gaussian_sample
from .privacy import (
    PrivacyParams,
    PrivacySpent,
    clip_global,
    clip_gradient,
    gaussian_mechanism,
    moments_epsilon,
    rho_bar,
    sequential_epsilon,
    sigma_calibrate_formula,
    sigma_calibrate_numeric,
)

log = logging.getLogger(__name__)

LOCAL_STEPS_NOTE = "local_steps > 1 takes several noised steps per round; accounting charges each step"


@dataclass
class NodeState:
    node_id: int
    shard: Dataset
    rho: float
    local: LoraModel | DenseModel | None = None

    @property
    def n_k(self) -> int:
        return len(self.shard)


@dataclass(frozen=True)
class RoundRecord:
    t: int
    loss: float
    acc: float
    eps_spent: float | None
    delta: float | None
    accountant: str
    params_up: tuple[int, ...]
    bytes_up: int
    bytes_down: int

    def to_json(self) -> str:
        d = asdict(self)
        d["params_up"] = list(self.params_up)
        order = ("t", "loss", "acc", "eps_spent", "delta", "bytes_up", "bytes_down", "params_up", "accountant")
        return json.dumps({k: d[k] for k in order})

    @classmethod
    def from_json(cls, line: str) -> RoundRecord:
        d = json.loads(line)
        d["params_up"] = tuple(d["params_up"])
        return cls(**d)


@dataclass
class RunResult:
    records: list[RoundRecord]
    model: LoraModel | DenseModel
    nodes: list[NodeState]
    sigma: float
    q: float
    rho_bar: float
    weights: list[float]
    warnings: list[str] = field(default_factory=list)


def frozen_digest(model: LoraModel) -> str:
    """SHA-256 over every frozen base matrix and bias."""
    h = hashlib.sha256()
    for layer in model.layers:
        h.update(np.ascontiguousarray(layer.base).tobytes())
        h.update(np.ascontiguousarray(layer.bias).tobytes())
    return h.hexdigest()


def flatten_adapters(adapters: Sequence[LoraAdapter]) -> list[np.ndarray]:
    out = []
    for ad in adapters:
        out.extend((ad.a, ad.b))
    return out


def unflatten_adapters(mats: Sequence[np.ndarray]) -> list[LoraAdapter]:
    return [LoraAdapter(mats[i], mats[i + 1]) for i in range(0, len(mats), 2)]


def broadcast(global_model: LoraModel | DenseModel, nodes: Sequence[NodeState]) -> None:
    """Give every node its own copy of the global trainable parameters."""
    for node in nodes:
        if node.local is not None:
            if type(node.local) is not type(global_model):
                raise ProtocolError(f"node {node.node_id} holds a {type(node.local).__name__}")
            if isinstance(global_model, LoraModel):
                mine = [a.a.shape for a in node.local.adapters]
                theirs = [a.a.shape for a in global_model.adapters]
            else:
                mine = [w.shape for w in node.local.weights]
                theirs = [w.shape for w in global_model.weights]
            if mine != theirs:
                raise ProtocolError(f"node {node.node_id} parameter shapes {mine} != global {theirs}")
        node.local = global_model.copy()


def sample_batch(rng: np.random.Generator, n_k: int, batch_size: int) -> np.ndarray:
    """``batch_size`` distinct indices drawn uniformly from ``range(n_k)``."""
    return rng.choice(n_k, size=batch_size, replace=False)


def _batch(node: NodeState, rng: np.random.Generator, batch_size: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    if node.n_k < batch_size:
        raise ConfigError("batch", f"node {node.node_id} has {node.n_k} samples, fewer than batch {batch_size}")
    idx = sample_batch(rng, node.n_k, batch_size)
    x = np.ascontiguousarray(node.shard.inputs[idx].T, dtype=dtype)
    return x, node.shard.labels[idx]


def node_update(
    node: NodeState,
    rng: np.random.Generator,
    *,
    batch_size: int,
    learning_rate: float,
    clip: float,
    sigma: float,
    clip_mode: str = "per_matrix",
    noise_target: str = "gradient",
    local_steps: int = 1,
) -> list[LoraAdapter]:
    """One local round on ``node.local``; returns (and stores) the new adapters.

    Per step: sample a batch, take the LoRA gradients, clip each ``g_A`` and
    ``g_B`` to norm ``clip`` (or all of them jointly for ``clip_mode="global"``),
    add ``N(0, sigma^2 clip^2)`` noise and descend with ``learning_rate``.
    With ``noise_target="weights"`` the step is taken on clipped gradients and
    ``N(0, sigma^2)`` noise is added to the updated factors instead.
    """
    model = node.local
    if not isinstance(model, LoraModel):
        raise ProtocolError(f"node {node.node_id} has no LoRA model; broadcast first")
    dtype = model.layers[0].adapter.a.dtype
    for _ in range(local_steps):
        x, y = _batch(node, rng, batch_size, dtype)
        grads = [g for pair in lora_gradients(model, x, y) for g in pair]
        if clip_mode == "per_matrix":
            grads = [clip_gradient(g, clip) for g in grads]
        elif clip_mode == "global":
            grads = clip_global(grads, clip)
        else:
            raise ConfigError("clip_mode", f"unknown clip mode {clip_mode!r}")
        if noise_target == "gradient":
            grads = [gaussian_mechanism(g, sigma, clip, rng) for g in grads]
        params = [p - learning_rate * g for p, g in zip(flatten_adapters(model.adapters), grads)]
        if noise_target == "weights" and sigma > 0:
            params = [p + gaussian_sample(rng, p.shape, 0.0, sigma).astype(p.dtype) for p in params]
        elif noise_target not in ("gradient", "weights"):
            raise ConfigError("noise_target", f"unknown noise target {noise_target!r}")
        model = model.with_adapters(unflatten_adapters(params))
    node.local = model
    return model.adapters


def aggregate(uploads: Sequence[Sequence[np.ndarray]], weights: Sequence[float]) -> list[np.ndarray]:
    """Weighted sum ``sum_k rho_k * upload_k`` of each parameter, node order ascending."""
    if len(uploads) == 0 or len(uploads) != len(weights):
        raise ProtocolError(f"{len(uploads)} uploads for {len(weights)} weights")
    w = [float(v) for v in weights]
    if any(v < 0 or not math.isfinite(v) for v in w) or abs(math.fsum(w) - 1.0) > 1e-12:
        raise ProtocolError(f"aggregation weights must lie on the simplex, got {w}")
    shapes = [m.shape for m in uploads[0]]
    for k, up in enumerate(uploads):
        if [m.shape for m in up] != shapes:
            raise ProtocolError(f"upload {k} shapes {[m.shape for m in up]} != {shapes}")
    out = []
    for i in range(len(shapes)):
        acc = w[0] * uploads[0][i]
        for k in range(1, len(uploads)):
            acc = acc + w[k] * uploads[k][i]
        out.append(acc)
    return out


def _run_nodes(nodes: Sequence[NodeState], threads: int, fn: Callable[[NodeState], object]) -> list:
    if threads <= 1 or len(nodes) == 1:
        return [fn(node) for node in nodes]
    with ThreadPoolExecutor(max_workers=min(threads, len(nodes))) as pool:
        return list(pool.map(fn, nodes))


def resolve_sigma(cfg: TrainConfig, q: float, rb: float) -> float:
    """Explicit sigma, or the calibration of the target ``(epsilon, delta)``."""
    if cfg.sigma is not None:
        return cfg.sigma
    steps = cfg.rounds * cfg.local_steps
    if cfg.calibration == "numeric":
        return sigma_calibrate_numeric(cfg.epsilon, cfg.delta, q, steps, rb)
    p = PrivacyParams(cfg.delta, q, steps, epsilon=cfg.epsilon, clip_c=cfg.clip, rho_bar=rb, c2=cfg.c2, c1=cfg.c1)
    return sigma_calibrate_formula(p, cfg.calibration)


def _prepare(cfg: TrainConfig, dataset: Dataset | None):
    data = dataset if dataset is not None else make_synthetic(
        cfg.seed, cfg.n_samples, cfg.width, cfg.classes, cfg.margin, cfg.cluster_std
    )
    if data.dim != cfg.width:
        raise ConfigError("width", f"data has {data.dim} features but width is {cfg.width}")
    if data.num_classes > cfg.classes:
        raise ConfigError("classes", f"data has {data.num_classes} classes, model head has {cfg.classes}")
    part = partition(data, cfg.nodes, cfg.partition, seed=cfg.seed, alpha=cfg.dirichlet_alpha, min_size=cfg.batch)
    if min(part.sizes) < cfg.batch:
        raise ConfigError("batch", f"smallest shard has {min(part.sizes)} samples, fewer than batch {cfg.batch}")
    weights = list(cfg.weights) if cfg.weights is not None else part.weights
    nodes = [NodeState(k, shard, weights[k]) for k, shard in enumerate(part.shards)]
    rng = Rng(cfg.seed)
    model = init_lora_model(
        rng.generator(STREAM_INIT), cfg.layers, cfg.width, cfg.rank, cfg.classes, scale=cfg.lora_scale
    )
    if cfg.dtype != "float64":
        model = _cast_model(model, cfg.np_dtype)
    return data, nodes, weights, rng, model


def _cast_model(model: LoraModel, dtype) -> LoraModel:
    from .lora import LoraLayer

    layers = [
        LoraLayer(
            layer.base.astype(dtype),
            LoraAdapter(layer.adapter.a.astype(dtype), layer.adapter.b.astype(dtype)),
            layer.bias.astype(dtype),
        )
        for layer in model.layers
    ]
    return LoraModel(layers, model.num_classes, model.scale)


def _accountant(cfg: TrainConfig, sigma: float, q: float, rb: float, warnings: list[str]):
    total_steps = cfg.rounds * cfg.local_steps
    if cfg.accountant == "sequential":
        if sigma <= 0:
            warnings.append("sigma = 0: no finite privacy guarantee")
            return lambda steps: None
        return lambda steps: sequential_epsilon(sigma, cfg.delta, total_steps, steps)
    try:
        p = PrivacyParams(cfg.delta, q, total_steps, sigma=sigma, clip_c=cfg.clip, rho_bar=rb, c2=cfg.c2, c1=cfg.c1)
        final = moments_epsilon(p)
    except AccountantInapplicable as exc:
        warnings.append(f"moments accountant inapplicable: {exc}")
        return lambda steps: None
    warnings.extend(w for w in final.warnings if w not in warnings)
    return lambda steps: moments_epsilon(p, steps)


def run_federated(cfg: TrainConfig, dataset: Dataset | None = None, threads: int | None = None) -> RunResult:
    """Train the adapters for ``cfg.rounds`` rounds and record every round."""
    data, nodes, weights, rng, global_model = _prepare(cfg, dataset)
    rb = rho_bar(weights)
    q = cfg.batch / min(node.n_k for node in nodes)
    sigma = resolve_sigma(cfg, q, rb)
    warnings: list[str] = []
    if cfg.local_steps > 1:
        warnings.append(LOCAL_STEPS_NOTE)
    account = _accountant(cfg, sigma, q, rb, warnings)
    per_node = lora_param_count(cfg.layers, cfg.width, cfg.rank)
    threads = cfg.threads if threads is None else threads
    records = []
    for t in range(1, cfg.rounds + 1):
        try:
            broadcast(global_model, nodes)

            def work(node: NodeState, t=t):
                return node_update(
                    node,
                    rng.substream(node.node_id, t),
                    batch_size=cfg.batch,
                    learning_rate=cfg.learning_rate,
                    clip=cfg.clip,
                    sigma=sigma,
                    clip_mode=cfg.clip_mode,
                    noise_target=cfg.noise_target,
                    local_steps=cfg.local_steps,
                )

            uploads = [flatten_adapters(ads) for ads in _run_nodes(nodes, threads, work)]
            global_model = global_model.with_adapters(unflatten_adapters(aggregate(uploads, weights)))
        except (ProtocolError, ConfigError):
            raise
        except Exception as exc:
            raise RuntimeError(f"round {t} failed: {exc}") from exc
        loss, acc = evaluate_lora(global_model, data.inputs, data.labels)
        spent: PrivacySpent | None = account(t * cfg.local_steps)
        params_up = tuple(per_node for _ in nodes)
        records.append(
            RoundRecord(
                t=t,
                loss=loss,
                acc=acc,
                eps_spent=None if spent is None else spent.epsilon,
                delta=None if spent is None else spent.delta,
                accountant=cfg.accountant,
                params_up=params_up,
                bytes_up=sum(params_up) * cfg.bytes_per_param,
                bytes_down=len(nodes) * per_node * cfg.bytes_per_param,
            )
        )
        log.debug("round %d loss=%.4f acc=%.4f", t, loss, acc)
    broadcast(global_model, nodes)
    return RunResult(records, global_model, nodes, sigma, q, rb, weights, warnings)


def run_fedavg_baseline(cfg: TrainConfig, dataset: Dataset | None = None, threads: int | None = None) -> RunResult:
    """Full-parameter FedAvg (every weight and bias, no clipping or noise)."""
    data, nodes, weights, rng, lora_model = _prepare(cfg, dataset)
    global_model = DenseModel.from_lora(lora_model)
    per_node = global_model.param_count()
    threads = cfg.threads if threads is None else threads
    dtype = global_model.weights[0].dtype

    def work(node: NodeState, t: int) -> list[np.ndarray]:
        stream = rng.substream(node.node_id, t)
        model = node.local
        for _ in range(cfg.local_steps):
            x, y = _batch(node, stream, cfg.batch, dtype)
            _, grads = dense_loss_and_gradients(model, x, y)
            model = DenseModel(
                [w - cfg.learning_rate * g for w, (g, _) in zip(model.weights, grads)],
                [b - cfg.learning_rate * g for b, (_, g) in zip(model.biases, grads)],
                model.num_classes,
            )
        node.local = model
        return [*model.weights, *model.biases]

    records = []
    for t in range(1, cfg.rounds + 1):
        broadcast(global_model, nodes)
        uploads = _run_nodes(nodes, threads, lambda node, t=t: work(node, t))
        merged = aggregate(uploads, weights)
        depth = global_model.depth
        global_model = DenseModel(merged[:depth], merged[depth:], global_model.num_classes)
        loss, acc = evaluate_dense(global_model, data.inputs, data.labels)
        params_up = tuple(per_node for _ in nodes)
        records.append(
            RoundRecord(
                t=t,
                loss=loss,
                acc=acc,
                eps_spent=None,
                delta=None,
                accountant="none",
                params_up=params_up,
                bytes_up=sum(params_up) * cfg.bytes_per_param,
                bytes_down=len(nodes) * per_node * cfg.bytes_per_param,
            )
        )
    broadcast(global_model, nodes)
    q = cfg.batch / min(node.n_k for node in nodes)
    return RunResult(records, global_model, nodes, 0.0, q, rho_bar(weights), weights, ["baseline: no privacy"])
