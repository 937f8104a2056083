"""Independent reference implementations used by the tests.

Plain numpy (BLAS products, no package kernels), written from the model
definition rather than from the package code.
"""

from __future__ import annotations

import numpy as np

from dplora.config import TrainConfig
from dplora.datagen import Dataset
from dplora.federation import sample_batch
from dplora.lora import LoraModel
from dplora.numerics import STREAM_PARTITION, Rng


def lora_sgd_step(weights, biases, adapters, scale, num_classes, x, y, lr):
    """One plain (unclipped, noiseless) SGD step on the adapters; returns new adapters."""
    hs, bhs = [x], []
    h = x
    depth = len(weights)
    for i in range(depth):
        a, b = adapters[i]
        bh = b @ h
        z = weights[i] @ h + scale * (a @ bh) + biases[i]
        bhs.append(bh)
        h = np.tanh(z) if i < depth - 1 else z
        hs.append(h)
    logits = h[:num_classes]
    p = np.exp(logits - logits.max(axis=0))
    p /= p.sum(axis=0)
    g = np.zeros_like(h)
    g[:num_classes] = p
    g[y, np.arange(x.shape[1])] -= 1.0
    g /= x.shape[1]
    new = [None] * depth
    for i in range(depth - 1, -1, -1):
        a, b = adapters[i]
        ga = scale * g @ bhs[i].T
        gb = scale * (a.T @ g) @ hs[i].T
        new[i] = (a - lr * ga, b - lr * gb)
        if i > 0:
            g = ((weights[i] + scale * a @ b).T @ g) * (1.0 - hs[i] ** 2)
    return new


def centralized_lora_sgd(cfg: TrainConfig, data: Dataset, init: LoraModel, rounds: int):
    """Single-machine LoRA SGD with the simulator's shard order and batch schedule."""
    order = Rng(cfg.seed).generator(STREAM_PARTITION).permutation(len(data))
    inputs, labels = data.inputs[order], data.labels[order]
    weights = [np.array(layer.base) for layer in init.layers]
    biases = [np.array(layer.bias) for layer in init.layers]
    adapters = [(ad.a.copy(), ad.b.copy()) for ad in init.adapters]
    rng = Rng(cfg.seed)
    for t in range(1, rounds + 1):
        stream = rng.substream(0, t)
        idx = sample_batch(stream, len(data), cfg.batch)
        adapters = lora_sgd_step(
            weights, biases, adapters, init.scale, init.num_classes, inputs[idx].T, labels[idx], cfg.learning_rate
        )
    return adapters
