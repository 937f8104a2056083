"""Low-rank adapters on frozen square layers, with hand-written backprop.

The toy network is ``L`` square layers of width ``n``.  Layer ``l`` computes
``z = (W + s * A @ B) @ h + bias`` with ``W`` and ``bias`` frozen, ``A`` (n x r)
and ``B`` (r x n) trainable and ``s`` an optional adapter multiplier (1 by
default).  Hidden layers apply ``tanh``; the last layer's first
``num_classes`` outputs are the logits of a softmax cross-entropy head.
Samples are the columns of every activation matrix.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParameterError, ShapeError
from .numerics import gaussian_sample, linear_backward, matmul, read_matrix, write_matrix

NONLINEARITY = "tanh"

_HEADER = struct.Struct("<QQQQ")


def _frozen(m: np.ndarray) -> np.ndarray:
    m = np.array(m, copy=True)
    m.flags.writeable = False
    return m


@dataclass
class LoraAdapter:
    a: np.ndarray  # n x r
    b: np.ndarray  # r x n

    def __post_init__(self):
        if self.a.ndim != 2 or self.b.ndim != 2:
            raise ShapeError("adapter factors must be 2-D")
        n, r = self.a.shape
        if self.b.shape != (r, n):
            raise ShapeError(f"adapter factors do not conform: a {self.a.shape}, b {self.b.shape}")
        if r > n:
            raise ShapeError(f"adapter rank {r} exceeds width {n}")

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    @property
    def n(self) -> int:
        return self.a.shape[0]

    def copy(self) -> LoraAdapter:
        return LoraAdapter(self.a.copy(), self.b.copy())


@dataclass
class LoraLayer:
    base: np.ndarray
    adapter: LoraAdapter
    bias: np.ndarray

    def __post_init__(self):
        n = self.adapter.n
        if self.base.shape != (n, n):
            raise ShapeError(f"base {self.base.shape} does not match adapter width {n}")
        if self.bias.shape != (n, 1):
            raise ShapeError(f"bias must be ({n}, 1), got {self.bias.shape}")
        self.base = self.base if not self.base.flags.writeable else _frozen(self.base)
        self.bias = self.bias if not self.bias.flags.writeable else _frozen(self.bias)


@dataclass
class LoraModel:
    """Stack of adapted layers; only the adapter factors are trainable."""

    layers: list[LoraLayer]
    num_classes: int
    scale: float = 1.0

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("model needs at least one layer")
        widths = {layer.adapter.n for layer in self.layers}
        ranks = {layer.adapter.rank for layer in self.layers}
        if len(widths) != 1 or len(ranks) != 1:
            raise ShapeError("all layers must share width and rank")
        if not 1 <= self.num_classes <= self.width:
            raise ShapeError(f"num_classes must be in [1, {self.width}], got {self.num_classes}")

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def width(self) -> int:
        return self.layers[0].adapter.n

    @property
    def rank(self) -> int:
        return self.layers[0].adapter.rank

    @property
    def adapters(self) -> list[LoraAdapter]:
        return [layer.adapter for layer in self.layers]

    def trainable(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(layer.adapter.a, layer.adapter.b) for layer in self.layers]

    def with_adapters(self, adapters: list[LoraAdapter]) -> LoraModel:
        """Same frozen bases, new adapter factors (shapes must match)."""
        if len(adapters) != self.depth:
            raise ShapeError(f"expected {self.depth} adapters, got {len(adapters)}")
        layers = []
        for layer, adapter in zip(self.layers, adapters):
            if adapter.a.shape != layer.adapter.a.shape:
                raise ShapeError(f"adapter shape {adapter.a.shape} != {layer.adapter.a.shape}")
            layers.append(LoraLayer(layer.base, adapter, layer.bias))
        return LoraModel(layers, self.num_classes, self.scale)

    def copy(self) -> LoraModel:
        return self.with_adapters([a.copy() for a in self.adapters])

    def effective_weight(self, index: int) -> np.ndarray:
        layer = self.layers[index]
        return layer.base + self.scale * matmul(layer.adapter.a, layer.adapter.b)


def init_lora_model(
    rng: np.random.Generator,
    layers: int,
    width: int,
    rank: int,
    num_classes: int,
    scale: float = 1.0,
    base_std: float | None = None,
) -> LoraModel:
    """Random frozen bases ~ N(0, 1/n), A ~ N(0, 1/r), B = 0, zero bias."""
    if layers < 1 or width < 1 or rank < 1:
        raise ParameterError("layers, width and rank must be positive")
    if rank > width:
        raise ParameterError(f"rank {rank} exceeds width {width}")
    base_std = 1.0 / np.sqrt(width) if base_std is None else base_std
    built = []
    for _ in range(layers):
        base = gaussian_sample(rng, (width, width), std=base_std)
        a = gaussian_sample(rng, (width, rank), std=1.0 / np.sqrt(rank))
        b = np.zeros((rank, width))
        built.append(LoraLayer(base, LoraAdapter(a, b), np.zeros((width, 1))))
    return LoraModel(built, num_classes, scale)


def lora_param_count(layers: int, n: int, r: int) -> int:
    """Trainable (and transmitted) parameters: ``L * 2 * n * r``."""
    for name, value in (("L", layers), ("n", n), ("r", r)):
        if int(value) != value or value < 1:
            raise ParameterError(f"{name} must be a positive integer, got {value}")
    return int(layers) * 2 * int(n) * int(r)


def lora_forward(
    x: np.ndarray, layer: LoraLayer, scale: float = 1.0, activation: str | None = NONLINEARITY
) -> np.ndarray:
    """One adapted layer: ``(base + scale * a @ b) @ x + bias`` then ``activation``.

    ``activation`` is ``"tanh"``, ``"softmax"`` (column-wise, for the head) or
    ``None`` for the raw pre-activation.
    """
    if x.shape[0] != layer.adapter.n:
        raise ShapeError(f"input has {x.shape[0]} rows, layer width is {layer.adapter.n}")
    z = matmul(layer.base, x) + scale * matmul(layer.adapter.a, matmul(layer.adapter.b, x)) + layer.bias
    if activation is None:
        return z
    if activation == "tanh":
        return np.tanh(z)
    if activation == "softmax":
        return softmax(z)
    raise ParameterError(f"unknown activation {activation!r}")


def softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


def _check_batch(model_width: int, x: np.ndarray, y: np.ndarray) -> int:
    if x.ndim != 2 or x.shape[1] == 0:
        raise ParameterError("batch must contain at least one sample")
    if x.shape[0] != model_width:
        raise ShapeError(f"inputs have {x.shape[0]} features, model width is {model_width}")
    batch = x.shape[1]
    if y.shape[-1] != batch:
        raise ShapeError(f"{batch} inputs but targets shaped {y.shape}")
    return batch


def _head_grad(z_last: np.ndarray, y: np.ndarray, num_classes: int, loss: str) -> tuple[float, np.ndarray]:
    """Loss value and d(loss)/d(z_last) for the batch mean."""
    batch = z_last.shape[1]
    logits = z_last[:num_classes]
    g = np.zeros_like(z_last)
    if loss == "cross_entropy":
        labels = np.asarray(y, dtype=np.int64)
        if labels.min() < 0 or labels.max() >= num_classes:
            raise ParameterError("labels out of range for the classification head")
        shifted = logits - logits.max(axis=0, keepdims=True)
        log_norm = np.log(np.exp(shifted).sum(axis=0, keepdims=True))
        log_p = shifted - log_norm
        cols = np.arange(batch)
        value = float(-log_p[labels, cols].mean())
        d = np.exp(log_p)
        d[labels, cols] -= 1.0
        g[:num_classes] = d / batch
    elif loss == "mse":
        target = np.asarray(y, dtype=z_last.dtype).reshape(num_classes, batch)
        diff = logits - target
        value = float(0.5 * (diff * diff).sum() / batch)
        g[:num_classes] = diff / batch
    else:
        raise ParameterError(f"unknown loss {loss!r}")
    return value, g


def lora_loss_and_gradients(
    model: LoraModel, x: np.ndarray, y: np.ndarray, loss: str = "cross_entropy"
) -> tuple[float, list[tuple[np.ndarray, np.ndarray]]]:
    """Mean batch loss and its gradients w.r.t. every ``(A, B)`` pair.

    ``y`` holds integer labels for cross-entropy, or a ``(num_classes, batch)``
    target matrix for ``loss="mse"``.  Frozen weights never receive a gradient.
    """
    _check_batch(model.width, x, y)
    s = model.scale
    inputs, projected = [], []
    h = x
    for i, layer in enumerate(model.layers):
        bh = matmul(layer.adapter.b, h)
        z = matmul(layer.base, h) + s * matmul(layer.adapter.a, bh) + layer.bias
        inputs.append(h)
        projected.append(bh)
        h = np.tanh(z) if i < model.depth - 1 else z
    value, g = _head_grad(h, y, model.num_classes, loss)

    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * model.depth  # type: ignore[list-item]
    for i in range(model.depth - 1, -1, -1):
        layer = model.layers[i]
        a_t_g = matmul(layer.adapter.a.T, g)
        g_a = s * matmul(g, projected[i].T)
        g_b = s * matmul(a_t_g, inputs[i].T)
        grads[i] = (g_a, g_b)
        if i > 0:
            dh = matmul(layer.base.T, g) + s * matmul(layer.adapter.b.T, a_t_g)
            g = dh * (1.0 - inputs[i] * inputs[i])
    return value, grads


def lora_gradients(
    model: LoraModel, x: np.ndarray, y: np.ndarray, loss: str = "cross_entropy"
) -> list[tuple[np.ndarray, np.ndarray]]:
    return lora_loss_and_gradients(model, x, y, loss)[1]


def model_logits(model: LoraModel, x: np.ndarray) -> np.ndarray:
    h = x
    for i, layer in enumerate(model.layers):
        last = i == model.depth - 1
        h = lora_forward(h, layer, model.scale, activation=None if last else NONLINEARITY)
    return h[: model.num_classes]


def _loss_and_accuracy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    shifted = logits - logits.max(axis=0, keepdims=True)
    log_p = shifted - np.log(np.exp(shifted).sum(axis=0, keepdims=True))
    cols = np.arange(logits.shape[1])
    loss = float(-log_p[labels, cols].mean())
    acc = float((logits.argmax(axis=0) == labels).mean())
    return loss, acc


def evaluate_lora(model: LoraModel, inputs: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """Cross-entropy and accuracy over row-major ``inputs`` (samples x features)."""
    return _loss_and_accuracy(model_logits(model, np.ascontiguousarray(inputs.T)), labels)


# Dense counterpart used by the full-parameter FedAvg baseline.


@dataclass
class DenseModel:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    num_classes: int
    meta: dict = field(default_factory=dict)

    @property
    def depth(self) -> int:
        return len(self.weights)

    @property
    def width(self) -> int:
        return self.weights[0].shape[0]

    def param_count(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> DenseModel:
        return DenseModel([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.num_classes)

    @classmethod
    def from_lora(cls, model: LoraModel) -> DenseModel:
        """Dense model starting from the merged LoRA weights."""
        weights = [model.effective_weight(i) for i in range(model.depth)]
        return cls(weights, [np.array(layer.bias) for layer in model.layers], model.num_classes)


def dense_logits(model: DenseModel, x: np.ndarray) -> np.ndarray:
    h = x
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = matmul(w, h) + b
        h = np.tanh(z) if i < model.depth - 1 else z
    return h[: model.num_classes]


def dense_loss_and_gradients(
    model: DenseModel, x: np.ndarray, y: np.ndarray, loss: str = "cross_entropy"
) -> tuple[float, list[tuple[np.ndarray, np.ndarray]]]:
    """Mean batch loss and ``(grad_W, grad_bias)`` per layer."""
    _check_batch(model.width, x, y)
    inputs = []
    h = x
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        inputs.append(h)
        z = matmul(w, h) + b
        h = np.tanh(z) if i < model.depth - 1 else z
    value, g = _head_grad(h, y, model.num_classes, loss)
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * model.depth  # type: ignore[list-item]
    for i in range(model.depth - 1, -1, -1):
        g_w, g_b, dh = linear_backward(g, inputs[i], model.weights[i])
        grads[i] = (g_w, g_b)
        if i > 0:
            g = dh * (1.0 - inputs[i] * inputs[i])
    return value, grads


def evaluate_dense(model: DenseModel, inputs: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    return _loss_and_accuracy(dense_logits(model, np.ascontiguousarray(inputs.T)), labels)


# Checkpoints: header (L, n, r, seed) as uint64, then per layer base, bias, A, B
# in the numerics matrix format.  Dense checkpoints use r = 0 and omit A, B.


def save_checkpoint(path: str | Path, model: LoraModel | DenseModel, seed: int) -> None:
    with open(path, "wb") as fh:
        if isinstance(model, LoraModel):
            fh.write(_HEADER.pack(model.depth, model.width, model.rank, seed))
            for layer in model.layers:
                for m in (layer.base, layer.bias, layer.adapter.a, layer.adapter.b):
                    write_matrix(fh, m)
        else:
            fh.write(_HEADER.pack(model.depth, model.width, 0, seed))
            for w, b in zip(model.weights, model.biases):
                write_matrix(fh, w)
                write_matrix(fh, b)


def load_checkpoint(
    path: str | Path, num_classes: int, scale: float = 1.0
) -> tuple[LoraModel | DenseModel, int]:
    """Inverse of :func:`save_checkpoint`; returns ``(model, seed)``."""
    with open(path, "rb") as fh:
        depth, width, rank, seed = _HEADER.unpack(fh.read(_HEADER.size))
        if rank == 0:
            weights, biases = [], []
            for _ in range(depth):
                weights.append(read_matrix(fh))
                biases.append(read_matrix(fh))
            return DenseModel(weights, biases, num_classes), seed
        layers = []
        for _ in range(depth):
            base, bias, a, b = (read_matrix(fh) for _ in range(4))
            layers.append(LoraLayer(base, LoraAdapter(a, b), bias))
    model = LoraModel(layers, num_classes, scale)
    if model.width != width or model.rank != rank:
        raise ShapeError("checkpoint header disagrees with stored matrices")
    return model, seed
