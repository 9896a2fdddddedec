"""Dense neural network engine.

Forward evaluation, exact backpropagation (w.r.t. inputs and weights),
mini-batch SGD and a small binary model format. Everything is float64.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

log = logging.getLogger(__name__)

MODEL_MAGIC = b"A2DM"
MODEL_VERSION = 1
TAG_DENSE = 1
TAG_RELU = 2


class ShapeError(ValueError):
    """Input does not match the model's declared dimensions."""


class FormatError(ValueError):
    """Malformed model file."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------- layers

@dataclass
class Dense:
    weights: np.ndarray  # (in_dim, out_dim)
    bias: np.ndarray  # (out_dim,)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[1],):
            raise ShapeError(
                f"dense layer weights {self.weights.shape} incompatible with bias {self.bias.shape}"
            )

    @property
    def in_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[1]


@dataclass
class ReLU:
    dim: int


Layer = Union[Dense, ReLU]


@dataclass
class Model:
    """Ordered list of Dense/ReLU layers ending in a Dense logit layer.

    Softmax is never stored as a layer; it lives in `predict` and in the
    cross-entropy loss.
    """

    layers: list
    num_classes: int = 0
    input_dim: int = 0
    frozen: bool = field(default=False, compare=False)

    def __post_init__(self):
        dims = _check_layers(self.layers)
        if not self.input_dim:
            self.input_dim = dims[0]
        if not self.num_classes:
            self.num_classes = dims[1]
        if (self.input_dim, self.num_classes) != dims:
            raise ShapeError(
                f"declared dims ({self.input_dim}, {self.num_classes}) != layer dims {dims}"
            )

    def dense_layers(self) -> list:
        return [layer for layer in self.layers if isinstance(layer, Dense)]

    def freeze(self) -> "Model":
        for layer in self.dense_layers():
            layer.weights.setflags(write=False)
            layer.bias.setflags(write=False)
        self.frozen = True
        return self

    def copy(self) -> "Model":
        layers = [
            Dense(layer.weights.copy(), layer.bias.copy()) if isinstance(layer, Dense)
            else ReLU(layer.dim)
            for layer in self.layers
        ]
        return Model(layers, self.num_classes, self.input_dim)

    def __call__(self, x):
        return forward(self, x)


def _check_layers(layers) -> tuple:
    if not layers:
        raise ShapeError("model has no layers")
    if not isinstance(layers[-1], Dense):
        raise ShapeError("last layer must be Dense (the logits)")
    width = None
    first = None
    for i, layer in enumerate(layers):
        if isinstance(layer, Dense):
            if width is not None and layer.in_dim != width:
                raise ShapeError(f"layer {i}: input dim {layer.in_dim} != previous output {width}")
            if first is None:
                first = layer.in_dim
            width = layer.out_dim
        elif isinstance(layer, ReLU):
            if width is None:
                width = layer.dim
                first = layer.dim
            elif layer.dim != width:
                raise ShapeError(f"layer {i}: relu dim {layer.dim} != previous output {width}")
        else:
            raise ShapeError(f"layer {i}: unknown layer type {type(layer).__name__}")
    return first, width


def mlp(sizes: Sequence[int], seed: int = 0, weight_init_scale: float = 1.0) -> Model:
    """Build a ReLU MLP, e.g. ``mlp([784, 256, 128, 10])``.

    Weights are uniform in +-weight_init_scale/sqrt(in_dim); biases start at 0.
    """
    rng = np.random.default_rng(seed)
    layers: list = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = weight_init_scale / np.sqrt(fan_in)
        layers.append(Dense(rng.uniform(-bound, bound, size=(fan_in, fan_out)), np.zeros(fan_out)))
        if i < len(sizes) - 2:
            layers.append(ReLU(fan_out))
    return Model(layers)


# ---------------------------------------------------------------- losses

@dataclass(frozen=True)
class CrossEntropy:
    label: object  # int or int array (one label per row)


@dataclass(frozen=True)
class MarginCW:
    """max(max_{i != t} Z_i - Z_t, -kappa) on logits Z."""

    target: object
    kappa: float = 0.0

    def __post_init__(self):
        if self.kappa < 0:
            raise ValueError(f"kappa must be >= 0, got {self.kappa}")


@dataclass(frozen=True)
class MSE:
    reference: np.ndarray


LossKind = Union[CrossEntropy, MarginCW, MSE]


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _labels_for(value, n: int, num_classes: int) -> np.ndarray:
    labels = np.broadcast_to(np.asarray(value, dtype=np.int64), (n,))
    if np.any(labels < 0) or np.any(labels >= num_classes):
        raise ValueError(f"label out of range [0, {num_classes})")
    return labels


def max_other(z: np.ndarray, target: np.ndarray) -> tuple:
    """Largest logit excluding `target` per row; ties go to the lowest index."""
    rows = np.arange(z.shape[0])
    masked = z.copy()
    masked[rows, target] = -np.inf
    idx = np.argmax(masked, axis=1)
    return masked[rows, idx], idx


def loss_and_output_grad(out: np.ndarray, loss: LossKind) -> tuple:
    """Per-row loss values and d(loss)/d(out) for a batch of network outputs."""
    n, k = out.shape
    if isinstance(loss, CrossEntropy):
        labels = _labels_for(loss.label, n, k)
        logp = log_softmax(out)
        rows = np.arange(n)
        values = -logp[rows, labels]
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return values, grad
    if isinstance(loss, MarginCW):
        target = _labels_for(loss.target, n, k)
        rows = np.arange(n)
        other, other_idx = max_other(out, target)
        margin = other - out[rows, target]
        values = np.maximum(margin, -loss.kappa)
        grad = np.zeros_like(out)
        live = margin > -loss.kappa
        grad[rows[live], other_idx[live]] = 1.0
        grad[rows[live], target[live]] -= 1.0
        return values, grad
    if isinstance(loss, MSE):
        ref = np.asarray(loss.reference, dtype=np.float64).reshape(n, -1)
        if ref.shape != out.shape:
            raise ShapeError(f"MSE reference shape {ref.shape} != output shape {out.shape}")
        diff = out - ref
        return np.mean(diff * diff, axis=1), 2.0 * diff / k
    raise TypeError(f"unknown loss {loss!r}")


# ---------------------------------------------------------------- evaluation

def _as_batch(model: Model, x) -> tuple:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    batch = x.reshape(1, -1) if single else x
    if batch.ndim != 2 or batch.shape[1] != model.input_dim:
        raise ShapeError(f"expected input of {model.input_dim} values per example, got shape {x.shape}")
    if not np.all(np.isfinite(batch)):
        raise ValueError("input contains NaN or Inf")
    return batch, single


def _forward_cached(model: Model, batch: np.ndarray) -> list:
    acts = [batch]
    h = batch
    for layer in model.layers:
        if isinstance(layer, Dense):
            h = h @ layer.weights + layer.bias
        else:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return acts


def forward(model: Model, x) -> np.ndarray:
    """Logits for one example (1-D input) or a batch (2-D, one row each)."""
    batch, single = _as_batch(model, x)
    out = _forward_cached(model, batch)[-1]
    return out[0] if single else out


def predict(model: Model, x) -> tuple:
    """Return (label, probabilities); argmax ties resolve to the lowest index."""
    z = forward(model, x)
    probs = softmax(z)
    return np.argmax(z, axis=-1), probs


def predict_labels(model: Model, x) -> np.ndarray:
    return np.argmax(forward(model, x), axis=-1)


def _backward(model: Model, acts: list, grad_out: np.ndarray, want_weights: bool) -> tuple:
    g = grad_out
    weight_grads = []
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        if isinstance(layer, Dense):
            if want_weights:
                weight_grads.append((acts[i].T @ g, g.sum(axis=0)))
            g = g @ layer.weights.T
        else:
            g = g * (acts[i] > 0)
    weight_grads.reverse()
    return g, weight_grads


def input_gradient(model: Model, x, loss: LossKind) -> tuple:
    """Loss value(s) and exact gradient of the loss w.r.t. the input.

    For a batch the loss is treated per row: row i of the gradient is the
    gradient of row i's loss.
    """
    batch, single = _as_batch(model, x)
    acts = _forward_cached(model, batch)
    values, grad_out = loss_and_output_grad(acts[-1], loss)
    grad, _ = _backward(model, acts, grad_out, want_weights=False)
    if single:
        return float(values[0]), grad[0]
    return values, grad


def logits_and_gradient(model: Model, x, loss: LossKind) -> tuple:
    """Like `input_gradient` for a batch, but also returns the logits."""
    batch, _ = _as_batch(model, x)
    acts = _forward_cached(model, batch)
    values, grad_out = loss_and_output_grad(acts[-1], loss)
    grad, _ = _backward(model, acts, grad_out, want_weights=False)
    return acts[-1], values, grad


def jacobian(model: Model, x) -> tuple:
    """Logits (n, k) and Jacobian d logits / d input with shape (n, k, d)."""
    batch, _ = _as_batch(model, x)
    acts = _forward_cached(model, batch)
    n, k = acts[-1].shape
    jac = np.empty((n, k, batch.shape[1]))
    for c in range(k):
        seed = np.zeros((n, k))
        seed[:, c] = 1.0
        jac[:, c, :], _ = _backward(model, acts, seed, want_weights=False)
    return acts[-1], jac


# ---------------------------------------------------------------- training

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0
    weight_init_scale: float = 1.0

    def __post_init__(self):
        if self.learning_rate < 0 or self.epochs < 1 or self.batch_size < 1 or self.weight_init_scale <= 0:
            raise ValueError(f"invalid training config {self}")


def weight_gradients(model: Model, x: np.ndarray, loss: LossKind) -> tuple:
    """Mean loss over the batch and per-Dense-layer (dW, db) of that mean."""
    acts = _forward_cached(model, x)
    values, grad_out = loss_and_output_grad(acts[-1], loss)
    n = x.shape[0]
    _, grads = _backward(model, acts, grad_out / n, want_weights=True)
    return float(values.mean()), grads


def sgd_step(model: Model, grads: list, lr: float) -> None:
    for layer, (dw, db) in zip(model.dense_layers(), grads):
        layer.weights -= lr * dw
        layer.bias -= lr * db


def evaluate_accuracy(model: Model, images: np.ndarray, labels: np.ndarray, batch: int = 2048) -> float:
    hits = 0
    for start in range(0, len(images), batch):
        hits += int(np.sum(predict_labels(model, images[start:start + batch]) == labels[start:start + batch]))
    return hits / len(images)


def _mean_ce(model, images, labels, batch=2048) -> float:
    total = 0.0
    for start in range(0, len(images), batch):
        z = forward(model, images[start:start + batch])
        values, _ = loss_and_output_grad(z, CrossEntropy(labels[start:start + batch]))
        total += float(values.sum())
    return total / len(images)


def train(model: Model, data, cfg: TrainConfig, perturb=None) -> tuple:
    """Mini-batch SGD on cross-entropy.

    Returns a new frozen model and a per-epoch history of dicts with the
    full-training-set ``loss`` and ``accuracy`` after that epoch.

    `perturb(model, xb, yb, rng)` may replace each batch's inputs before the
    weight update; adversarial training plugs in here.
    """
    images, labels = data.images, data.labels
    if len(images) == 0:
        raise ValueError("cannot train on an empty dataset")
    if images.shape[1] != model.input_dim:
        raise ShapeError(f"data dim {images.shape[1]} != model input dim {model.input_dim}")
    _labels_for(labels, len(labels), model.num_classes)

    net = model.copy()
    rng = np.random.default_rng(cfg.seed)
    # separate stream so an inner attack never shifts the batch order
    perturb_rng = np.random.default_rng([cfg.seed, 1])
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(images))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb, yb = images[idx], labels[idx]
            if perturb is not None:
                xb = perturb(net, xb, yb, perturb_rng)
            value, grads = weight_gradients(net, xb, CrossEntropy(yb))
            if not np.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch starting {start}; lower the learning rate"
                )
            sgd_step(net, grads, cfg.learning_rate)
        loss = _mean_ce(net, images, labels)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss after epoch {epoch}")
        acc = evaluate_accuracy(net, images, labels)
        history.append({"epoch": epoch + 1, "loss": loss, "accuracy": acc})
        log.info("epoch %d: loss %.4f acc %.4f", epoch + 1, loss, acc)
    return net.freeze(), history


def train_regression(model: Model, inputs: np.ndarray, targets: np.ndarray, cfg: TrainConfig) -> tuple:
    """Mini-batch SGD on per-example MSE (used for autoencoders)."""
    if len(inputs) == 0:
        raise ValueError("cannot train on an empty dataset")
    net = model.copy()
    rng = np.random.default_rng(cfg.seed)
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(inputs))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            value, grads = weight_gradients(net, inputs[idx], MSE(targets[idx]))
            if not np.isfinite(value):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}; lower the learning rate")
            sgd_step(net, grads, cfg.learning_rate)
        out = forward(net, inputs)
        loss = float(np.mean((out - targets) ** 2))
        history.append({"epoch": epoch + 1, "loss": loss})
        log.info("epoch %d: mse %.5f", epoch + 1, loss)
    return net.freeze(), history


# ---------------------------------------------------------------- persistence

def save_model(model: Model, path) -> None:
    parts = [MODEL_MAGIC, struct.pack("<II", MODEL_VERSION, len(model.layers))]
    for layer in model.layers:
        if isinstance(layer, Dense):
            parts.append(struct.pack("<BII", TAG_DENSE, layer.in_dim, layer.out_dim))
            parts.append(np.ascontiguousarray(layer.weights, dtype="<f8").tobytes())
            parts.append(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())
        else:
            parts.append(struct.pack("<BII", TAG_RELU, layer.dim, layer.dim))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_model(path) -> Model:
    with open(path, "rb") as fh:
        buf = fh.read()
    return model_from_bytes(buf)


def model_from_bytes(buf: bytes) -> Model:
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated file while reading {what}", pos)
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MODEL_MAGIC:
        raise FormatError("bad magic, not an A2DM model file", 0)
    version, count = struct.unpack("<II", take(8, "header"))
    if version != MODEL_VERSION:
        raise FormatError(f"unsupported format version {version}", 4)
    layers: list = []
    width = None
    for i in range(count):
        start = pos
        tag, a, b = struct.unpack("<BII", take(9, f"layer {i} header"))
        if tag == TAG_DENSE:
            if width is not None and a != width:
                raise FormatError(f"layer {i}: declared input dim {a} != previous output {width}", start)
            w = np.frombuffer(take(8 * a * b, f"layer {i} weights"), dtype="<f8").reshape(a, b)
            bias = np.frombuffer(take(8 * b, f"layer {i} bias"), dtype="<f8")
            layers.append(Dense(w.astype(np.float64), bias.astype(np.float64)))
            width = b
        elif tag == TAG_RELU:
            if a != b or (width is not None and a != width):
                raise FormatError(f"layer {i}: relu dims ({a}, {b}) inconsistent with width {width}", start)
            layers.append(ReLU(a))
            width = a
        else:
            raise FormatError(f"layer {i}: unknown kind tag {tag}", start)
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after last layer", pos)
    try:
        return Model(layers).freeze()
    except ShapeError as exc:
        raise FormatError(str(exc)) from exc
