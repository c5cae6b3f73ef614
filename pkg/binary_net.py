"""
binary_net.py: Binary-weight neural network with manual forward/backward

A small numpy network whose dense / conv2d layers keep real auxiliary weights
(W̄, clipped to [-1, 1]) and binary weights (W^b = Sign(W̄)), each scaled by a
trainable per-layer amplitude ϑ:  a_l = ϑ_l * f_l(W^b_l, a_{l-1}).

Gradients w.r.t. W^b are computed by treating W^b as a real tensor
(straight-through); the optimizer step is applied to W̄, followed by the clip
and the re-binarization.

Usage:
    model = Model.build(dense_architecture(), rng=np.random.default_rng(0))
    local_train_step(model, (x, y), TrainConfig())

Version: 1.0.0
Last Updated: 2026-10-19
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel, Field, field_validator, model_validator

from errors import InvalidStateError, InvalidValueError, ShapeError

logger = logging.getLogger(__name__)


# ============================================================
# Constants
# ============================================================

INIT_SCALE = 0.1          # W̄ ~ U(-0.1, 0.1)
INIT_AMPLITUDE = 1.0
AMPLITUDE_FLOOR = 1e-6    # keeps ϑ > 0
BN_MOMENTUM = 0.1
BN_EPS = 1e-5

LayerKind = Literal[
    "dense",
    "conv2d",
    "batchnorm",
    "activation-tanh",
    "activation-softmax",
    "pool-down2",
]
WEIGHT_KINDS = {"dense", "conv2d"}


# ============================================================
# Elementwise operators
# ============================================================

def _require_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        bad = int(np.argmax(~np.isfinite(x).ravel()))
        raise InvalidValueError(f"{what}: non-finite element at flat index {bad}")


def sign_binarize(w_aux) -> np.ndarray:
    """+1 where the element is positive, -1 otherwise (zero maps to -1)."""
    x = np.asarray(w_aux, dtype=np.float64)
    _require_finite(x, "sign_binarize")
    return np.where(x > 0, 1.0, -1.0)


def clip_unit(w_aux) -> np.ndarray:
    """Elementwise clamp to [-1, 1]."""
    x = np.asarray(w_aux, dtype=np.float64)
    _require_finite(x, "clip_unit")
    return np.clip(x, -1.0, 1.0)


# ============================================================
# Specs / configuration
# ============================================================

class LayerSpec(BaseModel):
    """Static description of one layer."""
    kind: LayerKind
    input_dims: Tuple[int, ...]
    output_dims: Tuple[int, ...]
    binarized: bool = False
    kernel_size: int = 0

    @model_validator(mode="after")
    def _check_dims(self) -> "LayerSpec":
        if self.binarized and self.kind not in WEIGHT_KINDS:
            raise ValueError(f"{self.kind} layers cannot be binarized")
        if any(d <= 0 for d in self.input_dims + self.output_dims):
            raise ValueError("dims must be positive")
        if self.kind == "conv2d":
            if len(self.input_dims) != 3 or len(self.output_dims) != 3:
                raise ValueError("conv2d dims are (channels, height, width)")
            k = self.kernel_size
            _, h, w = self.input_dims
            if k < 1 or self.output_dims[1:] != (h - k + 1, w - k + 1):
                raise ValueError("conv2d output must be (out_c, H-k+1, W-k+1)")
        elif self.kind == "pool-down2":
            c, h, w = self.input_dims
            if h % 2 or w % 2 or self.output_dims != (c, h // 2, w // 2):
                raise ValueError("pool-down2 needs even H, W and halves them")
        elif self.kind != "dense" and self.input_dims != self.output_dims:
            raise ValueError(f"{self.kind} must preserve dims")
        return self

    @property
    def input_size(self) -> int:
        return int(np.prod(self.input_dims))

    @property
    def output_size(self) -> int:
        return int(np.prod(self.output_dims))


class TrainConfig(BaseModel):
    """Local training hyperparameters (desk-scale MNIST defaults)."""
    learning_rate_schedule: List[Tuple[int, float]] = Field(
        default_factory=lambda: [(0, 0.005), (30, 0.002), (60, 0.001)])
    batch_size: int = Field(64, ge=1)
    optimizer: Literal["adam", "sgd"] = "adam"
    adam_betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = Field(1e-8, gt=0)
    rng_seed: int = 0

    @field_validator("learning_rate_schedule")
    @classmethod
    def _check_schedule(cls, v):
        if not v:
            raise ValueError("schedule must not be empty")
        if any(lr <= 0 for _, lr in v):
            raise ValueError("learning rates must be > 0")
        thresholds = [t for t, _ in v]
        if thresholds != sorted(thresholds) or thresholds[0] != 0:
            raise ValueError("thresholds must be ascending and start at epoch 0")
        return v

    def learning_rate(self, epoch: int) -> float:
        lr = self.learning_rate_schedule[0][1]
        for threshold, value in self.learning_rate_schedule:
            if epoch >= threshold:
                lr = value
        return lr


def dense_architecture(input_dims: Sequence[int] = (28, 28), hidden: int = 64,
                       num_classes: int = 10, binarized: bool = True) -> List[LayerSpec]:
    """dense -> BN -> tanh -> dense -> softmax (desk-scale default)."""
    n_in = int(np.prod(input_dims))
    return [
        LayerSpec(kind="dense", input_dims=(n_in,), output_dims=(hidden,), binarized=binarized),
        LayerSpec(kind="batchnorm", input_dims=(hidden,), output_dims=(hidden,)),
        LayerSpec(kind="activation-tanh", input_dims=(hidden,), output_dims=(hidden,)),
        LayerSpec(kind="dense", input_dims=(hidden,), output_dims=(num_classes,), binarized=binarized),
        LayerSpec(kind="activation-softmax", input_dims=(num_classes,), output_dims=(num_classes,)),
    ]


def conv_architecture(input_dims: Sequence[int] = (1, 28, 28), channels: int = 8,
                      kernel_size: int = 5, num_classes: int = 10,
                      binarized: bool = True) -> List[LayerSpec]:
    """conv -> BN -> tanh -> pool -> dense -> softmax."""
    c, h, w = input_dims
    ho, wo = h - kernel_size + 1, w - kernel_size + 1
    conv_out = (channels, ho, wo)
    pooled = (channels, ho // 2, wo // 2)
    return [
        LayerSpec(kind="conv2d", input_dims=(c, h, w), output_dims=conv_out,
                  binarized=binarized, kernel_size=kernel_size),
        LayerSpec(kind="batchnorm", input_dims=conv_out, output_dims=conv_out),
        LayerSpec(kind="activation-tanh", input_dims=conv_out, output_dims=conv_out),
        LayerSpec(kind="pool-down2", input_dims=conv_out, output_dims=pooled),
        LayerSpec(kind="dense", input_dims=(int(np.prod(pooled)),), output_dims=(num_classes,),
                  binarized=binarized),
        LayerSpec(kind="activation-softmax", input_dims=(num_classes,), output_dims=(num_classes,)),
    ]


# ============================================================
# Layers
# ============================================================

class Layer:
    """Base class: forward returns (output, cache); backward returns (dx, grads)."""

    def __init__(self, spec: LayerSpec):
        self.spec = spec

    def forward(self, x: np.ndarray, training: bool) -> Tuple[np.ndarray, Any]:
        raise NotImplementedError

    def backward(self, dy: np.ndarray, cache: Any) -> Tuple[np.ndarray, Dict[str, Any]]:
        raise NotImplementedError


class BinaryLayer(Layer):
    """Weight layer with W̄ (auxiliary), W^b (binary) and amplitude ϑ.

    In binary mode the forward pass reads only W^b and ϑ. In real mode
    (FA-real, hybrid after the switch) it reads W̄ and ϑ is frozen.
    """

    def __init__(self, spec: LayerSpec, w_aux: np.ndarray, amplitude: float = INIT_AMPLITUDE):
        super().__init__(spec)
        self.binarized = spec.binarized
        self.w_aux: Optional[np.ndarray] = np.asarray(w_aux, dtype=np.float64).copy()
        self.w_bin = sign_binarize(self.w_aux)
        self.amplitude = float(amplitude)
        self.optimizer_state: Dict[str, Dict[str, Any]] = {}

    @property
    def weight(self) -> np.ndarray:
        if self.binarized:
            return self.w_bin
        if self.w_aux is None:
            raise InvalidStateError("real-mode forward needs W̄, which this copy dropped")
        return self.w_aux

    def clip_and_binarize(self) -> None:
        """W̄ <- clip(W̄, -1, 1), then W^b <- Sign(W̄)."""
        self.w_aux = clip_unit(self.w_aux)
        self.w_bin = sign_binarize(self.w_aux)


class Dense(BinaryLayer):
    """y = ϑ * x @ W, W of shape (in, out); input is flattened."""

    def forward(self, x, training):
        flat = x.reshape(x.shape[0], -1)
        w = self.weight
        if flat.shape[1] != w.shape[0]:
            raise ShapeError(f"dense expects {w.shape[0]} inputs, got {flat.shape[1]}")
        z = flat @ w
        return self.amplitude * z, (flat, z, x.shape)

    def backward(self, dy, cache):
        flat, z, in_shape = cache
        dz = dy * self.amplitude
        grads = {
            "w": flat.T @ dz,
            "amplitude": float(np.sum(dy * z)),
        }
        dx = (dz @ self.weight.T).reshape(in_shape)
        return dx, grads


class Conv2d(BinaryLayer):
    """Valid 2-D convolution, stride 1, W of shape (out_c, in_c, k, k)."""

    def _columns(self, x):
        k = self.spec.kernel_size
        b, c, h, w = x.shape
        windows = sliding_window_view(x, (k, k), axis=(2, 3))  # (B, C, Ho, Wo, k, k)
        ho, wo = h - k + 1, w - k + 1
        return windows.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * k * k), (b, ho, wo)

    def forward(self, x, training):
        w = self.weight
        if x.ndim != 4 or x.shape[1:] != tuple(self.spec.input_dims):
            raise ShapeError(f"conv2d expects (B, {self.spec.input_dims}), got {x.shape}")
        cols, (b, ho, wo) = self._columns(x)
        out_c = w.shape[0]
        z = (cols @ w.reshape(out_c, -1).T).reshape(b, ho, wo, out_c).transpose(0, 3, 1, 2)
        return self.amplitude * z, (x.shape, cols, z)

    def backward(self, dy, cache):
        in_shape, cols, z = cache
        w = self.weight
        out_c, in_c, k, _ = w.shape
        b, _, ho, wo = dy.shape
        dz = (dy * self.amplitude).transpose(0, 2, 3, 1).reshape(-1, out_c)
        grads = {
            "w": (dz.T @ cols).reshape(w.shape),
            "amplitude": float(np.sum(dy * z)),
        }
        dcols = (dz @ w.reshape(out_c, -1)).reshape(b, ho, wo, in_c, k, k)
        dx = np.zeros(in_shape)
        for i in range(k):
            for j in range(k):
                dx[:, :, i:i + ho, j:j + wo] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dx, grads


class BatchNorm(Layer):
    """Per-feature (dense) or per-channel (conv) batch normalization.

    Affine parameters and running statistics stay real-valued and local.
    """

    def __init__(self, spec: LayerSpec):
        super().__init__(spec)
        n = spec.input_dims[0]
        self.gamma = np.ones(n)
        self.beta = np.zeros(n)
        self.running_mean = np.zeros(n)
        self.running_var = np.ones(n)
        self.optimizer_state: Dict[str, Dict[str, Any]] = {}

    @staticmethod
    def _to_rows(x):
        if x.ndim == 4:
            b, c, h, w = x.shape
            return x.transpose(0, 2, 3, 1).reshape(-1, c)
        return x

    @staticmethod
    def _from_rows(rows, shape):
        if len(shape) == 4:
            b, c, h, w = shape
            return rows.reshape(b, h, w, c).transpose(0, 3, 1, 2)
        return rows

    def forward(self, x, training, update_stats: bool = True):
        rows = self._to_rows(x)
        if training:
            mean = rows.mean(axis=0)
            var = rows.var(axis=0)
        if training and update_stats:
            self.running_mean = (1 - BN_MOMENTUM) * self.running_mean + BN_MOMENTUM * mean
            self.running_var = (1 - BN_MOMENTUM) * self.running_var + BN_MOMENTUM * var
        if not training:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (rows - mean) * inv_std
        y = self.gamma * xhat + self.beta
        return self._from_rows(y, x.shape), (xhat, inv_std, x.shape, training)

    def backward(self, dy, cache):
        xhat, inv_std, shape, training = cache
        drows = self._to_rows(dy)
        grads = {"gamma": np.sum(drows * xhat, axis=0), "beta": np.sum(drows, axis=0)}
        dxhat = drows * self.gamma
        if training:
            n = drows.shape[0]
            dx = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0))
        else:
            dx = dxhat * inv_std
        return self._from_rows(dx, shape), grads


class Tanh(Layer):
    def forward(self, x, training):
        y = np.tanh(x)
        return y, y

    def backward(self, dy, cache):
        return dy * (1.0 - cache ** 2), {}


class PoolDown2(Layer):
    """2x2 average pooling."""

    def forward(self, x, training):
        b, c, h, w = x.shape
        return x.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5)), x.shape

    def backward(self, dy, cache):
        return np.repeat(np.repeat(dy, 2, axis=2), 2, axis=3) / 4.0, {}


class Softmax(Layer):
    def forward(self, x, training):
        shifted = x - x.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=1, keepdims=True)
        return y, y

    def backward(self, dy, cache):
        y = cache
        return y * (dy - np.sum(dy * y, axis=1, keepdims=True)), {}


_LAYER_CLASSES = {
    "batchnorm": BatchNorm,
    "activation-tanh": Tanh,
    "activation-softmax": Softmax,
    "pool-down2": PoolDown2,
}


def build_layer(spec: LayerSpec, rng: np.random.Generator) -> Layer:
    if spec.kind == "dense":
        shape = (spec.input_size, spec.output_size)
        return Dense(spec, rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape))
    if spec.kind == "conv2d":
        k = spec.kernel_size
        shape = (spec.output_dims[0], spec.input_dims[0], k, k)
        return Conv2d(spec, rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape))
    return _LAYER_CLASSES[spec.kind](spec)


# ============================================================
# Model
# ============================================================

@dataclass
class ForwardCache:
    """Activations cached by forward for the matching backward call."""
    version: int
    batch_size: int
    layer_caches: List[Any]
    probs: np.ndarray


@dataclass
class Gradients:
    """Per-layer gradient dicts ({} for parameter-free layers)."""
    per_layer: List[Dict[str, Any]] = field(default_factory=list)

    def weight(self, index: int) -> np.ndarray:
        return self.per_layer[index]["w"]

    def amplitude(self, index: int) -> float:
        return self.per_layer[index]["amplitude"]


class Model:
    """Ordered list of layers ending in softmax, cross-entropy loss.

    `version` is bumped on every parameter update so a cache from an older
    forward pass is rejected by backward.
    """

    loss_kind = "cross-entropy"

    def __init__(self, layers: List[Layer], rng: Optional[np.random.Generator] = None):
        specs = [layer.spec for layer in layers]
        _check_composition(specs)
        self.layers = layers
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.version = 0
        self.last_loss: Optional[float] = None

    @classmethod
    def build(cls, specs: Sequence[LayerSpec], rng: Optional[np.random.Generator] = None) -> "Model":
        rng = rng if rng is not None else np.random.default_rng(0)
        _check_composition(list(specs))
        return cls([build_layer(s, rng) for s in specs], rng=rng)

    # ----------------------------------------------------------
    # Introspection
    # ----------------------------------------------------------
    @property
    def specs(self) -> List[LayerSpec]:
        return [layer.spec for layer in self.layers]

    @property
    def weight_layers(self) -> List[BinaryLayer]:
        return [layer for layer in self.layers if isinstance(layer, BinaryLayer)]

    @property
    def num_weight_params(self) -> int:
        return int(sum(layer.w_bin.size for layer in self.weight_layers))

    @property
    def num_weight_layers(self) -> int:
        return len(self.weight_layers)

    @property
    def binarized(self) -> bool:
        return all(layer.binarized for layer in self.weight_layers)

    def set_binarized(self, flag: bool) -> None:
        """Switch every weight layer between binary and real forward."""
        for layer in self.weight_layers:
            layer.binarized = flag
            layer.spec = layer.spec.model_copy(update={"binarized": flag})
        self.version += 1

    def inference_copy(self) -> "Model":
        """Deep copy without W̄ and optimizer state (binary inference only)."""
        clone = copy.deepcopy(self)
        for layer in clone.weight_layers:
            if not layer.binarized:
                raise InvalidStateError("inference copies are only defined for binary models")
            layer.w_aux = None
            layer.optimizer_state = {}
        for layer in clone.layers:
            if isinstance(layer, BatchNorm):
                layer.optimizer_state = {}
        return clone

    # ----------------------------------------------------------
    # Forward / backward
    # ----------------------------------------------------------
    def _reshape_inputs(self, inputs: np.ndarray) -> np.ndarray:
        x = np.asarray(inputs, dtype=np.float64)
        first = self.layers[0].spec
        if x.ndim == 0 or x[0].size != first.input_size:
            raise ShapeError(f"input of shape {x.shape} does not match {first.input_dims}")
        return x.reshape((x.shape[0],) + tuple(first.input_dims))

    def forward(self, inputs: np.ndarray, labels: np.ndarray,
                training: bool = True, update_stats: bool = True) -> Tuple[float, ForwardCache]:
        """Loss and cache; `update_stats=False` leaves BN running statistics untouched."""
        x = self._reshape_inputs(inputs)
        labels = np.asarray(labels)
        if labels.shape != (x.shape[0],):
            raise ShapeError(f"labels of shape {labels.shape} for batch of {x.shape[0]}")
        caches = []
        for layer in self.layers[:-1]:
            if isinstance(layer, BatchNorm):
                x, cache = layer.forward(x, training, update_stats)
            else:
                x, cache = layer.forward(x, training)
            caches.append(cache)
        logits = x
        probs, cache = self.layers[-1].forward(logits, training)
        caches.append(cache)
        num_classes = probs.shape[1]
        if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
            raise ShapeError(f"labels outside [0, {num_classes})")
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        loss = float(-np.mean(log_probs[np.arange(len(labels)), labels]))
        return loss, ForwardCache(self.version, x.shape[0], caches, probs)

    def backward(self, cache: ForwardCache, labels: np.ndarray) -> Gradients:
        if cache.version != self.version:
            raise InvalidStateError(
                f"stale cache (forward at version {cache.version}, model at {self.version})")
        labels = np.asarray(labels)
        if labels.shape != (cache.batch_size,):
            raise ShapeError("labels do not match the cached batch")
        onehot = np.zeros_like(cache.probs)
        onehot[np.arange(len(labels)), labels] = 1.0
        # softmax + cross-entropy fused
        dx = (cache.probs - onehot) / cache.batch_size
        per_layer: List[Dict[str, Any]] = [{}]
        for layer, layer_cache in zip(reversed(self.layers[:-1]), reversed(cache.layer_caches[:-1])):
            dx, grads = layer.backward(dx, layer_cache)
            per_layer.append(grads)
        per_layer.reverse()
        return Gradients(per_layer)

    def predict_proba(self, inputs: np.ndarray) -> np.ndarray:
        x = self._reshape_inputs(inputs)
        for layer in self.layers:
            x, _ = layer.forward(x, training=False)
        return x

    def evaluate(self, inputs: np.ndarray, labels: np.ndarray,
                 chunk: int = 1000) -> Tuple[float, float]:
        """(accuracy, mean loss) in inference mode."""
        correct = 0
        total_loss = 0.0
        n = len(labels)
        for start in range(0, n, chunk):
            xb = inputs[start:start + chunk]
            yb = np.asarray(labels[start:start + chunk])
            loss, cache = self.forward(xb, yb, training=False)
            correct += int(np.sum(np.argmax(cache.probs, axis=1) == yb))
            total_loss += loss * len(yb)
        return correct / max(n, 1), total_loss / max(n, 1)


def _check_composition(specs: List[LayerSpec]) -> None:
    if not specs:
        raise ShapeError("model has no layers")
    if specs[-1].kind != "activation-softmax":
        raise ShapeError("last layer must be activation-softmax")
    for prev, nxt in zip(specs, specs[1:]):
        if nxt.kind == "dense":
            ok = prev.output_size == nxt.input_size
        else:
            ok = tuple(prev.output_dims) == tuple(nxt.input_dims)
        if not ok:
            raise ShapeError(f"{prev.kind} {prev.output_dims} does not feed {nxt.kind} {nxt.input_dims}")


# ============================================================
# Optimizers
# ============================================================

def _adam(state: Dict[str, Any], value, grad, lr: float, cfg: TrainConfig):
    b1, b2 = cfg.adam_betas
    grad = np.asarray(grad, dtype=np.float64)
    if not state:
        state.update(m=np.zeros_like(grad), v=np.zeros_like(grad), t=0)
    state["t"] += 1
    state["m"] = b1 * state["m"] + (1 - b1) * grad
    state["v"] = b2 * state["v"] + (1 - b2) * grad * grad
    m_hat = state["m"] / (1 - b1 ** state["t"])
    v_hat = state["v"] / (1 - b2 ** state["t"])
    return value - lr * (m_hat / (np.sqrt(v_hat) + cfg.adam_eps))


def _sgd(state: Dict[str, Any], value, grad, lr: float, cfg: TrainConfig):
    return value - lr * np.asarray(grad, dtype=np.float64)


_OPTIMIZERS = {"adam": _adam, "sgd": _sgd}


def apply_gradients(model: Model, grads: Gradients, cfg: TrainConfig, lr: float) -> None:
    """Descent step on W̄ (via ∂ℓ/∂W^b), ϑ and BN affine; then clip + binarize."""
    step = _OPTIMIZERS[cfg.optimizer]
    for layer, g in zip(model.layers, grads.per_layer):
        if isinstance(layer, BinaryLayer):
            state = layer.optimizer_state
            layer.w_aux = step(state.setdefault("w", {}), layer.w_aux, g["w"], lr, cfg)
            if layer.binarized:
                new_amp = step(state.setdefault("amplitude", {}), layer.amplitude,
                               g["amplitude"], lr, cfg)
                layer.amplitude = max(float(new_amp), AMPLITUDE_FLOOR)
                layer.clip_and_binarize()
            else:
                layer.w_bin = sign_binarize(layer.w_aux)
        elif isinstance(layer, BatchNorm):
            state = layer.optimizer_state
            layer.gamma = step(state.setdefault("gamma", {}), layer.gamma, g["gamma"], lr, cfg)
            layer.beta = step(state.setdefault("beta", {}), layer.beta, g["beta"], lr, cfg)
    model.version += 1


# ============================================================
# Operations
# ============================================================

def forward(model: Model, batch: Tuple[np.ndarray, np.ndarray]) -> Tuple[float, ForwardCache]:
    inputs, labels = batch
    return model.forward(inputs, labels, training=True)


def backward(model: Model, cache: ForwardCache, batch: Tuple[np.ndarray, np.ndarray]) -> Gradients:
    return model.backward(cache, batch[1])


def local_train_step(model: Model, batch: Tuple[np.ndarray, np.ndarray], cfg: TrainConfig,
                     epoch: int = 0, learning_rate: Optional[float] = None) -> Model:
    """One minibatch update. `learning_rate` overrides the schedule (may be 0).

    A zero learning rate only records the loss: weights, BN running statistics,
    optimizer moments and the model version all stay as they were.
    """
    lr = cfg.learning_rate(epoch) if learning_rate is None else float(learning_rate)
    if lr == 0.0:
        inputs, labels = batch
        model.last_loss, _ = model.forward(inputs, labels, training=True, update_stats=False)
        return model
    loss, cache = forward(model, batch)
    grads = backward(model, cache, batch)
    apply_gradients(model, grads, cfg, lr)
    model.last_loss = loss
    return model


def train_epoch(model: Model, inputs: np.ndarray, labels: np.ndarray, cfg: TrainConfig,
                epoch: int, rng: np.random.Generator) -> float:
    """One shuffled pass over (inputs, labels); returns the mean batch loss."""
    n = len(labels)
    order = rng.permutation(n)
    losses = []
    for start in range(0, n, cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        if len(idx) < 2 and n >= 2:
            # a single-sample batch has no batch statistics
            continue
        local_train_step(model, (inputs[idx], labels[idx]), cfg, epoch=epoch)
        losses.append(model.last_loss)
    return float(np.mean(losses)) if losses else float("nan")
