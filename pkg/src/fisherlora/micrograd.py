"""Reverse-mode differentiation for chains of linear maps and pointwise
activations, with taps recording each linear layer's input activations and
output gradients.

Samples are columns: a batch input is ``n x l``. The loss is the mean over
the ``l`` samples, so tap gradients already carry the ``1/l`` factor and
``G @ X.T`` is exactly the weight gradient of the batch loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .dense import ShapeError, as_matrix

ACTIVATIONS = ("relu", "tanh", "none")
LOSS_KINDS = ("softmax-cross-entropy", "mean-squared-error", "sum")


class NonFiniteLossError(ArithmeticError):
    def __init__(self, message: str, layer_index: int | None = None):
        super().__init__(message)
        self.layer_index = layer_index


class StaleCacheError(ValueError):
    pass


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class LinearLayer:
    """``Y = W X`` with no bias."""

    weight: np.ndarray
    tapped: bool = True

    def __post_init__(self):
        object.__setattr__(self, "weight", _readonly(as_matrix(self.weight, "weight")))

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def effective_weight(self) -> np.ndarray:
        return self.weight

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.weight @ x

    def apply_transpose(self, g: np.ndarray) -> np.ndarray:
        return self.weight.T @ g

    def sgd_update(self, grad: np.ndarray, lr: float) -> "LinearLayer":
        if lr == 0.0:
            return self
        return replace(self, weight=self.weight - lr * grad)


def is_linear(layer) -> bool:
    return not isinstance(layer, str)


@dataclass(frozen=True)
class Model:
    layers: tuple
    loss_kind: str = "softmax-cross-entropy"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")
        prev = None
        for k, layer in enumerate(self.layers):
            if isinstance(layer, str):
                if layer not in ACTIVATIONS:
                    raise ValueError(f"unknown activation {layer!r} at position {k}")
                continue
            if prev is not None and layer.in_dim != prev:
                raise ShapeError(f"layer {k} expects input dim {layer.in_dim}, previous layer outputs {prev}")
            prev = layer.out_dim
        if prev is None:
            raise ValueError("model has no linear layers")

    @property
    def linear_positions(self) -> list[int]:
        return [k for k, layer in enumerate(self.layers) if is_linear(layer)]

    @property
    def linear_layers(self) -> list:
        return [self.layers[k] for k in self.linear_positions]

    @property
    def in_dim(self) -> int:
        return self.linear_layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.linear_layers[-1].out_dim

    def replace_linear(self, layer_id: int, new_layer) -> "Model":
        """Return a copy with the ``layer_id``-th linear layer swapped."""
        pos = self.linear_positions[layer_id]
        layers = list(self.layers)
        layers[pos] = new_layer
        return replace(self, layers=tuple(layers))


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray  # n x l
    targets: np.ndarray  # int class indices (l,) or float m x l

    def __post_init__(self):
        object.__setattr__(self, "inputs", as_matrix(self.inputs, "inputs"))
        t = np.asarray(self.targets)
        if t.ndim == 1:
            if t.shape[0] != self.size:
                raise ShapeError(f"{t.shape[0]} targets for {self.size} samples")
            if np.issubdtype(t.dtype, np.floating) and not np.all(t == np.round(t)):
                raise ValueError("class targets must be integers")
            t = t.astype(np.int64)
            if np.any(t < 0):
                raise ValueError("class targets must be non-negative")
        elif t.ndim == 2:
            t = as_matrix(t, "targets")
            if t.shape[1] != self.size:
                raise ShapeError(f"targets have {t.shape[1]} columns for {self.size} samples")
        else:
            raise ShapeError("targets must be 1-D class indices or a 2-D matrix")
        object.__setattr__(self, "targets", t)

    @property
    def size(self) -> int:
        return self.inputs.shape[1]


@dataclass(frozen=True)
class LayerTap:
    layer_id: int
    X: np.ndarray  # n x l
    G: np.ndarray  # m x l

    def __post_init__(self):
        if self.X.shape[1] != self.G.shape[1]:
            raise ShapeError(f"tap X has {self.X.shape[1]} columns but G has {self.G.shape[1]}")

    def weight_grad(self) -> np.ndarray:
        return self.G @ self.X.T


@dataclass
class ForwardCache:
    model: Model
    batch: Batch
    inputs: list = field(default_factory=list)  # per position: input to that layer
    outputs: list = field(default_factory=list)  # per position: output of that layer
    probs: np.ndarray | None = None


def _activate(kind: str, y: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(y, 0.0)
    if kind == "tanh":
        return np.tanh(y)
    return y


def _activate_backward(kind: str, y_in: np.ndarray, y_out: np.ndarray, g: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return g * (y_in > 0.0)
    if kind == "tanh":
        return g * (1.0 - y_out * y_out)
    return g


def log_softmax(z: np.ndarray) -> np.ndarray:
    """Column-wise log-softmax."""
    shifted = z - np.max(z, axis=0, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=0, keepdims=True))


def _loss_and_probs(kind: str, out: np.ndarray, targets: np.ndarray):
    l = out.shape[1]
    if kind == "softmax-cross-entropy":
        if targets.ndim != 1:
            raise ShapeError("cross-entropy needs class-index targets")
        if np.any(targets >= out.shape[0]):
            raise ValueError(f"class index out of range for {out.shape[0]} outputs")
        logp = log_softmax(out)
        loss = -float(np.sum(logp[targets, np.arange(l)])) / l
        return loss, np.exp(logp)
    if kind == "mean-squared-error":
        if targets.shape != out.shape:
            raise ShapeError(f"regression targets {targets.shape} do not match outputs {out.shape}")
        r = out - targets
        return 0.5 * float(np.sum(r * r)) / l, None
    return float(np.sum(out)) / l, None


def _loss_grad(cache: ForwardCache, out: np.ndarray) -> np.ndarray:
    kind = cache.model.loss_kind
    targets = cache.batch.targets
    l = out.shape[1]
    if kind == "softmax-cross-entropy":
        g = cache.probs.copy()
        g[targets, np.arange(l)] -= 1.0
        return g / l
    if kind == "mean-squared-error":
        return (out - targets) / l
    return np.full_like(out, 1.0 / l)


def forward(model: Model, batch: Batch) -> tuple[float, ForwardCache]:
    """Evaluate the mean loss over the batch and keep what backward needs."""
    if batch.inputs.shape[0] != model.in_dim:
        raise ShapeError(f"batch has {batch.inputs.shape[0]} features, model expects {model.in_dim}")
    cache = ForwardCache(model=model, batch=batch)
    h = batch.inputs
    last_linear = None
    for k, layer in enumerate(model.layers):
        cache.inputs.append(h)
        if isinstance(layer, str):
            h = _activate(layer, h)
        else:
            with np.errstate(over="ignore", invalid="ignore"):
                h = layer.apply(h)
            last_linear = k
            if not np.all(np.isfinite(h)):
                raise NonFiniteLossError(f"non-finite activations after linear layer {k}", k)
        cache.outputs.append(h)
    loss, probs = _loss_and_probs(model.loss_kind, h, batch.targets)
    if not np.isfinite(loss):
        raise NonFiniteLossError("non-finite loss", last_linear)
    cache.probs = probs
    return loss, cache


def backward(model: Model, cache: ForwardCache) -> tuple[list[np.ndarray], list[LayerTap]]:
    """Weight gradients for every linear layer plus taps for tapped ones.

    ``grads[k]`` is the gradient of the k-th linear layer's effective weight.
    """
    if cache.model is not model:
        raise StaleCacheError("forward cache was produced by a different model")
    positions = model.linear_positions
    g = _loss_grad(cache, cache.outputs[-1])
    grads: dict[int, np.ndarray] = {}
    taps: list[LayerTap] = []
    for k in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[k]
        if isinstance(layer, str):
            g = _activate_backward(layer, cache.inputs[k], cache.outputs[k], g)
            continue
        x = cache.inputs[k]
        layer_id = positions.index(k)
        grads[layer_id] = g @ x.T
        if layer.tapped:
            taps.append(LayerTap(layer_id=layer_id, X=x, G=g))
        if k > 0:
            g = layer.apply_transpose(g)
    taps.reverse()
    return [grads[i] for i in range(len(positions))], taps


def loss_value(model: Model, batch: Batch) -> float:
    return forward(model, batch)[0]


def loss_and_grads(model: Model, batch: Batch):
    loss, cache = forward(model, batch)
    grads, taps = backward(model, cache)
    return loss, grads, taps


def finite_diff_grad(model: Model, batch: Batch, eps: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradient of the loss w.r.t. every plain linear weight."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    out = []
    for layer_id, layer in enumerate(model.linear_layers):
        w = np.array(layer.effective_weight())
        grad = np.zeros_like(w)
        for i in range(w.shape[0]):
            for j in range(w.shape[1]):
                orig = w[i, j]
                w[i, j] = orig + eps
                lp = loss_value(model.replace_linear(layer_id, LinearLayer(w, layer.tapped)), batch)
                w[i, j] = orig - eps
                lm = loss_value(model.replace_linear(layer_id, LinearLayer(w, layer.tapped)), batch)
                w[i, j] = orig
                grad[i, j] = (lp - lm) / (2.0 * eps)
        out.append(grad)
    return out


def train_step(model: Model, batch: Batch, trainable_mask: Sequence[bool] | None, lr: float):
    """One plain gradient-descent step on the layers flagged trainable."""
    if lr < 0:
        raise ValueError("lr must be non-negative")
    loss, cache = forward(model, batch)
    grads, _ = backward(model, cache)
    if trainable_mask is None:
        trainable_mask = [True] * len(grads)
    if len(trainable_mask) != len(grads):
        raise ValueError(f"mask has {len(trainable_mask)} entries for {len(grads)} linear layers")
    new = model
    for layer_id, (layer, grad) in enumerate(zip(model.linear_layers, grads)):
        if trainable_mask[layer_id]:
            new = new.replace_linear(layer_id, layer.sgd_update(grad, lr))
    return new, loss


def build_mlp(dims: Sequence[int], activation: str, rng: np.random.Generator,
              loss_kind: str = "softmax-cross-entropy", tapped: Sequence[bool] | None = None,
              weight_scale: float = 1.0) -> Model:
    """Seeded MLP with ``activation`` between consecutive linear layers.

    Weights are drawn from ``N(0, weight_scale**2 / fan_in)``.
    """
    dims = list(dims)
    n_lin = len(dims) - 1
    if n_lin < 1:
        raise ValueError("need at least input and output dims")
    tapped = [True] * n_lin if tapped is None else list(tapped)
    layers: list = []
    for k in range(n_lin):
        w = rng.standard_normal((dims[k + 1], dims[k])) * (weight_scale / np.sqrt(dims[k]))
        layers.append(LinearLayer(w, tapped[k]))
        if k < n_lin - 1:
            layers.append(activation)
    return Model(tuple(layers), loss_kind)
