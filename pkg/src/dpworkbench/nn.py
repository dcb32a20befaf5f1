"""Small NumPy MLP with per-example gradients.

Arrays are float64 throughout. Parameters are stored layer by layer, and each
weight matrix and each bias vector is its own clipping group, so a network with
``L`` layers exposes ``2 * L`` groups ordered ``W0, b0, W1, b1, ...``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np


@dataclass(frozen=True)
class ModelSpec:
    layer_widths: Tuple[int, ...]
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ValueError("layer_widths needs at least an input and an output width")
        if any(w <= 0 for w in widths):
            raise ValueError(f"layer widths must be positive, got {widths}")
        if widths[-1] < 2:
            raise ValueError("need at least 2 classes")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def n_groups(self) -> int:
        return 2 * self.n_layers


@dataclass(frozen=True)
class ModelParams:
    weights: Tuple[np.ndarray, ...]
    biases: Tuple[np.ndarray, ...]

    def groups(self) -> List[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    @classmethod
    def from_groups(cls, groups: Sequence[np.ndarray]) -> "ModelParams":
        if len(groups) % 2:
            raise ValueError("group list must alternate weight, bias")
        return cls(tuple(groups[0::2]), tuple(groups[1::2]))

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def n_groups(self) -> int:
        return 2 * len(self.weights)

    @property
    def layer_widths(self) -> Tuple[int, ...]:
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    def zeros_like(self) -> "ModelParams":
        return ModelParams.from_groups([np.zeros_like(g) for g in self.groups()])

    def flatten(self) -> np.ndarray:
        return np.concatenate([g.ravel() for g in self.groups()])

    def unflatten(self, flat: np.ndarray) -> "ModelParams":
        out, pos = [], 0
        for g in self.groups():
            out.append(np.asarray(flat[pos:pos + g.size], dtype=np.float64).reshape(g.shape))
            pos += g.size
        if pos != len(flat):
            raise ValueError("flat vector length does not match parameter count")
        return ModelParams.from_groups(out)


# Velocity has exactly the parameter structure.
Velocity = ModelParams


@dataclass
class PerExampleGrads:
    """Per-example gradients, one array of shape ``(batch, *param_shape)`` per group."""

    groups: List[np.ndarray] = field(default_factory=list)

    @property
    def batch_size(self) -> int:
        return self.groups[0].shape[0] if self.groups else 0

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    def norms(self) -> np.ndarray:
        """l2 norm of every (example, group) gradient, shape ``(batch, n_groups)``."""
        b = self.batch_size
        if b == 0:
            return np.zeros((0, len(self.groups)))
        return np.stack([np.linalg.norm(g.reshape(b, -1), axis=1) for g in self.groups], axis=1)

    def sum(self) -> List[np.ndarray]:
        return [g.sum(axis=0) for g in self.groups]

    def mean(self) -> List[np.ndarray]:
        return [g.mean(axis=0) for g in self.groups]


def init_params(spec: ModelSpec) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(spec.seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(spec.layer_widths[:-1], spec.layer_widths[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return ModelParams(tuple(weights), tuple(biases))


def _check_inputs(params: ModelParams, inputs) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.weights[0].shape[0]:
        raise ValueError(
            f"expected inputs of shape (batch, {params.weights[0].shape[0]}), got {x.shape}"
        )
    if not np.all(np.isfinite(x)):
        raise ValueError("inputs contain NaN or Inf")
    return x


def _check_labels(labels, n: int, n_classes: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    y = y.astype(np.int64)
    if n and (y.min() < 0 or y.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    return y


def _forward_cache(params: ModelParams, x: np.ndarray):
    acts = [x]
    h = x
    last = params.n_layers - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w + b
        h = z if i == last else np.maximum(z, 0.0)
        acts.append(h)
    return acts


def forward(params: ModelParams, inputs) -> np.ndarray:
    """Logits of shape ``(batch, classes)``."""
    x = _check_inputs(params, inputs)
    return _forward_cache(params, x)[-1]


def _softmax_xent(logits: np.ndarray, y: np.ndarray):
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    losses = logsum - z[np.arange(len(y)), y]
    probs = np.exp(z - logsum[:, None])
    return losses, probs


def _backward_deltas(params: ModelParams, acts, y: np.ndarray):
    """Per-example dLoss_i/dz for every layer, output layer last."""
    losses, probs = _softmax_xent(acts[-1], y)
    delta = probs
    delta[np.arange(len(y)), y] -= 1.0
    deltas = [delta]
    for layer in range(params.n_layers - 1, 0, -1):
        delta = (delta @ params.weights[layer].T) * (acts[layer] > 0)
        deltas.append(delta)
    deltas.reverse()
    return losses, deltas


def loss_and_per_example_grads(params: ModelParams, inputs, labels) -> Tuple[float, PerExampleGrads]:
    """Mean softmax cross-entropy and the gradient of each example's own loss."""
    x = _check_inputs(params, inputs)
    y = _check_labels(labels, x.shape[0], params.weights[-1].shape[1])
    if x.shape[0] == 0:
        return 0.0, PerExampleGrads([np.zeros((0,) + g.shape) for g in params.groups()])
    acts = _forward_cache(params, x)
    losses, deltas = _backward_deltas(params, acts, y)
    groups = []
    for layer, delta in enumerate(deltas):
        groups.append(np.einsum("bi,bj->bij", acts[layer], delta))
        groups.append(delta.copy())
    return float(losses.mean()), PerExampleGrads(groups)


def loss_and_grad(params: ModelParams, inputs, labels) -> Tuple[float, List[np.ndarray]]:
    """Mean loss and its gradient, without materialising per-example terms."""
    x = _check_inputs(params, inputs)
    y = _check_labels(labels, x.shape[0], params.weights[-1].shape[1])
    n = x.shape[0]
    if n == 0:
        return 0.0, [np.zeros_like(g) for g in params.groups()]
    acts = _forward_cache(params, x)
    losses, deltas = _backward_deltas(params, acts, y)
    grads = []
    for layer, delta in enumerate(deltas):
        grads.append(acts[layer].T @ delta / n)
        grads.append(delta.sum(axis=0) / n)
    return float(losses.mean()), grads


def apply_update(
    params: ModelParams,
    grad: Sequence[np.ndarray],
    lr: float,
    momentum: float = 0.0,
    velocity: ModelParams | None = None,
) -> Tuple[ModelParams, ModelParams]:
    """Heavy-ball step: ``v = momentum * v + g``; ``w = w - lr * v``."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    if not 0.0 <= momentum < 1.0:
        raise ValueError("momentum must lie in [0, 1)")
    current = params.groups()
    if len(grad) != len(current):
        raise ValueError(f"expected {len(current)} gradient groups, got {len(grad)}")
    if velocity is None:
        velocity = params.zeros_like()
    new_v, new_p = [], []
    for w, g, v in zip(current, grad, velocity.groups()):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != w.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {w.shape}")
        v2 = momentum * v + g
        new_v.append(v2)
        new_p.append(w - lr * v2)
    return ModelParams.from_groups(new_p), ModelParams.from_groups(new_v)


def predict(params: ModelParams, inputs) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest class on ties
    return np.argmax(forward(params, inputs), axis=1)


def evaluate(params: ModelParams, inputs, labels) -> float:
    x = _check_inputs(params, inputs)
    if x.shape[0] == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    y = _check_labels(labels, x.shape[0], params.weights[-1].shape[1])
    return float(np.mean(predict(params, x) == y))
