"""Two-layer ReLU MLP with closed-form per-sample, per-class Jacobians.

All numerics run in float64.  Layers are always ordered ``W1, b1, W2, b2``
and ``W1`` is stored as ``(hidden, input)`` so that ``h = W1 @ x + b1``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import ConfigurationError, ContractViolation

LAYER_NAMES = ("W1", "b1", "W2", "b2")


class Activation(str, Enum):
    RELU = "relu"


@dataclass(frozen=True)
class MlpArchitecture:
    input_dim: int = 784
    hidden_dim: int = 100
    num_classes: int = 10
    activation: Activation = Activation.RELU

    def __post_init__(self):
        for name in ("input_dim", "hidden_dim", "num_classes"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        object.__setattr__(self, "activation", Activation(self.activation))

    @property
    def layer_shapes(self) -> dict[str, tuple[int, ...]]:
        h, i, c = self.hidden_dim, self.input_dim, self.num_classes
        return {"W1": (h, i), "b1": (h,), "W2": (c, h), "b2": (c,)}

    @property
    def layer_dims(self) -> dict[str, int]:
        return {k: int(np.prod(s)) for k, s in self.layer_shapes.items()}

    @property
    def parameter_count(self) -> int:
        h, i, c = self.hidden_dim, self.input_dim, self.num_classes
        return i * h + h + h * c + c


@dataclass
class WeightVector:
    """Per-layer parameter arrays in the fixed layer order."""

    layers: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if tuple(self.layers) != LAYER_NAMES:
            raise ConfigurationError(f"layers must be ordered {LAYER_NAMES}, got {tuple(self.layers)}")
        self.layers = {k: np.asarray(v, dtype=np.float64) for k, v in self.layers.items()}

    @property
    def total_dim(self) -> int:
        return sum(v.size for v in self.layers.values())

    @property
    def architecture(self) -> MlpArchitecture:
        h, i = self.layers["W1"].shape
        c = self.layers["W2"].shape[0]
        return MlpArchitecture(input_dim=i, hidden_dim=h, num_classes=c)

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.layers.values()])

    @classmethod
    def from_flat(cls, arch: MlpArchitecture, vec: np.ndarray) -> "WeightVector":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (arch.parameter_count,):
            raise ConfigurationError(
                f"flat vector has shape {vec.shape}, expected ({arch.parameter_count},)"
            )
        layers, start = {}, 0
        for name, shape in arch.layer_shapes.items():
            n = int(np.prod(shape))
            layers[name] = vec[start:start + n].reshape(shape).copy()
            start += n
        return cls(layers)

    @classmethod
    def zeros(cls, arch: MlpArchitecture) -> "WeightVector":
        return cls({k: np.zeros(s) for k, s in arch.layer_shapes.items()})

    def copy(self) -> "WeightVector":
        return WeightVector({k: v.copy() for k, v in self.layers.items()})


def init_weights(arch: MlpArchitecture, rng: np.random.Generator) -> WeightVector:
    """Glorot-uniform weights, zero biases."""
    h, i, c = arch.hidden_dim, arch.input_dim, arch.num_classes
    lim1 = np.sqrt(6.0 / (i + h))
    lim2 = np.sqrt(6.0 / (h + c))
    return WeightVector({
        "W1": rng.uniform(-lim1, lim1, size=(h, i)),
        "b1": np.zeros(h),
        "W2": rng.uniform(-lim2, lim2, size=(c, h)),
        "b2": np.zeros(c),
    })


def _check_inputs(weights: WeightVector, inputs) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    d_in = weights.layers["W1"].shape[1]
    if x.ndim != 2 or x.shape[1] != d_in:
        raise ConfigurationError(f"inputs of shape {x.shape} do not match input_dim={d_in}")
    return x


def _hidden(weights: WeightVector, x: np.ndarray):
    pre = x @ weights.layers["W1"].T + weights.layers["b1"]
    return pre, np.maximum(pre, 0.0)


def forward(weights: WeightVector, inputs) -> np.ndarray:
    """Logits ``W2 relu(W1 x + b1) + b2`` for every row of ``inputs``."""
    x = _check_inputs(weights, inputs)
    _, act = _hidden(weights, x)
    return act @ weights.layers["W2"].T + weights.layers["b2"]


@dataclass
class JacobianBlock:
    """Per-layer tensors of shape ``(N, C, d_layer)``.

    Entry ``(n, c, p)`` is the derivative of logit ``c`` of sample ``n`` with
    respect to parameter ``p`` of that layer (row-major over the layer shape).
    """

    layers: dict[str, np.ndarray]
    owner_client: int = 0

    @property
    def sample_count(self) -> int:
        return next(iter(self.layers.values())).shape[0]

    @property
    def num_classes(self) -> int:
        return next(iter(self.layers.values())).shape[1]

    def take_rows(self, rows) -> "JacobianBlock":
        return JacobianBlock({k: v[rows] for k, v in self.layers.items()}, self.owner_client)

    def flat(self) -> np.ndarray:
        """``(N, C, d)`` with layers concatenated in order."""
        return np.concatenate(list(self.layers.values()), axis=2)


def jacobian(weights: WeightVector, inputs, owner_client: int = 0) -> JacobianBlock:
    """Closed-form Jacobian of the logits; uses d relu(0) = 0."""
    x = _check_inputs(weights, inputs)
    n = x.shape[0]
    w2 = weights.layers["W2"]
    c, h = w2.shape
    pre, act = _hidden(weights, x)
    mask = (pre > 0.0).astype(np.float64)
    # g[n, c, h] = dz_c / d pre_h
    g = w2[None, :, :] * mask[:, None, :]
    j_w1 = (g[:, :, :, None] * x[:, None, None, :]).reshape(n, c, -1)
    eye = np.eye(c)
    j_w2 = (eye[None, :, :, None] * act[:, None, None, :]).reshape(n, c, c * h)
    j_b2 = np.broadcast_to(eye, (n, c, c)).copy()
    return JacobianBlock({"W1": j_w1, "b1": g, "W2": j_w2, "b2": j_b2}, owner_client)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def cross_entropy(logits, targets, atol: float = 1e-9) -> float:
    """Mean over rows of ``-sum_c target * log softmax(logit)``."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if logits.shape != targets.shape:
        raise ContractViolation(f"logits {logits.shape} vs targets {targets.shape}")
    if targets.size and (np.any(targets < -atol) or np.any(np.abs(targets.sum(axis=-1) - 1.0) > atol)):
        raise ContractViolation("target rows must be probability vectors")
    if logits.shape[0] == 0:
        return 0.0
    return float(-(targets * log_softmax(logits)).sum(axis=-1).mean())


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def accuracy(weights: WeightVector, inputs, labels) -> float:
    return float(np.mean(forward(weights, inputs).argmax(axis=1) == np.asarray(labels)))
