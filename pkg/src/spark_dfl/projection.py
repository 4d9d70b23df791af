"""Layer-seeded Gaussian sketches of Jacobian blocks and their back-projection."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache

import numpy as np

from . import prng
from .errors import ConfigurationError, ContractViolation
from .model import JacobianBlock, WeightVector, jacobian


class ProjectionMode(str, Enum):
    GAUSSIAN = "gaussian"
    IDENTITY = "identity"


class Allocation(str, Enum):
    """How the sketch width is spread over layers.

    ``proportional`` splits a total budget ``proj_dim`` across layers in
    proportion to their sizes, so the Jacobian payload shrinks by exactly
    ``proj_dim / d``.  ``per_layer`` gives every layer ``proj_dim`` columns.
    """

    PROPORTIONAL = "proportional"
    PER_LAYER = "per_layer"


class Codec(str, Enum):
    F64 = "f64"
    F32 = "f32"
    F16 = "f16"
    I8 = "i8"

    @property
    def itemsize(self) -> int:
        return {"f64": 8, "f32": 4, "f16": 2, "i8": 1}[self.value]


@dataclass(frozen=True)
class ProjectionSpec:
    global_seed: int = 0
    proj_dim: int = 1000
    mode: ProjectionMode = ProjectionMode.GAUSSIAN
    allocation: Allocation = Allocation.PROPORTIONAL

    def __post_init__(self):
        object.__setattr__(self, "mode", ProjectionMode(self.mode))
        object.__setattr__(self, "allocation", Allocation(self.allocation))
        if self.mode is ProjectionMode.GAUSSIAN and int(self.proj_dim) < 1:
            raise ConfigurationError("proj_dim must be >= 1")

    @property
    def identity(self) -> bool:
        return self.mode is ProjectionMode.IDENTITY

    def seed_for(self, layer_name: str) -> int:
        return prng.layer_seed(self.global_seed, layer_name)

    def layer_seeds(self, layer_names) -> dict[str, int]:
        return {name: self.seed_for(name) for name in layer_names}

    def widths(self, layer_dims: dict[str, int]) -> dict[str, int]:
        """Sketch width per layer."""
        if self.identity:
            return {k: int(v) for k, v in layer_dims.items()}
        if self.allocation is Allocation.PER_LAYER:
            return {k: int(self.proj_dim) for k in layer_dims}
        return allocate_widths(self.proj_dim, layer_dims)


def allocate_widths(budget: int, layer_dims: dict[str, int]) -> dict[str, int]:
    """Largest-remainder split of ``budget`` columns, at least one per layer."""
    names = list(layer_dims)
    if budget < len(names):
        raise ConfigurationError(f"proj_dim={budget} is smaller than the number of layers ({len(names)})")
    dims = np.array([layer_dims[n] for n in names], dtype=np.float64)
    spare = budget - len(names)
    share = spare * dims / dims.sum()
    base = np.floor(share).astype(np.int64)
    left = spare - int(base.sum())
    # ties go to the earlier layer
    order = sorted(range(len(names)), key=lambda i: (-(share[i] - base[i]), i))
    for i in order[:left]:
        base[i] += 1
    return {n: int(b) + 1 for n, b in zip(names, base)}


@lru_cache(maxsize=16)
def _gaussian_matrix(seed: int, d_layer: int, k: int) -> np.ndarray:
    m = prng.normal_stream(seed, d_layer * k).reshape(d_layer, k)
    m *= 1.0 / math.sqrt(k)
    m.setflags(write=False)
    return m


def generate_projection(spec: ProjectionSpec, layer: str, d_layer: int,
                        width: int | None = None) -> np.ndarray:
    """The ``d_layer x k`` matrix for ``layer``; entries i.i.d. N(0, 1/k).

    ``k`` is ``width`` when given, else ``spec.proj_dim``.  The matrix is
    filled row-major from the layer's normal stream, cached, and returned
    read-only.
    """
    if d_layer < 1:
        raise ConfigurationError("layer dimension must be >= 1")
    if spec.identity:
        return np.eye(d_layer)
    k = int(spec.proj_dim if width is None else width)
    if k < 1:
        raise ConfigurationError("projection width must be >= 1")
    return _gaussian_matrix(spec.seed_for(layer), int(d_layer), k)


def orthogonal_projector(p: np.ndarray) -> np.ndarray:
    """``P (P^T P)^{-1} P^T``: orthogonal projector onto Range(P). Diagnostics only."""
    return p @ np.linalg.solve(p.T @ p, p.T)


@dataclass
class CompressedJacobian:
    """Sketched Jacobian (``N x C x k`` per layer) plus the per-row data a peer needs."""

    layers: dict[str, np.ndarray]
    owner_client: int = 0
    sample_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    codec: Codec = Codec.F64
    logits: np.ndarray | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.codec = Codec(self.codec)
        self.sample_indices = np.asarray(self.sample_indices, dtype=np.int64)
        if self.sample_indices.size > 1 and np.any(np.diff(self.sample_indices) <= 0):
            raise ContractViolation("sample_indices must be strictly increasing")

    @property
    def sample_count(self) -> int:
        return next(iter(self.layers.values())).shape[0]

    @property
    def num_classes(self) -> int:
        return next(iter(self.layers.values())).shape[1]

    @property
    def widths(self) -> dict[str, int]:
        return {k: v.shape[2] for k, v in self.layers.items()}

    @property
    def payload_bytes(self) -> int:
        return sum(v.size for v in self.layers.values()) * self.codec.itemsize

    @property
    def byte_size(self) -> int:
        from .wire import message_size

        return message_size(self)


def compress(jac: JacobianBlock, spec: ProjectionSpec, layer_names=None) -> CompressedJacobian:
    """Contract each layer's parameter axis with its projection matrix."""
    if layer_names is not None and tuple(layer_names) != tuple(jac.layers):
        raise ConfigurationError(
            f"Jacobian layers {tuple(jac.layers)} do not match projection layers {tuple(layer_names)}"
        )
    widths = spec.widths({k: v.shape[2] for k, v in jac.layers.items()})
    out = {}
    for name, block in jac.layers.items():
        if spec.identity:
            out[name] = np.array(block, dtype=np.float64, copy=True)
        else:
            p = generate_projection(spec, name, block.shape[2], widths[name])
            out[name] = block @ p
    return CompressedJacobian(
        out, owner_client=jac.owner_client,
        sample_indices=np.arange(jac.sample_count), codec=Codec.F64,
    )


def back_project(delta: dict[str, np.ndarray], spec: ProjectionSpec,
                 layer_dims: dict[str, int]) -> dict[str, np.ndarray]:
    """Map a sketch-space update to parameter space with the plain matrix ``P``."""
    widths = spec.widths(layer_dims)
    out = {}
    for name, d_layer in layer_dims.items():
        vec = np.asarray(delta[name], dtype=np.float64)
        if vec.shape != (widths[name],):
            raise ConfigurationError(f"{name}: update of shape {vec.shape}, expected ({widths[name]},)")
        if spec.identity:
            out[name] = vec.copy()
        else:
            out[name] = generate_projection(spec, name, d_layer, widths[name]) @ vec
    return out


def compress_mlp(weights: WeightVector, inputs, spec: ProjectionSpec,
                 owner_client: int = 0) -> CompressedJacobian:
    """Same result as ``compress(jacobian(weights, inputs), spec)`` without
    materialising the full Jacobian.

    Uses the rank structure of each layer's derivative: the ``W1`` block is an
    outer product of back-propagated output weights and the input, the ``W2``
    block is the hidden activation placed on the class diagonal.
    """
    x = np.asarray(inputs, dtype=np.float64)
    if spec.identity:
        return compress(jacobian(weights, x, owner_client), spec)
    arch = weights.architecture
    h, d_in, c = arch.hidden_dim, arch.input_dim, arch.num_classes
    widths = spec.widths(arch.layer_dims)
    pre = x @ weights.layers["W1"].T + weights.layers["b1"]
    act = np.maximum(pre, 0.0)
    g = weights.layers["W2"][None, :, :] * (pre > 0.0)[:, None, :]
    p_w1 = generate_projection(spec, "W1", h * d_in, widths["W1"]).reshape(h, d_in, -1)
    p_b1 = generate_projection(spec, "b1", h, widths["b1"])
    p_w2 = generate_projection(spec, "W2", c * h, widths["W2"]).reshape(c, h, -1)
    p_b2 = generate_projection(spec, "b2", c, widths["b2"])
    n = x.shape[0]
    layers = {
        "W1": np.einsum("nch,nhk->nck", g, np.einsum("nd,hdk->nhk", x, p_w1, optimize=True), optimize=True),
        "b1": g @ p_b1,
        "W2": np.einsum("nh,chk->nck", act, p_w2, optimize=True),
        "b2": np.broadcast_to(p_b2, (n, c, p_b2.shape[1])).copy(),
    }
    return CompressedJacobian(layers, owner_client=owner_client,
                              sample_indices=np.arange(n), codec=Codec.F64)


def choose_rows(n: int, fraction: float, rng_seed) -> np.ndarray:
    """Sorted indices of ``ceil(fraction * n)`` rows drawn without replacement."""
    if not 0.0 < fraction <= 1.0:
        raise ContractViolation(f"fraction must lie in (0, 1], got {fraction}")
    if n == 0:
        raise ContractViolation("cannot sample rows from an empty batch")
    keep = math.ceil(round(fraction * n, 9))
    if keep >= n:
        return np.arange(n)
    return np.sort(np.random.default_rng(rng_seed).choice(n, size=keep, replace=False))


def sample_rows(jac: JacobianBlock, logits: np.ndarray, fraction: float, rng_seed,
                labels=None):
    """Keep ``ceil(fraction * N)`` rows chosen uniformly without replacement.

    The same rows are taken from the Jacobian, the logits and the labels.
    Returns ``(jacobian, logits, labels, sample_indices)`` with indices sorted.
    """
    idx = choose_rows(jac.sample_count, fraction, rng_seed)
    lab = None if labels is None else np.asarray(labels)[idx]
    return jac.take_rows(idx), np.asarray(logits)[idx], lab, idx


def jacobian_reduction(spec: ProjectionSpec, layer_dims: dict[str, int]) -> float:
    """Fractional reduction ``1 - sum_l k_l / d`` of the Jacobian payload."""
    return 1.0 - sum(spec.widths(layer_dims).values()) / sum(layer_dims.values())


def compression_ratio(spec: ProjectionSpec, layer_dims: dict[str, int]) -> float:
    return 1.0 - jacobian_reduction(spec, layer_dims)
