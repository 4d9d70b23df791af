"""Empirical NTK on aggregated sketches, kernel-driven prediction evolution,
and the sketch-space weight update.

Kernel rows are flattened sample-major, class-minor: row ``n * C + c``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import ContractViolation, ProtocolError, ResourceError
from .model import cross_entropy, one_hot, softmax
from .projection import CompressedJacobian

DEFAULT_MEMORY_CAP = 2 * 1024 ** 3
DIVERGENCE_LIMIT = 1e6


@dataclass
class AggregatedSketch:
    layers: dict[str, np.ndarray]
    provenance: list[tuple[int, int]]
    logits: np.ndarray
    labels: np.ndarray
    train_rows: np.ndarray
    val_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def row_count(self) -> int:
        return len(self.provenance)

    @property
    def num_classes(self) -> int:
        return self.logits.shape[1]

    def features(self, rows) -> np.ndarray:
        """``(len(rows) * C, sum_l k_l)`` matrix of flattened sketch rows."""
        rows = np.asarray(rows, dtype=np.int64)
        c = self.num_classes
        blocks = [v[rows].reshape(rows.size * c, v.shape[2]) for v in self.layers.values()]
        return np.concatenate(blocks, axis=1) if blocks else np.zeros((rows.size * c, 0))


def aggregate(self_sketch: CompressedJacobian, neighbor_sketches: Iterable[CompressedJacobian],
              val_rows=None) -> AggregatedSketch:
    """Stack the client's own rows first, then neighbours by ascending id.

    ``val_rows`` indexes the client's own rows that are held out for step
    selection; every other row is a training row.  Each sketch must carry
    its logits and labels.
    """
    neighbors = sorted(neighbor_sketches, key=lambda s: s.owner_client)
    sketches = [self_sketch, *neighbors]
    widths = self_sketch.widths
    for s in sketches:
        if s.widths != widths or list(s.layers) != list(widths):
            raise ProtocolError(
                f"client {s.owner_client} sent layer table {s.widths}, expected {widths}"
            )
        if s.logits is None or s.labels is None:
            raise ProtocolError(f"client {s.owner_client} sent no logits or labels")
    layers = {name: np.concatenate([s.layers[name] for s in sketches], axis=0) for name in widths}
    provenance = [(s.owner_client, int(i)) for s in sketches for i in s.sample_indices]
    n_agg = len(provenance)
    val = np.zeros(0, dtype=np.int64) if val_rows is None else np.unique(np.asarray(val_rows, dtype=np.int64))
    if val.size and (val.min() < 0 or val.max() >= self_sketch.sample_count):
        raise ContractViolation("validation rows must come from the client's own sample")
    train = np.setdiff1d(np.arange(n_agg), val)
    return AggregatedSketch(
        layers=layers,
        provenance=provenance,
        logits=np.concatenate([s.logits for s in sketches], axis=0),
        labels=np.concatenate([s.labels for s in sketches], axis=0),
        train_rows=train,
        val_rows=val,
    )


class KernelMatrix:
    """Training kernel ``F F^T`` and cross kernel ``F_val F^T``.

    The dense blocks are materialised on first access.  ``matvec`` multiplies
    through the feature factors instead when they are narrower than the
    kernel, which gives the same product up to roundoff.
    """

    def __init__(self, train_features: np.ndarray, val_features: np.ndarray):
        self.train_features = train_features
        self.val_features = val_features
        self._train = None
        self._cross = None

    @classmethod
    def from_dense(cls, train: np.ndarray, cross: np.ndarray | None = None) -> "KernelMatrix":
        km = cls(None, None)
        km._train = np.asarray(train, dtype=np.float64)
        km._cross = np.zeros((0, km._train.shape[0])) if cross is None else np.asarray(cross, dtype=np.float64)
        return km

    @property
    def train(self) -> np.ndarray:
        if self._train is None:
            f = self.train_features
            self._train = f @ f.T
        return self._train

    @property
    def cross(self) -> np.ndarray:
        if self._cross is None:
            self._cross = self.val_features @ self.train_features.T
        return self._cross

    @property
    def size(self) -> int:
        return self.train.shape[0] if self.train_features is None else self.train_features.shape[0]

    def _factored(self) -> bool:
        f = self.train_features
        return f is not None and 2 * f.shape[1] < f.shape[0]

    def matvec(self, r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """``(K r, K_cross r)``."""
        if self._factored():
            z = self.train_features.T @ r
            return self.train_features @ z, self.val_features @ z
        return self.train @ r, self.cross @ r


def build_kernel(agg: AggregatedSketch, memory_cap: int = DEFAULT_MEMORY_CAP) -> KernelMatrix:
    """``K = F F^T`` over training rows plus the validation-by-train cross block."""
    n_tr = agg.train_rows.size * agg.num_classes
    n_va = agg.val_rows.size * agg.num_classes
    need = 8 * (n_tr * n_tr + n_va * n_tr)
    if need > memory_cap:
        raise ResourceError(
            f"kernel needs {need / 2**20:.1f} MiB for {n_tr} rows, above the cap of "
            f"{memory_cap / 2**20:.1f} MiB; lower the batch size or the sampling fraction"
        )
    return KernelMatrix(agg.features(agg.train_rows), agg.features(agg.val_rows))


@dataclass
class EvolutionResult:
    train_trajectory: np.ndarray | None
    val_trajectory: np.ndarray | None
    val_losses: np.ndarray
    t_star: int
    residual_sum: np.ndarray
    steps_run: int
    truncated: bool = False


def _diverged(*arrays) -> bool:
    return any(a.size and not (np.all(np.isfinite(a)) and np.max(np.abs(a)) <= DIVERGENCE_LIMIT)
               for a in arrays)


def evolve(kernel: KernelMatrix, f0_train, f0_val, y_target, eta: float, steps: int,
           val_labels=None, keep_trajectory: bool = True) -> EvolutionResult:
    """Run ``f <- f + eta K (Y - softmax(f))`` for ``steps`` iterations.

    Validation predictions move through the cross kernel with the same
    training residuals.  The selected step minimises hard-label validation
    cross-entropy (earliest step on ties); with no validation rows the last
    finite step is used.  ``residual_sum`` holds
    ``sum_{s < t*} softmax(f_s) - t* Y`` on training rows.
    """
    if eta <= 0:
        raise ContractViolation("eta must be positive")
    if steps < 1:
        raise ContractViolation("need at least one evolution step")
    f = np.array(f0_train, dtype=np.float64)
    g = np.array(f0_val, dtype=np.float64)
    y = np.asarray(y_target, dtype=np.float64)
    if y.shape != f.shape:
        raise ContractViolation(f"target {y.shape} does not match train predictions {f.shape}")
    n, c = f.shape
    has_val = g.shape[0] > 0
    y_val = one_hot(val_labels, c) if has_val else None
    y_flat = y.ravel()

    train_traj = [f.copy()] if keep_trajectory else None
    val_traj = [g.copy()] if keep_trajectory else None
    losses = []
    cum = np.zeros_like(f)
    best_loss, t_star, best_resid = np.inf, 1, None
    truncated = False
    steps_run = 0
    for t in range(steps):
        sig = softmax(f)
        cum += sig
        resid = y_flat - sig.ravel()
        k_r, kx_r = kernel.matvec(resid)
        f_next = f + eta * k_r.reshape(n, c)
        g_next = g + eta * kx_r.reshape(g.shape) if has_val else g
        if _diverged(f_next, g_next):
            truncated = True
            if t == 0:
                best_resid = cum - y
            break
        f, g = f_next, g_next
        steps_run = t + 1
        if keep_trajectory:
            train_traj.append(f.copy())
            val_traj.append(g.copy())
        if has_val:
            loss = cross_entropy(g, y_val)
            losses.append(loss)
            if loss < best_loss:
                best_loss, t_star, best_resid = loss, t + 1, cum - (t + 1) * y
        else:
            t_star, best_resid = t + 1, cum - (t + 1) * y
    return EvolutionResult(
        train_trajectory=np.stack(train_traj) if keep_trajectory else None,
        val_trajectory=np.stack(val_traj) if keep_trajectory else None,
        val_losses=np.asarray(losses),
        t_star=t_star,
        residual_sum=best_resid,
        steps_run=steps_run,
        truncated=truncated,
    )


def compressed_update(agg: AggregatedSketch, evo: EvolutionResult, eta: float) -> dict[str, np.ndarray]:
    """``-(eta / N_agg) J^T R`` per layer, contracting training rows and classes.

    ``N_agg`` counts every aggregated row, validation rows included, even
    though only training rows enter the contraction.
    """
    rows = agg.train_rows
    resid = evo.residual_sum
    if resid.shape != (rows.size, agg.num_classes):
        raise ContractViolation(f"residual {resid.shape} does not match {rows.size} training rows")
    scale = -eta / max(agg.row_count, 1)
    return {name: scale * np.einsum("nck,nc->k", block[rows], resid)
            for name, block in agg.layers.items()}


def split_validation(n_self: int, val_fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Sorted indices of the client's own rows held out for step selection."""
    if n_self < 2 or val_fraction <= 0:
        return np.zeros(0, dtype=np.int64)
    n_val = min(max(int(round(val_fraction * n_self)), 1), n_self - 1)
    return np.sort(rng.choice(n_self, size=n_val, replace=False))

