"""Per-client Nesterov-style momentum applied to back-projected updates."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ContractViolation


@dataclass
class MomentumState:
    velocity: np.ndarray
    mu: float = 0.9

    def __post_init__(self):
        if not 0.0 <= self.mu < 1.0:
            raise ConfigurationError(f"momentum must lie in [0, 1), got {self.mu}")
        self.velocity = np.asarray(self.velocity, dtype=np.float64)

    @classmethod
    def zeros(cls, dim: int, mu: float = 0.9) -> "MomentumState":
        return cls(np.zeros(dim), mu)


def momentum_step(state: MomentumState, w: np.ndarray, delta: np.ndarray):
    """Return ``(state', w')`` with ``v' = mu v + dw`` and ``w' = w + mu v' + dw``.

    The raw update enters twice, once through the velocity and once directly.
    With ``mu == 0`` this is exactly ``w + dw``.
    """
    w = np.asarray(w, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if w.shape != delta.shape or w.shape != state.velocity.shape:
        raise ContractViolation(
            f"shape mismatch: w {w.shape}, update {delta.shape}, velocity {state.velocity.shape}"
        )
    if state.mu == 0.0:
        return MomentumState(delta.copy(), 0.0), w + delta
    v = state.mu * state.velocity + delta
    return MomentumState(v, state.mu), w + state.mu * v + delta


def effective_step(state: MomentumState, delta: np.ndarray) -> np.ndarray:
    """Displacement ``(1 + mu) dw + mu^2 v`` that the next step would apply."""
    return (1.0 + state.mu) * delta + state.mu ** 2 * state.velocity
