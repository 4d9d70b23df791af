"""Stage-wise annealed mixing of hard labels with temperature-softened logits."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ContractViolation
from .model import log_softmax, softmax


@dataclass(frozen=True)
class DistillSchedule:
    """Warm-up on hard labels, then cosine-annealed mixing and linear temperature.

    ``warm_forever`` pins every round to the warm-up values, which turns
    distillation off without touching the rest of the round.
    """

    total_rounds: int
    alpha_init: float = 1.0
    alpha_final: float = 0.3
    tau_init: float = 1.0
    tau_final: float = 3.0
    warmup_rounds: int | None = None
    warm_forever: bool = False

    def __post_init__(self):
        if self.warmup_rounds is None:
            warm = min(math.ceil(0.2 * self.total_rounds), max(self.total_rounds - 1, 0))
            object.__setattr__(self, "warmup_rounds", warm)
        self.validate()

    def validate(self):
        if self.total_rounds < 1:
            raise ConfigurationError("total_rounds must be >= 1")
        if not 0 <= self.warmup_rounds < self.total_rounds and not self.warm_forever:
            raise ConfigurationError(
                f"warmup_rounds={self.warmup_rounds} must satisfy 0 <= R_warm < R={self.total_rounds}"
            )
        if not (0.0 <= self.alpha_final <= self.alpha_init <= 1.0):
            raise ConfigurationError("need 0 <= alpha_final <= alpha_init <= 1")
        if not (1.0 <= self.tau_init <= self.tau_final):
            raise ConfigurationError("need 1 <= tau_init <= tau_final")

    def progress(self, k: int) -> float:
        return (k - self.warmup_rounds) / (self.total_rounds - self.warmup_rounds)


def schedule_at(sched: DistillSchedule, k: int) -> tuple[float, float]:
    """``(alpha, tau)`` for round ``k`` (1-based)."""
    if not 1 <= k <= sched.total_rounds:
        raise ContractViolation(f"round {k} outside [1, {sched.total_rounds}]")
    if sched.warm_forever or k <= sched.warmup_rounds:
        return 1.0, 1.0
    p = sched.progress(k)
    alpha = sched.alpha_final + 0.5 * (sched.alpha_init - sched.alpha_final) * (1.0 + math.cos(math.pi * p))
    tau = sched.tau_init + (sched.tau_final - sched.tau_init) * p
    return alpha, tau


def soft_labels(logits_agg, tau: float) -> np.ndarray:
    if tau < 1.0:
        raise ContractViolation(f"temperature must be >= 1, got {tau}")
    return softmax(np.asarray(logits_agg, dtype=np.float64) / tau)


@dataclass
class TargetMatrix:
    rows: np.ndarray
    alpha: float
    tau: float
    provenance: list[tuple[int, int]] | None = None


def build_target(hard, logits_agg, sched: DistillSchedule, k: int,
                 provenance=None) -> TargetMatrix:
    """``alpha * hard + (1 - alpha) * softmax(logits / tau)`` at round ``k``."""
    hard = np.asarray(hard, dtype=np.float64)
    logits_agg = np.asarray(logits_agg, dtype=np.float64)
    if hard.shape != logits_agg.shape:
        raise ContractViolation(f"hard labels {hard.shape} vs logits {logits_agg.shape}")
    if hard.size and (np.any((hard != 0.0) & (hard != 1.0)) or np.any(hard.sum(axis=1) != 1.0)):
        raise ContractViolation("hard labels must be one-hot rows")
    alpha, tau = schedule_at(sched, k)
    if alpha == 1.0:
        rows = hard.copy()
    else:
        rows = alpha * hard + (1.0 - alpha) * soft_labels(logits_agg, tau)
    return TargetMatrix(rows, alpha, tau, provenance)


def distill_objective(logits, hard, soft, alpha: float, tau: float) -> float:
    """Hard-label cross-entropy plus tau^2-scaled KL(soft || softmax(logits / tau)).

    Reported as a diagnostic only; training never differentiates it.
    """
    logits = np.asarray(logits, dtype=np.float64)
    ce = -(hard * log_softmax(logits)).sum(axis=1).mean()
    with np.errstate(divide="ignore", invalid="ignore"):
        log_soft = np.where(soft > 0, np.log(soft), 0.0)
    kl = (soft * (log_soft - log_softmax(logits / tau))).sum(axis=1).mean()
    return float(alpha * ce + (1.0 - alpha) * tau * tau * kl)
