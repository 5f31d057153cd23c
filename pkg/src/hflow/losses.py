"""Adapter training objective: cross-entropy + beta-annealed KL.

The Jacobian-determinant term of the flow objective is identically zero
for a composition of reflections, so it appears here only as a constant
field in the loss breakdown.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import IndexOutOfRange, ValidationError

# Floor inside the log; avoids -inf on a saturated softmax.
PROB_CLAMP = 1e-12


@dataclass(frozen=True)
class BetaSchedule:
    """Linear anneal of the KL weight from ``beta_start`` down to ``beta_end``."""

    beta_start: float = 1.0
    beta_end: float = 0.0
    anneal_epochs: int = 50

    def __post_init__(self):
        if self.beta_start < 0.0 or self.beta_end < 0.0:
            raise ValidationError("beta endpoints must be >= 0")
        if self.beta_end > self.beta_start:
            raise ValidationError("beta_end must be <= beta_start (schedule decreases)")
        if self.anneal_epochs < 1:
            raise ValidationError("anneal_epochs must be a positive integer")


@dataclass(frozen=True)
class LossBreakdown:
    """Per-example objective terms; ``total == ce + beta * kl`` and ``jacobian == 0``."""

    ce: float
    kl: float
    beta: float
    jacobian: float
    total: float


def softmax(logits) -> np.ndarray:
    """Stable softmax (max-subtracted); entries positive, summing to 1."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def cross_entropy(probs, y: int) -> float:
    """One-hot cross entropy ``-ln probs[y]`` with the probability clamped away from 0."""
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 <= y < probs.shape[-1]:
        raise IndexOutOfRange(f"class index {y} outside [0, {probs.shape[-1]})")
    return float(-np.log(max(float(probs[y]), PROB_CLAMP)))


def beta_at(schedule: BetaSchedule, epoch: int) -> float:
    """KL weight at ``epoch``: linear from start to end, exactly constant afterwards."""
    if epoch >= schedule.anneal_epochs:
        return schedule.beta_end
    frac = epoch / schedule.anneal_epochs
    return schedule.beta_start - (schedule.beta_start - schedule.beta_end) * frac


def adapter_loss(logits, y: int, kl: float, beta: float) -> LossBreakdown:
    """Combine classification and KL terms: ``ce + beta * kl``.

    The flow's log-det-Jacobian contribution is identically zero
    (volume-preserving reflections), recorded as such.
    """
    if beta < 0.0:
        raise ValidationError(f"beta must be >= 0, got {beta}")
    ce = cross_entropy(softmax(logits), y)
    return LossBreakdown(ce=ce, kl=float(kl), beta=float(beta), jacobian=0.0,
                         total=ce + beta * float(kl))
