"""Doubly robust pseudo-outcome construction with propensity truncation.

D_i = (2A_i - 1)/g(A_i|W_i) * (Y_i - Qbar(A_i, W_i)) + Qbar(1, W_i) - Qbar(0, W_i)

The regression of D on the candidate effect modifiers is consistent for the
conditional treatment effect when either the outcome model or the propensity
model is correct (not necessarily both).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["PseudoOutcomeError", "NuisanceEstimates", "PseudoOutcome",
           "truncate_propensity", "pseudo_outcome"]


class PseudoOutcomeError(ValueError):
    pass


@dataclass(frozen=True)
class NuisanceEstimates:
    """Per-subject outcome predictions at both arms plus the propensity."""

    q0: np.ndarray
    q1: np.ndarray
    g1: np.ndarray
    truncation: tuple[float, float] | None = None

    def __post_init__(self):
        q0 = np.asarray(self.q0, dtype=float)
        q1 = np.asarray(self.q1, dtype=float)
        g1 = np.asarray(self.g1, dtype=float)
        n = q0.shape[0]
        if q1.shape != (n,) or g1.shape != (n,):
            raise PseudoOutcomeError("q0, q1, g1 must share one length")
        if self.truncation is not None:
            lo, hi = self.truncation
            if not (0 < lo < hi < 1):
                raise PseudoOutcomeError("truncation bounds need 0 < lo < hi < 1")
            if np.any(g1 < lo) or np.any(g1 > hi):
                raise PseudoOutcomeError("g1 violates the declared truncation bounds")
        if np.any(g1 <= 0.0) or np.any(g1 >= 1.0):
            raise PseudoOutcomeError("g1 must lie strictly inside (0, 1)")
        object.__setattr__(self, "q0", q0)
        object.__setattr__(self, "q1", q1)
        object.__setattr__(self, "g1", g1)


@dataclass(frozen=True)
class PseudoOutcome:
    d: np.ndarray
    provenance: NuisanceEstimates


def truncate_propensity(g1: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Clamp propensity values into [lo, hi]."""
    if not (0 < lo < hi < 1):
        raise PseudoOutcomeError("need 0 < lo < hi < 1")
    return np.clip(np.asarray(g1, dtype=float), lo, hi)


def pseudo_outcome(nuisance: NuisanceEstimates, A: np.ndarray,
                   Y: np.ndarray) -> PseudoOutcome:
    A = np.asarray(A, dtype=float)
    Y = np.asarray(Y, dtype=float)
    n = nuisance.q0.shape[0]
    if A.shape != (n,) or Y.shape != (n,):
        raise PseudoOutcomeError("A and Y must match the nuisance length")
    if not np.all((A == 0.0) | (A == 1.0)):
        raise PseudoOutcomeError("treatment must be 0/1")
    g_obs = np.where(A == 1.0, nuisance.g1, 1.0 - nuisance.g1)
    zero = np.nonzero(g_obs == 0.0)[0]
    if zero.size:
        raise PseudoOutcomeError(
            f"propensity for the observed arm is 0 in row {zero[0]}")
    q_obs = np.where(A == 1.0, nuisance.q1, nuisance.q0)
    d = (2.0 * A - 1.0) / g_obs * (Y - q_obs) + nuisance.q1 - nuisance.q0
    if not np.all(np.isfinite(d)):
        bad = int(np.nonzero(~np.isfinite(d))[0][0])
        raise PseudoOutcomeError(f"non-finite pseudo-outcome in row {bad}")
    return PseudoOutcome(d=d, provenance=nuisance)
