"""Ordinary least squares and IRLS logistic regression.

These back the parametric nuisance models, the pilot regression that feeds
the adaptive weights, and the plain linear-model comparators.  Both fitters
fail loudly on rank deficiency instead of falling back to a pseudo-inverse:
downstream selective inference needs (X'X)^{-1} to actually exist.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

__all__ = [
    "LinModError",
    "RankDeficientError",
    "SeparationError",
    "LinearFit",
    "LogisticFit",
    "fit_ols",
    "fit_logistic",
    "predict_linear",
    "predict_probability",
]

RANK_TOL = 1e-10
IRLS_MAX_ITER = 100
IRLS_TOL = 1e-8
IRLS_WEIGHT_CLAMP = 1e-10
DIVERGENCE_BOUND = 30.0


class LinModError(ValueError):
    """Base error for regression fitting problems."""


class RankDeficientError(LinModError):
    def __init__(self, column: int):
        self.column = column
        super().__init__(f"design is rank deficient (dependent column index {column})")


class SeparationError(LinModError):
    """Logistic likelihood is unbounded (detected via diverging coefficients)."""


@dataclass(frozen=True)
class LinearFit:
    coefficients: np.ndarray
    residual_variance: float      # SSR / (n - k), k = column count
    gram_inverse: np.ndarray      # (X'X)^{-1}
    term_names: tuple[str, ...]


@dataclass(frozen=True)
class LogisticFit:
    coefficients: np.ndarray
    converged: bool
    iterations: int
    term_names: tuple[str, ...]


def _cholesky_or_fail(gram: np.ndarray) -> np.ndarray:
    """Cholesky factor of a Gram matrix, reporting the first dependent column.

    A pivot below RANK_TOL times the largest diagonal entry marks the column
    where the factorization loses rank.
    """
    k = gram.shape[0]
    tol = RANK_TOL * max(np.max(np.diag(gram)), 1e-300)
    L = np.zeros_like(gram)
    for j in range(k):
        d = gram[j, j] - L[j, :j] @ L[j, :j]
        if d <= tol:
            raise RankDeficientError(j)
        L[j, j] = np.sqrt(d)
        if j + 1 < k:
            L[j + 1:, j] = (gram[j + 1:, j] - L[j + 1:, :j] @ L[j, :j]) / L[j, j]
    return L


def _solve_spd(gram: np.ndarray, rhs: np.ndarray):
    L = _cholesky_or_fail(gram)
    z = np.linalg.solve(L, rhs)
    return np.linalg.solve(L.T, z), L


def fit_ols(X: np.ndarray, y: np.ndarray, term_names=None) -> LinearFit:
    """Least-squares fit with unbiased residual variance and (X'X)^{-1}."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, k = X.shape
    if y.shape != (n,):
        raise LinModError(f"y has length {y.shape}, design has {n} rows")
    if n < k:
        raise LinModError(f"need at least as many rows ({n}) as columns ({k})")
    gram = X.T @ X
    beta, L = _solve_spd(gram, X.T @ y)
    Linv = np.linalg.solve(L, np.eye(k))
    gram_inv = Linv.T @ Linv
    resid = y - X @ beta
    dof = n - k
    sigma2 = float(resid @ resid / dof) if dof > 0 else 0.0
    names = tuple(term_names) if term_names is not None else tuple(
        f"x{j}" for j in range(k))
    return LinearFit(coefficients=beta, residual_variance=sigma2,
                     gram_inverse=gram_inv, term_names=names)


def fit_logistic(X: np.ndarray, y: np.ndarray, max_iter: int = IRLS_MAX_ITER,
                 tol: float = IRLS_TOL, term_names=None) -> LogisticFit:
    """IRLS fit of a Bernoulli GLM with logit link.

    Raises SeparationError when any coefficient exceeds DIVERGENCE_BOUND,
    the classic signature of (quasi-)separated data.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, k = X.shape
    if y.shape != (n,):
        raise LinModError("y length does not match design rows")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise LinModError("logistic response must be 0/1")
    if n < k:
        raise LinModError(f"need at least as many rows ({n}) as columns ({k})")
    beta = np.zeros(k)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        eta = X @ beta
        p = expit(eta)
        w = np.clip(p * (1.0 - p), IRLS_WEIGHT_CLAMP, None)
        # working response: eta + (y - p)/w
        z = eta + (y - p) / w
        Xw = X * w[:, None]
        beta_new, _ = _solve_spd(X.T @ Xw, Xw.T @ z)
        step = np.max(np.abs(beta_new - beta))
        beta = beta_new
        if np.max(np.abs(beta)) > DIVERGENCE_BOUND:
            raise SeparationError(
                f"coefficient magnitude exceeded {DIVERGENCE_BOUND}; data look separated")
        if step < tol:
            converged = True
            break
    names = tuple(term_names) if term_names is not None else tuple(
        f"x{j}" for j in range(k))
    return LogisticFit(coefficients=beta, converged=converged, iterations=it,
                       term_names=names)


def _check_dims(fit, X):
    X = np.asarray(X, dtype=float)
    k = fit.coefficients.shape[0]
    if X.ndim != 2 or X.shape[1] != k:
        raise LinModError(f"design has {X.shape[1] if X.ndim == 2 else '?'} columns, "
                          f"fit expects {k}")
    return X


def predict_linear(fit: LinearFit, X: np.ndarray) -> np.ndarray:
    return _check_dims(fit, X) @ fit.coefficients


def predict_probability(fit: LogisticFit, X: np.ndarray) -> np.ndarray:
    return expit(_check_dims(fit, X) @ fit.coefficients)
