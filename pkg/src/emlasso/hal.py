"""Highly adaptive LASSO: indicator bases over observed support + CV lasso.

The basis contains, for every coordinate subset s with |s| <= max_order and
every observed knot vector, the column prod_{k in s} I(v_k >= knot_k).
Duplicate columns and constants are removed; for each retained column the
stored knot is the componentwise minimum over its support rows, which is the
smallest threshold realizing the same training column and makes out-of-sample
evaluation well defined.

Candidate enumeration order is deterministic: subsets by (size, lexicographic
coordinate order), then knot vectors in lexicographically sorted order of the
unique observed rows.  This makes retained columns independent of row order.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np
from scipy.special import expit

from .lassocd import LassoProblem, cv_select_lambda, lambda_grid, solve_path

__all__ = ["HalError", "HalBasis", "HalFit", "build_hal_basis", "fit_hal",
           "hal_predict", "auto_max_order"]

# Mirrors the common R default of dropping to pairwise bases once the
# covariate count gets large; keeps the HD basis a few thousand columns.
AUTO_ORDER_CUTOFF = 20


class HalError(ValueError):
    pass


def auto_max_order(n_covariates: int) -> int:
    return 3 if n_covariates < AUTO_ORDER_CUTOFF else 2


@dataclass(frozen=True)
class HalBasis:
    columns: np.ndarray                     # (n, m) 0/1 matrix, float
    subsets: tuple[tuple[int, ...], ...]    # coordinate subset per column
    knots: tuple[tuple[float, ...], ...]    # knot values per column
    dedup_map: dict                         # (subset, knot tuple) -> column or -1

    @property
    def m(self) -> int:
        return self.columns.shape[1]


@dataclass(frozen=True)
class HalFit:
    subsets: tuple[tuple[int, ...], ...]
    knots: tuple[tuple[float, ...], ...]
    intercept: float
    coefficients: np.ndarray
    chosen_lambda: float
    family: str
    n_covariates: int


def build_hal_basis(W: np.ndarray, max_order: int) -> HalBasis:
    W = np.asarray(W, dtype=float)
    if W.ndim != 2 or W.shape[0] == 0:
        raise HalError("need a nonempty 2-d covariate matrix")
    n, d = W.shape
    if not (1 <= max_order <= d):
        raise HalError(f"max_order must be in [1, {d}], got {max_order}")
    cols = []
    subsets_out = []
    knots_out = []
    dedup: dict = {}
    seen: dict = {}
    for size in range(1, max_order + 1):
        for subset in combinations(range(d), size):
            sub = W[:, subset]
            uniq = np.unique(sub, axis=0)  # lexicographically sorted knots
            # all indicator columns for this subset at once: (n, u)
            ind = np.all(sub[:, None, :] >= uniq[None, :, :], axis=2)
            for u in range(uniq.shape[0]):
                knot = tuple(uniq[u])
                col = ind[:, u]
                ones = int(col.sum())
                if ones == 0 or ones == n:
                    dedup[(subset, knot)] = -1
                    continue
                key = col.tobytes()
                if key in seen:
                    dedup[(subset, knot)] = seen[key]
                    continue
                idx = len(cols)
                seen[key] = idx
                dedup[(subset, knot)] = idx
                cols.append(col.astype(float))
                subsets_out.append(subset)
                # minimal support point realizing this column
                knots_out.append(tuple(sub[col].min(axis=0)))
    columns = np.column_stack(cols) if cols else np.empty((n, 0))
    return HalBasis(columns=columns, subsets=tuple(subsets_out),
                    knots=tuple(knots_out), dedup_map=dedup)


def fit_hal(W: np.ndarray, y: np.ndarray, family: str = "linear",
            max_order: int = 3, K: int = 10, seed=0,
            n_lambdas: int = 100, lambda_ratio: float | None = None) -> HalFit:
    """Basis expansion, CV over the lambda path, refit at the chosen lambda.

    lambda_ratio=None picks 1e-4 when rows exceed basis columns and 1e-2
    otherwise (the usual path floor once the basis outgrows the sample).
    """
    W = np.asarray(W, dtype=float)
    basis = build_hal_basis(W, max_order)
    if basis.m == 0:
        raise HalError("no usable basis column (all covariates constant)")
    problem = LassoProblem(X=basis.columns, y=np.asarray(y, dtype=float),
                           penalty_factors=np.ones(basis.m), family=family)
    if lambda_ratio is None:
        lambda_ratio = 1e-4 if problem.n > basis.m else 1e-2
    grid = lambda_grid(problem, n_lambdas=n_lambdas, ratio=lambda_ratio)
    cv = cv_select_lambda(problem, K=K, grid=grid, rng_seed=seed)
    # refit on the full data, warm-starting down the grid prefix: a cold
    # solve deep in the path is far slower than walking to it
    prefix = grid[grid >= cv.chosen_lambda]
    sol = solve_path(problem, prefix)[-1]
    if not sol.converged:
        raise HalError(f"final refit failed KKT verification "
                       f"(violation {sol.kkt_violation:.2e})")
    return HalFit(subsets=basis.subsets, knots=basis.knots,
                  intercept=sol.intercept, coefficients=sol.coefficients,
                  chosen_lambda=cv.chosen_lambda, family=family,
                  n_covariates=W.shape[1])


def _evaluate_basis(fit: HalFit, W_new: np.ndarray) -> np.ndarray:
    W_new = np.asarray(W_new, dtype=float)
    if W_new.ndim != 2 or W_new.shape[1] != fit.n_covariates:
        raise HalError(f"expected {fit.n_covariates} covariate columns")
    n = W_new.shape[0]
    eta = np.full(n, fit.intercept)
    for j, (subset, knot) in enumerate(zip(fit.subsets, fit.knots)):
        b = fit.coefficients[j]
        if b == 0.0:
            continue
        col = np.all(W_new[:, subset] >= np.asarray(knot), axis=1)
        eta += b * col
    return eta


def hal_predict(fit: HalFit, W_new: np.ndarray) -> np.ndarray:
    """Evaluate the stored indicator tags at new points; expit for logistic."""
    eta = _evaluate_basis(fit, W_new)
    return expit(eta) if fit.family == "logistic" else eta
