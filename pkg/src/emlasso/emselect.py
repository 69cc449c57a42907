"""Effect-modifier selection pipeline.

Steps: fit the outcome and treatment nuisance models (parametric formulas or
HAL), build the doubly robust pseudo-outcome, run the pilot regression on all
candidates, turn pilot coefficients into adaptive penalty weights, pick
lambda by cross-validation, solve the weighted LASSO, and attach selective
confidence intervals for the selected candidates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import hal as halmod
from .drpseudo import NuisanceEstimates, pseudo_outcome, truncate_propensity
from .lassocd import (ConvergenceError, LassoProblem, LassoSolution,
                      cv_select_lambda, lambda_grid, solve_weighted_lasso)
from .linmod import (LinearFit, fit_logistic, fit_ols, predict_linear,
                     predict_probability)
from .selinf import SelectiveInterval, selective_intervals
from .tabular import EmCandidateSet, ModelSpec, ObservationTable, build_design

__all__ = [
    "PipelineError",
    "HalModel",
    "PipelineOptions",
    "EmFit",
    "PipelineResult",
    "pilot_ols",
    "adaptive_weights",
    "select_effect_modifiers",
    "estimate_cate",
    "run_pipeline",
]


class PipelineError(RuntimeError):
    """Wraps a failure with the pipeline stage where it happened."""

    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {cause}")


@dataclass(frozen=True)
class HalModel:
    """Marker requesting HAL nuisance estimation.

    max_order=None picks 3 below 20 covariates and 2 at or above, matching
    the usual package default the basis size is calibrated to.
    """

    max_order: int | None = None


@dataclass(frozen=True)
class PipelineOptions:
    gamma: float = 1.0
    alpha: float = 0.05
    trunc: tuple[float, float] | None = None
    cv_folds: int = 10
    n_lambdas: int = 100
    lambda_ratio: float = 1e-4
    seed: int | tuple = 0
    zero_tol: float | None = None   # None: 1e-8 * max(1, |pilot|_inf)

    def seed_tuple(self) -> tuple:
        return self.seed if isinstance(self.seed, tuple) else (self.seed,)


@dataclass(frozen=True)
class EmFit:
    candidate_names: tuple[str, ...]
    pilot_coefficients: np.ndarray    # per candidate, intercept excluded
    pilot_sigma2: float
    gamma: float
    weights: np.ndarray               # 1/|pilot|^gamma, +inf below zero_tol
    lam: float
    beta0: float
    beta: np.ndarray                  # per candidate
    active_set: np.ndarray            # candidate indices with beta != 0
    signs: np.ndarray

    @property
    def active_names(self) -> tuple[str, ...]:
        return tuple(self.candidate_names[j] for j in self.active_set)


@dataclass(frozen=True)
class PipelineResult:
    fit: EmFit
    intervals: list[SelectiveInterval]
    nuisance: NuisanceEstimates
    pseudo: np.ndarray
    cv_lambda: float
    diagnostics: dict = field(default_factory=dict)


def pilot_ols(d: np.ndarray, V: np.ndarray, names=None) -> LinearFit:
    """Full-model OLS of the pseudo-outcome on intercept + all candidates."""
    d = np.asarray(d, dtype=float)
    V = np.asarray(V, dtype=float)
    n, p = V.shape
    if n <= p + 1:
        raise ValueError(
            f"pilot regression needs n > p + 1 (n={n}, p={p}); "
            "a high-dimensional pilot is not supported")
    X = np.column_stack([np.ones(n), V])
    nm = ["(intercept)"] + list(names if names is not None else
                                (f"V{j+1}" for j in range(p)))
    return fit_ols(X, d, term_names=nm)


def adaptive_weights(pilot: LinearFit, gamma: float = 1.0,
                     zero_tol: float | None = None) -> np.ndarray:
    """w_j = |pilot_j|^-gamma over candidates; +inf when |pilot_j| < zero_tol."""
    if gamma <= 0:
        raise ValueError("gamma must be > 0")
    beta_tilde = pilot.coefficients[1:]  # drop the intercept
    if zero_tol is None:
        zero_tol = 1e-8 * max(1.0, float(np.max(np.abs(beta_tilde), initial=0.0)))
    w = np.empty_like(beta_tilde)
    small = np.abs(beta_tilde) < zero_tol
    w[small] = np.inf
    w[~small] = np.abs(beta_tilde[~small]) ** (-gamma)
    return w


def _solve_em_lasso(d, V, names, options: PipelineOptions):
    pilot = pilot_ols(d, V, names)
    weights = adaptive_weights(pilot, options.gamma, options.zero_tol)
    p = V.shape[1]
    beta0_only = not np.any(np.isfinite(weights))
    if beta0_only:
        beta = np.zeros(p)
        lam = np.inf
        intercept = float(np.mean(d))
        solution = None
        cv_lambda = np.inf
    else:
        problem = LassoProblem(X=V, y=d, penalty_factors=weights,
                               family="linear")
        grid = lambda_grid(problem, n_lambdas=options.n_lambdas,
                           ratio=options.lambda_ratio)
        cv = cv_select_lambda(problem, K=options.cv_folds, grid=grid,
                              rng_seed=options.seed_tuple() + (1,))
        solution = solve_weighted_lasso(problem, cv.chosen_lambda)
        if not solution.converged:
            raise ConvergenceError("selection solve failed KKT verification",
                                   solution.kkt_violation)
        beta = solution.coefficients
        lam = cv.chosen_lambda
        intercept = solution.intercept
        cv_lambda = cv.chosen_lambda
    active = np.nonzero(beta != 0.0)[0]
    fit = EmFit(
        candidate_names=tuple(names),
        pilot_coefficients=pilot.coefficients[1:],
        pilot_sigma2=pilot.residual_variance,
        gamma=options.gamma,
        weights=weights,
        lam=float(lam),
        beta0=float(intercept),
        beta=beta,
        active_set=active,
        signs=np.sign(beta[active]).astype(int),
    )
    return fit, solution, cv_lambda


def select_effect_modifiers(d: np.ndarray, V: np.ndarray, gamma: float = 1.0,
                            names=None,
                            options: PipelineOptions | None = None) -> EmFit:
    """Pilot OLS, adaptive weights, CV lambda, weighted-LASSO selection."""
    d = np.asarray(d, dtype=float)
    V = np.asarray(V, dtype=float)
    if names is None:
        names = [f"V{j+1}" for j in range(V.shape[1])]
    if options is None:
        options = PipelineOptions(gamma=gamma)
    elif options.gamma != gamma:
        options = PipelineOptions(**{**options.__dict__, "gamma": gamma})
    fit, _, _ = _solve_em_lasso(d, V, names, options)
    return fit


def estimate_cate(fit: EmFit, v) -> float:
    """Fitted treatment-effect value beta0 + v' beta at candidate values v."""
    v = np.asarray(v, dtype=float)
    if v.shape != fit.beta.shape:
        raise ValueError(f"expected {fit.beta.shape[0]} candidate values")
    return float(fit.beta0 + v @ fit.beta)


def _stage(stage_name):
    class _Ctx:
        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            if exc is not None and not isinstance(exc, PipelineError):
                raise PipelineError(stage_name, exc) from exc
            return False

    return _Ctx()


def _hal_covariates(table: ObservationTable, include_treatment: bool):
    if include_treatment:
        return np.column_stack([table.covariates, table.treatment[:, None]])
    return table.covariates


def _fit_outcome(table, q_spec, options):
    """Per-subject predictions (q0, q1) of the outcome at both arms."""
    if isinstance(q_spec, HalModel):
        W = _hal_covariates(table, include_treatment=True)
        order = q_spec.max_order or halmod.auto_max_order(W.shape[1])
        fit = halmod.fit_hal(W, table.outcome, family="linear",
                             max_order=order, K=options.cv_folds,
                             seed=options.seed_tuple() + (2,),
                             n_lambdas=options.n_lambdas)
        W0 = W.copy()
        W0[:, -1] = 0.0
        W1 = W.copy()
        W1[:, -1] = 1.0
        return halmod.hal_predict(fit, W0), halmod.hal_predict(fit, W1), {
            "q_model": "hal", "q_lambda": fit.chosen_lambda,
            "q_max_order": order}
    if not isinstance(q_spec, ModelSpec):
        raise TypeError("q_spec must be a ModelSpec or HalModel")
    X = build_design(table, q_spec)
    if q_spec.family == "linear":
        fit = fit_ols(X, table.outcome, term_names=q_spec.labels())
        q0 = predict_linear(fit, build_design(table, q_spec, a_override=0))
        q1 = predict_linear(fit, build_design(table, q_spec, a_override=1))
    else:
        fit = fit_logistic(X, table.outcome, term_names=q_spec.labels())
        q0 = predict_probability(fit, build_design(table, q_spec, a_override=0))
        q1 = predict_probability(fit, build_design(table, q_spec, a_override=1))
    return q0, q1, {"q_model": " + ".join(q_spec.labels())}


def _fit_propensity(table, g_spec, options):
    if isinstance(g_spec, HalModel):
        W = _hal_covariates(table, include_treatment=False)
        order = g_spec.max_order or halmod.auto_max_order(W.shape[1])
        fit = halmod.fit_hal(W, table.treatment, family="logistic",
                             max_order=order, K=options.cv_folds,
                             seed=options.seed_tuple() + (3,),
                             n_lambdas=options.n_lambdas)
        return halmod.hal_predict(fit, W), {
            "g_model": "hal", "g_lambda": fit.chosen_lambda,
            "g_max_order": order}
    if not isinstance(g_spec, ModelSpec):
        raise TypeError("g_spec must be a ModelSpec or HalModel")
    if g_spec.family != "logistic":
        raise ValueError("the treatment model must use the logistic family")
    if g_spec.uses_treatment:
        raise ValueError("the treatment model cannot contain treatment terms")
    X = build_design(table, g_spec)
    fit = fit_logistic(X, table.treatment, term_names=g_spec.labels())
    return predict_probability(fit, X), {"g_model": " + ".join(g_spec.labels())}


def run_pipeline(table: ObservationTable, q_spec, g_spec,
                 em: EmCandidateSet,
                 options: PipelineOptions | None = None) -> PipelineResult:
    """Full run: nuisances, pseudo-outcome, selection, selective inference.

    Deterministic given (table, specs, options.seed).
    """
    if options is None:
        options = PipelineOptions()
    em.validate_against(table)
    diagnostics: dict = {}
    with _stage("outcome-model"):
        q0, q1, dq = _fit_outcome(table, q_spec, options)
        diagnostics.update(dq)
    with _stage("treatment-model"):
        g1, dg = _fit_propensity(table, g_spec, options)
        diagnostics.update(dg)
        if options.trunc is not None:
            lo, hi = options.trunc
            g1 = truncate_propensity(g1, lo, hi)
        diagnostics["g1_range"] = (float(np.min(g1)), float(np.max(g1)))
    with _stage("pseudo-outcome"):
        nuis = NuisanceEstimates(q0=q0, q1=q1, g1=g1, truncation=options.trunc)
        pseudo = pseudo_outcome(nuis, table.treatment, table.outcome)
    with _stage("selection"):
        V = em.matrix(table)
        fit, solution, cv_lambda = _solve_em_lasso(pseudo.d, V, em.names, options)
    with _stage("selective-inference"):
        intervals: list[SelectiveInterval] = []
        if fit.active_set.size:
            n = table.n
            V_full = np.column_stack([np.ones(n), V])
            w_full = np.concatenate([[0.0], fit.weights])
            intervals = selective_intervals(
                V_full, pseudo.d, fit.lam, w_full,
                active_set=fit.active_set + 1,
                signs=fit.signs, sigma2_hat=fit.pilot_sigma2,
                alpha=options.alpha,
                names=["(intercept)"] + list(em.names))
            # re-key interval indices to candidate positions
            intervals = [
                SelectiveInterval(index=iv.index - 1, name=iv.name,
                                  estimate=iv.estimate, eta=iv.eta,
                                  sigma_star2=iv.sigma_star2, nu_lo=iv.nu_lo,
                                  nu_hi=iv.nu_hi, ci_lo=iv.ci_lo,
                                  ci_hi=iv.ci_hi, p_value=iv.p_value)
                for iv in intervals]
    return PipelineResult(fit=fit, intervals=intervals, nuisance=nuis,
                          pseudo=pseudo.d, cv_lambda=cv_lambda,
                          diagnostics=diagnostics)
