"""Post-selection inference for the weighted LASSO.

Conditioning is on the pair (active set, signs).  For the solver's objective

    sum_i (y_i - b0 - x_i'b)^2 + lambda * sum_j w_j |b_j|

the stationarity equations of the always-active block E (unpenalized columns
such as the intercept, plus the selected columns) give

    b_E(y) = (V_E'V_E)^{-1} (V_E'y - (lambda/2) (w_E o s_E)),

so the selection event {same active set, same signs} is the polyhedron

    sign rows:      -s_j e_j'(V_E'V_E)^{-1}V_E' y <= -(lambda/2) s_j e_j'(V_E'V_E)^{-1}(w_E o s_E)
    inactive rows:  |2 v_j'(y - V_E b_E(y))| <= lambda w_j

all affine in y.  Columns with w = +inf are forced to zero at every lambda
and impose no constraint.  On this event, eta'y for a fixed contrast eta is
a Gaussian truncated to an interval [nu_lo, nu_hi] computable from the
polyhedron, which yields exact pivots, test-inversion confidence intervals,
and selective p-values.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import log_ndtr, ndtr

__all__ = [
    "SelInfError",
    "Polyhedron",
    "SelectiveInterval",
    "selection_polyhedron",
    "truncation_interval",
    "truncnorm_cdf",
    "selective_ci",
    "selective_pvalue",
    "selective_intervals",
]

FEAS_TOL = 1e-8
BOUNDARY_ATOL = 1e-12
CI_BRACKET_SIGMAS = 10.0
CI_MAX_EXPANSIONS = 200
CI_TOL_SIGMAS = 1e-8


class SelInfError(ValueError):
    pass


@dataclass(frozen=True)
class Polyhedron:
    """Selection event {y : a_mat @ y <= b}."""

    a_mat: np.ndarray
    b: np.ndarray

    def slack(self, y: np.ndarray) -> np.ndarray:
        if self.a_mat.shape[0] == 0:
            return np.empty(0)
        return self.b - self.a_mat @ y

    def contains(self, y: np.ndarray, tol: float = FEAS_TOL) -> bool:
        s = self.slack(y)
        return bool(s.size == 0 or np.min(s) >= -tol * max(1.0, float(np.max(np.abs(self.b), initial=0.0))))


@dataclass(frozen=True)
class SelectiveInterval:
    """Truncated-Gaussian inference for one selected coefficient."""

    index: int
    name: str
    estimate: float          # eta' y, the refit coefficient on the selected model
    eta: np.ndarray
    sigma_star2: float
    nu_lo: float
    nu_hi: float
    ci_lo: float
    ci_hi: float
    p_value: float


def selection_polyhedron(V: np.ndarray, lam: float, weights: np.ndarray,
                         active_set, signs) -> Polyhedron:
    """Polyhedron of responses reproducing (active_set, signs).

    V is the full candidate matrix including any unpenalized columns (weight
    0, e.g. the intercept); active_set indexes the penalized columns with
    nonzero coefficients, signs their signs.  Coordinates with infinite
    weight are dropped from the inactive constraints.
    """
    V = np.asarray(V, dtype=float)
    weights = np.asarray(weights, dtype=float)
    active_set = np.asarray(active_set, dtype=int)
    signs = np.asarray(signs, dtype=float)
    n, p = V.shape
    if weights.shape != (p,):
        raise SelInfError("need one weight per column of V")
    if active_set.shape != signs.shape:
        raise SelInfError("active_set and signs must align")
    if np.any(weights[active_set] == 0.0) or np.any(~np.isfinite(weights[active_set])):
        raise SelInfError("active columns must carry finite positive weights")
    zero_cols = np.nonzero(weights == 0.0)[0]
    e_cols = np.concatenate([zero_cols, active_set]).astype(int)
    V_E = V[:, e_cols]
    k = V_E.shape[1]
    gram = V_E.T @ V_E
    try:
        H = np.linalg.inv(gram)
    except np.linalg.LinAlgError:
        raise SelInfError("V_E' V_E is singular on the selected columns") from None
    if not np.all(np.isfinite(H)):
        raise SelInfError("V_E' V_E is numerically singular")
    ws = np.concatenate([np.zeros(zero_cols.size), weights[active_set] * signs])
    B = H @ V_E.T                    # (k, n): b_E(y) = B y - (lam/2) H ws
    shift = H @ ws                   # (k,)
    rows = []
    offs = []
    n_zero = zero_cols.size
    for t in range(n_zero, k):
        s_t = signs[t - n_zero]
        rows.append(-s_t * B[t])
        offs.append(-(lam / 2.0) * s_t * shift[t])
    finite = np.isfinite(weights) & (weights > 0.0)
    inactive = np.nonzero(finite)[0]
    inactive = inactive[~np.isin(inactive, active_set)]
    if inactive.size:
        V_I = V[:, inactive]
        # v_j'(I - P_E) y  and the constant part lam * v_j' V_E H ws / 2 * 2
        VtVE = V_I.T @ V_E
        proj = VtVE @ B              # (m, n) rows are v_j' P_E
        base = V_I.T - proj          # rows are v_j'(I - P_E)
        const = VtVE @ shift         # v_j' V_E H ws
        lw = lam * weights[inactive]
        rows.extend(list(2.0 * base))
        offs.extend(list(lw - lam * const))
        rows.extend(list(-2.0 * base))
        offs.extend(list(lw + lam * const))
    a_mat = np.array(rows) if rows else np.empty((0, n))
    b = np.array(offs) if offs else np.empty(0)
    return Polyhedron(a_mat=a_mat, b=b)


def truncation_interval(poly: Polyhedron, y: np.ndarray, eta: np.ndarray,
                        sigma2: float) -> tuple[float, float]:
    """Bounds [nu_lo, nu_hi] on eta'y over the polyhedron, holding fixed the
    part of y orthogonal to eta (the polyhedral lemma with covariance
    sigma2 * I, under which the direction constant is c = eta / eta'eta)."""
    y = np.asarray(y, dtype=float)
    eta = np.asarray(eta, dtype=float)
    if not poly.contains(y):
        raise SelInfError("observed response is outside the selection polyhedron")
    if poly.a_mat.shape[0] == 0:
        return -np.inf, np.inf
    c = eta / (eta @ eta)
    target = float(eta @ y)
    z = y - c * target
    ac = poly.a_mat @ c
    az = poly.a_mat @ z
    zero_tol = BOUNDARY_ATOL * max(1.0, float(np.max(np.abs(ac))))
    nu_lo, nu_hi = -np.inf, np.inf
    with np.errstate(divide="ignore", invalid="ignore"):
        bound = (poly.b - az) / ac
    neg = ac < -zero_tol
    pos = ac > zero_tol
    if np.any(neg):
        nu_lo = float(np.max(bound[neg]))
    if np.any(pos):
        nu_hi = float(np.min(bound[pos]))
    flat = ~neg & ~pos
    if np.any(az[flat] > poly.b[flat] + FEAS_TOL * max(1.0, float(np.max(np.abs(poly.b), initial=0.0)))):
        raise SelInfError("constraint orthogonal to eta is infeasible")
    if not nu_lo < nu_hi:
        raise SelInfError(f"degenerate truncation interval [{nu_lo}, {nu_hi}]")
    return nu_lo, nu_hi


def _log_diff_sf(a: float, b: float) -> float:
    """log(Phi_bar(a) - Phi_bar(b)) for a < b, stable deep in the right tail."""
    la = log_ndtr(-a)
    lb = log_ndtr(-b) if np.isfinite(b) else -np.inf
    if lb - la >= 0.0:
        return -np.inf
    return la + np.log1p(-np.exp(lb - la))


def _log_diff_cdf(a: float, b: float) -> float:
    """log(Phi(b) - Phi(a)) for a < b, stable deep in the left tail."""
    lb = log_ndtr(b)
    la = log_ndtr(a) if np.isfinite(a) else -np.inf
    if la - lb >= 0.0:
        return -np.inf
    return lb + np.log1p(-np.exp(la - lb))


def truncnorm_cdf(x: float, mu: float, sigma2: float, lo: float,
                  hi: float) -> float:
    """CDF at x of N(mu, sigma2) truncated to [lo, hi].

    Uses complementary/log-space evaluation whenever the whole window sits in
    one Gaussian tail, so far-tail truncations (both endpoints many sigmas
    out) keep full relative accuracy.  x outside [lo, hi] clamps to 0 or 1
    with a warning.
    """
    if not lo < hi:
        raise SelInfError("need lo < hi")
    if not sigma2 > 0:
        raise SelInfError("need sigma2 > 0")
    sigma = np.sqrt(sigma2)
    if x <= lo:
        if x < lo:
            warnings.warn("x below the truncation interval; clamping CDF to 0")
        return 0.0
    if x >= hi:
        if x > hi:
            warnings.warn("x above the truncation interval; clamping CDF to 1")
        return 1.0
    a = (lo - mu) / sigma if np.isfinite(lo) else -np.inf
    b = (hi - mu) / sigma if np.isfinite(hi) else np.inf
    xi = (x - mu) / sigma
    if a >= 0.0:  # window in the right tail: work with survival functions
        log_num = _log_diff_sf(a, xi)
        log_den = _log_diff_sf(a, b)
        if log_den == -np.inf:
            return 0.5  # window narrower than representable mass; symmetric fallback
        return float(min(1.0, np.exp(log_num - log_den)))
    if b <= 0.0:  # window in the left tail: work with CDFs
        log_num = _log_diff_cdf(a, xi)
        log_den = _log_diff_cdf(a, b)
        if log_den == -np.inf:
            return 0.5
        return float(min(1.0, np.exp(log_num - log_den)))
    num = ndtr(xi) - ndtr(a)
    den = ndtr(b) - ndtr(a)
    return float(min(1.0, max(0.0, num / den)))


def selective_pvalue(estimate: float, sigma_star2: float, nu_lo: float,
                     nu_hi: float) -> float:
    """Two-sided p-value for the zero-coefficient null under truncation."""
    f = truncnorm_cdf(estimate, 0.0, sigma_star2, nu_lo, nu_hi)
    return float(min(1.0, 2.0 * min(f, 1.0 - f)))


def selective_ci(estimate: float, sigma_star2: float, nu_lo: float,
                 nu_hi: float, alpha: float) -> tuple[float, float]:
    """Equal-tailed interval from inverting the truncated-normal pivot.

    The pivot F(estimate; mu, sigma_star2, nu_lo, nu_hi) is strictly
    decreasing in mu, so each endpoint is a monotone root: the lower one
    solves pivot = 1 - alpha/2, the upper pivot = alpha/2.  Brackets expand
    geometrically from estimate +/- CI_BRACKET_SIGMAS sigma.
    """
    if not 0 < alpha <= 1:
        raise SelInfError("alpha must be in (0, 1]")
    if not nu_lo < estimate < nu_hi:
        raise SelInfError("estimate must lie strictly inside (nu_lo, nu_hi)")
    sigma = float(np.sqrt(sigma_star2))

    def pivot(mu):
        return truncnorm_cdf(estimate, mu, sigma_star2, nu_lo, nu_hi)

    def solve(target):
        lo = estimate - CI_BRACKET_SIGMAS * sigma
        hi = estimate + CI_BRACKET_SIGMAS * sigma
        width = hi - lo
        for _ in range(CI_MAX_EXPANSIONS):
            if pivot(lo) > target:
                break
            lo -= width
            width *= 2.0
        else:
            raise SelInfError("failed to bracket the lower root")
        width = hi - lo
        for _ in range(CI_MAX_EXPANSIONS):
            if pivot(hi) < target:
                break
            hi += width
            width *= 2.0
        else:
            raise SelInfError("failed to bracket the upper root")
        while hi - lo > CI_TOL_SIGMAS * sigma:
            mid = 0.5 * (lo + hi)
            if pivot(mid) > target:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)

    return solve(1.0 - alpha / 2.0), solve(alpha / 2.0)


def selective_intervals(V: np.ndarray, y: np.ndarray, lam: float,
                        weights: np.ndarray, active_set, signs,
                        sigma2_hat: float, alpha: float,
                        names=None) -> list[SelectiveInterval]:
    """Inference for every selected coefficient of one weighted-LASSO fit.

    The contrast for coordinate j comes from the least-squares refit on the
    selected submodel (unpenalized columns included, e.g. the intercept):
    eta_j = V_E (V_E'V_E)^{-1} e_j, so eta_j'y is the refit coefficient.
    sigma2_hat is the residual variance handed down from the pilot full
    model.
    """
    V = np.asarray(V, dtype=float)
    y = np.asarray(y, dtype=float)
    weights = np.asarray(weights, dtype=float)
    active_set = np.asarray(active_set, dtype=int)
    signs = np.asarray(signs, dtype=float)
    poly = selection_polyhedron(V, lam, weights, active_set, signs)
    zero_cols = np.nonzero(weights == 0.0)[0]
    e_cols = np.concatenate([zero_cols, active_set]).astype(int)
    V_E = V[:, e_cols]
    H = np.linalg.inv(V_E.T @ V_E)
    etas = V_E @ H                    # column t is eta for coordinate e_cols[t]
    out = []
    for t, j in enumerate(active_set, start=zero_cols.size):
        eta = etas[:, t]
        estimate = float(eta @ y)
        sigma_star2 = sigma2_hat * float(eta @ eta)
        nu_lo, nu_hi = truncation_interval(poly, y, eta, sigma_star2)
        ci_lo, ci_hi = selective_ci(estimate, sigma_star2, nu_lo, nu_hi, alpha)
        p = selective_pvalue(estimate, sigma_star2, nu_lo, nu_hi)
        name = names[j] if names is not None else f"x{j}"
        out.append(SelectiveInterval(
            index=int(j), name=name, estimate=estimate, eta=eta,
            sigma_star2=sigma_star2, nu_lo=nu_lo, nu_hi=nu_hi,
            ci_lo=ci_lo, ci_hi=ci_hi, p_value=p))
    return out
