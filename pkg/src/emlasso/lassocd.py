"""Weighted LASSO by coordinate descent, with path grid and K-fold CV.

Objective conventions, fixed once and used everywhere downstream (the
selection polyhedron depends on them):

  linear:    sum_i (y_i - b0 - x_i'b)^2  +  lambda * sum_j w_j |b_j|
  logistic:  -(1/n) sum_i loglik_i(b0, b) +  lambda * sum_j w_j |b_j|

The intercept b0 is never penalized.  Penalty factors w_j >= 0; w_j = 0
leaves column j unpenalized at every lambda, w_j = +inf forces b_j = 0
exactly.  No automatic column standardization (adaptive weights already
calibrate scale); an opt-in flag exists on the problem.

The coordinate updates run in a numba kernel over a unified weighted
quadratic form; the logistic family wraps it in an IRLS outer loop.  Every
solve ends with a vectorized KKT verification which sets the ``converged``
flag and records the violation magnitude.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.special import expit

__all__ = [
    "LassoError",
    "ConvergenceError",
    "LassoProblem",
    "LassoSolution",
    "CvResult",
    "soft_threshold",
    "solve_weighted_lasso",
    "solve_logistic_lasso",
    "solve_path",
    "lambda_grid",
    "cv_select_lambda",
    "objective_value",
]

CD_TOL = 1e-9
CD_MAX_SWEEPS = 10_000
GRAM_MAX_P = 200  # small-p linear solves go through the centered Gram kernel
KKT_RTOL = 1e-6
IRLS_WEIGHT_CLAMP = 1e-10
IRLS_PROB_CLAMP = 1e-5   # saturated-observation clamp in the working response
PROB_CLAMP = 1e-10
LOGISTIC_MAX_OUTER = 200
LOGISTIC_DIVERGENCE_BOUND = 250.0


class LassoError(ValueError):
    pass


class ConvergenceError(LassoError):
    def __init__(self, message: str, kkt_violation: float):
        self.kkt_violation = kkt_violation
        super().__init__(f"{message} (KKT violation {kkt_violation:.3e})")


@dataclass
class LassoProblem:
    """Design, response, per-column penalty factors and family."""

    X: np.ndarray
    y: np.ndarray
    penalty_factors: np.ndarray
    family: str = "linear"
    standardize: bool = False

    def __post_init__(self):
        X = np.asfortranarray(np.asarray(self.X, dtype=float))
        y = np.asarray(self.y, dtype=float)
        w = np.asarray(self.penalty_factors, dtype=float)
        if X.ndim != 2:
            raise LassoError("X must be 2-d")
        n, p = X.shape
        if y.shape != (n,):
            raise LassoError("y length does not match X rows")
        if w.shape != (p,):
            raise LassoError("need one penalty factor per column")
        if np.any(np.isnan(w)) or np.any(w < 0):
            raise LassoError("penalty factors must be >= 0 (+inf allowed)")
        if self.family not in ("linear", "logistic"):
            raise LassoError(f"unknown family {self.family!r}")
        if self.family == "logistic" and not np.all((y == 0.0) | (y == 1.0)):
            raise LassoError("logistic response must be 0/1")
        self.X_raw = X
        if self.standardize:
            sd = X.std(axis=0)
            sd[sd == 0] = 1.0
            X = np.asfortranarray(X / sd)
            self._scale = sd
        else:
            self._scale = None
        self.X = X
        self.y = y
        self.penalty_factors = w

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def free_columns(self) -> np.ndarray:
        """Indices with finite penalty (the only coordinates ever updated)."""
        return np.nonzero(np.isfinite(self.penalty_factors))[0]

    def _colnorms2(self) -> np.ndarray:
        cached = getattr(self, "_colnorms2_cache", None)
        if cached is None:
            cached = np.einsum("ij,ij->j", self.X, self.X)
            self._colnorms2_cache = cached
        return cached

    def _centered_gram(self):
        """(G, c, xbar, ybar) for X'X etc. after centering columns and y.

        Centering absorbs the unpenalized intercept, so coordinate descent
        can run on p-vector quantities alone (worth it when p << n).
        """
        cached = getattr(self, "_gram_cache", None)
        if cached is None:
            X, y = self.X, self.y
            xbar = X.mean(axis=0)
            ybar = float(y.mean())
            Xc = X - xbar
            G = Xc.T @ Xc
            c = Xc.T @ (y - ybar)
            cached = (G, c, xbar, ybar)
            self._gram_cache = cached
        return cached

    def _binary_csc(self):
        """(indptr, indices) of the ones when all entries are 0/1, else None.

        Indicator designs (the HAL bases) let coordinate updates touch only
        each column's support instead of all n rows.
        """
        cached = getattr(self, "_binary_csc_cache", "unset")
        if cached == "unset":
            X = self.X
            if self._scale is None and np.all((X == 0.0) | (X == 1.0)):
                nnz = X.sum(axis=0).astype(np.int64)
                indptr = np.zeros(X.shape[1] + 1, dtype=np.int64)
                np.cumsum(nnz, out=indptr[1:])
                indices = np.nonzero(X.T)[1].astype(np.int64)
                cached = (indptr, indices)
            else:
                cached = None
            self._binary_csc_cache = cached
        return cached

    def _kkt_scale(self) -> float:
        cached = getattr(self, "_kkt_scale_cache", None)
        if cached is None:
            y = self.y
            null_score = np.abs(self.X.T @ (y - y.mean()))
            if self.family == "linear":
                cached = max(1.0, float(np.max(2.0 * null_score, initial=0.0)))
            else:
                cached = max(1.0, float(np.max(null_score / self.n, initial=0.0)))
            self._kkt_scale_cache = cached
        return cached


@dataclass
class LassoSolution:
    lam: float
    intercept: float
    coefficients: np.ndarray
    active_set: np.ndarray       # indices with nonzero coefficient
    signs: np.ndarray            # sign of each active coefficient
    converged: bool
    kkt_violation: float
    sweeps: int
    objective_history: list[float] = field(default_factory=list)


@dataclass
class CvResult:
    lambda_grid: np.ndarray
    cv_mse: np.ndarray           # mean held-out loss per lambda (MSE or deviance)
    cv_se: np.ndarray
    chosen_lambda: float


def soft_threshold(z: float, t: float) -> float:
    """sign(z) * max(|z| - t, 0); t must be nonnegative."""
    if t < 0:
        raise LassoError("threshold must be >= 0")
    if z > t:
        return z - t
    if z < -t:
        return z + t
    return 0.0


@njit(cache=True)
def _cd_sweeps(X, a, r, beta, b0_box, sjj, thr, idx, asum, tol, max_sweeps,
               kkt_exit):
    """Cyclic coordinate descent on (1/2) sum_i a_i r_i^2 + sum_j thr_j |b_j|.

    r is maintained as (working response - b0 - X beta).  Only coordinates
    in idx are updated; the intercept is refreshed every sweep.  Exits when
    the max coefficient change drops below tol, or when a sweep's worst KKT
    residual over idx is already below kkt_exit (collinear active sets can
    satisfy the optimality contract long before coordinates stop moving).
    Returns (sweeps_done, last_max_coefficient_change).
    """
    n = r.shape[0]
    sweeps = 0
    maxdelta = np.inf
    while sweeps < max_sweeps:
        sweeps += 1
        maxdelta = 0.0
        viol = 0.0
        num = 0.0
        for i in range(n):
            num += a[i] * r[i]
        d0 = num / asum
        if abs(num) > viol:
            viol = abs(num)
        if d0 != 0.0:
            b0_box[0] += d0
            for i in range(n):
                r[i] -= d0
            if abs(d0) > maxdelta:
                maxdelta = abs(d0)
        for kk in range(idx.shape[0]):
            j = idx[kk]
            s = sjj[j]
            if s <= 0.0:
                continue
            g = 0.0
            for i in range(n):
                g += a[i] * X[i, j] * r[i]
            t = thr[j]
            b = beta[j]
            if b > 0.0 or (b == 0.0 and g > t):
                v = abs(g - t) if b != 0.0 else g - t
            elif b < 0.0 or (b == 0.0 and g < -t):
                v = abs(g + t) if b != 0.0 else -g - t
            else:
                v = 0.0
            if v > viol:
                viol = v
            z = g + b * s
            if z > t:
                bnew = (z - t) / s
            elif z < -t:
                bnew = (z + t) / s
            else:
                bnew = 0.0
            d = bnew - b
            if d != 0.0:
                beta[j] = bnew
                for i in range(n):
                    r[i] -= X[i, j] * d
                if abs(d) > maxdelta:
                    maxdelta = abs(d)
        if maxdelta < tol:
            break
        if viol <= kkt_exit:
            maxdelta = 0.0
            break
    return sweeps, maxdelta


@njit(cache=True)
def _cd_sweeps_binary(indptr, indices, a, r, beta, b0_box, sjj, thr, idx,
                      asum, tol, max_sweeps, kkt_exit):
    """_cd_sweeps for an implicit 0/1 design stored as column supports.

    Column j is one exactly on rows indices[indptr[j]:indptr[j+1]], so score
    and residual updates touch only the support.
    """
    n = r.shape[0]
    sweeps = 0
    maxdelta = np.inf
    while sweeps < max_sweeps:
        sweeps += 1
        maxdelta = 0.0
        viol = 0.0
        num = 0.0
        for i in range(n):
            num += a[i] * r[i]
        d0 = num / asum
        if abs(num) > viol:
            viol = abs(num)
        if d0 != 0.0:
            b0_box[0] += d0
            for i in range(n):
                r[i] -= d0
            if abs(d0) > maxdelta:
                maxdelta = abs(d0)
        for kk in range(idx.shape[0]):
            j = idx[kk]
            s = sjj[j]
            if s <= 0.0:
                continue
            g = 0.0
            for ptr in range(indptr[j], indptr[j + 1]):
                i = indices[ptr]
                g += a[i] * r[i]
            t = thr[j]
            b = beta[j]
            if b > 0.0 or (b == 0.0 and g > t):
                v = abs(g - t) if b != 0.0 else g - t
            elif b < 0.0 or (b == 0.0 and g < -t):
                v = abs(g + t) if b != 0.0 else -g - t
            else:
                v = 0.0
            if v > viol:
                viol = v
            z = g + b * s
            if z > t:
                bnew = (z - t) / s
            elif z < -t:
                bnew = (z + t) / s
            else:
                bnew = 0.0
            d = bnew - b
            if d != 0.0:
                beta[j] = bnew
                for ptr in range(indptr[j], indptr[j + 1]):
                    r[indices[ptr]] -= d
                if abs(d) > maxdelta:
                    maxdelta = abs(d)
        if maxdelta < tol:
            break
        if viol <= kkt_exit:
            maxdelta = 0.0
            break
    return sweeps, maxdelta


@njit(cache=True)
def _binary_colsums(indptr, indices, a, out):
    for j in range(indptr.shape[0] - 1):
        s = 0.0
        for ptr in range(indptr[j], indptr[j + 1]):
            s += a[indices[ptr]]
        out[j] = s
    return out


@njit(cache=True)
def _cd_sweeps_gram(G, c, q, beta, thr_half, idx, tol, max_sweeps, kkt_exit):
    """Cyclic CD on the centered problem via Gram updates.

    q is maintained as G @ beta; the score of column j is c_j - q_j, tested
    against thr_half = lam * w / 2 (the centered objective is a plain sum of
    squares, so the factor-2 convention moves into the threshold).  Exit
    rules match _cd_sweeps.
    """
    sweeps = 0
    maxdelta = np.inf
    while sweeps < max_sweeps:
        sweeps += 1
        maxdelta = 0.0
        viol = 0.0
        for kk in range(idx.shape[0]):
            j = idx[kk]
            gjj = G[j, j]
            if gjj <= 0.0:
                continue
            g = c[j] - q[j]
            t = thr_half[j]
            b = beta[j]
            if b > 0.0 or (b == 0.0 and g > t):
                v = abs(g - t) if b != 0.0 else g - t
            elif b < 0.0 or (b == 0.0 and g < -t):
                v = abs(g + t) if b != 0.0 else -g - t
            else:
                v = 0.0
            if v > viol:
                viol = v
            z = g + b * gjj
            if z > t:
                bnew = (z - t) / gjj
            elif z < -t:
                bnew = (z + t) / gjj
            else:
                bnew = 0.0
            d = bnew - b
            if d != 0.0:
                beta[j] = bnew
                for m in range(q.shape[0]):
                    q[m] += G[m, j] * d
                if abs(d) > maxdelta:
                    maxdelta = abs(d)
        if maxdelta < tol:
            break
        if viol <= kkt_exit:
            maxdelta = 0.0
            break
    return sweeps, maxdelta


def _gram_cd(problem, lam, beta, tol, sweep_budget, kkt_exit=0.0):
    """Screened Gram-based CD for the linear family; returns (b0, sweeps, ok)."""
    G, c, xbar, ybar = problem._centered_gram()
    w = problem.penalty_factors
    free_idx = problem.free_columns()
    p = beta.shape[0]
    thr_half = np.zeros(p)
    thr_half[free_idx] = 0.5 * lam * w[free_idx]
    q = G @ beta
    in_work = np.zeros(p, dtype=bool)
    in_work[free_idx[beta[free_idx] != 0.0]] = True
    used = 0
    converged = not np.any(in_work)
    while used < sweep_budget:
        score = np.abs(c - q)
        viol = free_idx[(score[free_idx] > thr_half[free_idx]) & ~in_work[free_idx]]
        if viol.size == 0 and converged:
            b0 = ybar - float(xbar @ beta)
            return b0, max(used, 1), True
        in_work[viol] = True
        work = np.nonzero(in_work)[0]
        s, delta = _cd_sweeps_gram(G, c, q, beta, thr_half, work, tol,
                                   sweep_budget - used, 0.5 * kkt_exit)
        used += s
        converged = delta < tol
        if not converged:
            break
    return ybar - float(xbar @ beta), used, False


def _weighted_gram_cd(X, a, z, beta, thr, free_idx, tol, sweep_budget,
                      kkt_exit=0.0):
    """Gram-based screened CD on (1/2) sum a_i (z_i - b0 - x_i'b)^2 + sum thr|b|.

    Builds the a-weighted centered Gram once (cheap for small p), so sweeps
    cost O(p) per coordinate.  Returns (b0, sweeps, converged).
    """
    asum = float(a.sum())
    xbar = (a @ X) / asum
    zbar = float(a @ z) / asum
    Xc = X - xbar
    G = Xc.T @ (a[:, None] * Xc)
    c = Xc.T @ (a * (z - zbar))
    q = G @ beta
    p = beta.shape[0]
    in_work = np.zeros(p, dtype=bool)
    in_work[free_idx[beta[free_idx] != 0.0]] = True
    used = 0
    converged = not np.any(in_work)
    while used < sweep_budget:
        score = np.abs(c - q)
        viol = free_idx[(score[free_idx] > thr[free_idx]) & ~in_work[free_idx]]
        if viol.size == 0 and converged:
            return zbar - float(xbar @ beta), max(used, 1), True
        in_work[viol] = True
        work = np.nonzero(in_work)[0]
        s, delta = _cd_sweeps_gram(G, c, q, beta, thr, work, tol,
                                   sweep_budget - used, kkt_exit)
        used += s
        converged = delta < tol
        if not converged:
            break
    return zbar - float(xbar @ beta), used, False


def _quadratic_cd(X, a, r, beta, b0, sjj, thr, free_idx, tol, sweep_budget,
                  kkt_exit=0.0, csc=None):
    """Screened coordinate descent on (1/2) sum a_i r_i^2 + sum thr_j |b_j|.

    The working set starts at {support} + {KKT violators at the warm point}
    and grows by exact violation checks (vectorized score passes) until the
    full problem's conditions hold, so screening never changes the answer.
    With csc=(indptr, indices) the 0/1-design kernel is used.  Mutates
    r/beta in place; returns (b0, sweeps_used, converged).
    """
    b0_box = np.array([b0], dtype=float)
    asum = float(a.sum())
    empty = np.empty(0, dtype=np.int64)

    def run(work, budget, exit_tol):
        if csc is not None:
            return _cd_sweeps_binary(csc[0], csc[1], a, r, beta, b0_box, sjj,
                                     thr, work, asum, tol, budget, exit_tol)
        return _cd_sweeps(X, a, r, beta, b0_box, sjj, thr, work, asum, tol,
                          budget, exit_tol)

    used = 0
    # settle the unpenalized intercept before screening on the score
    s, delta = run(empty, 2, 0.0)
    used += s
    in_work = np.zeros(beta.shape[0], dtype=bool)
    in_work[free_idx[beta[free_idx] != 0.0]] = True
    converged = delta < tol and not np.any(in_work)
    while used < sweep_budget:
        score = np.abs(X.T @ (a * r))
        viol = free_idx[(score[free_idx] > thr[free_idx]) & ~in_work[free_idx]]
        if viol.size == 0 and converged:
            return float(b0_box[0]), used, True
        in_work[viol] = True
        work = np.nonzero(in_work)[0]
        s, delta = run(work, sweep_budget - used, kkt_exit)
        used += s
        converged = delta < tol
        if not converged:
            break
    return float(b0_box[0]), used, False


def _kkt_violation(problem: LassoProblem, lam: float, b0: float,
                   beta: np.ndarray):
    """Max KKT residual in the module's objective convention, plus a scale.

    linear score:    s_j = 2 x_j'(y - b0 - X b)
    logistic score:  s_j = (1/n) x_j'(y - p)
    Active coordinates must satisfy s_j = lam w_j sign(b_j); inactive
    finite-weight ones |s_j| <= lam w_j; the intercept score must vanish.
    """
    X, y, w = problem.X, problem.y, problem.penalty_factors
    n = problem.n
    scale = problem._kkt_scale()
    if problem.family == "linear":
        r = y - b0 - X @ beta
        score = 2.0 * (X.T @ r)
        icpt_score = 2.0 * abs(r.sum())
    else:
        p_hat = expit(b0 + X @ beta)
        resid = y - p_hat
        score = (X.T @ resid) / n
        icpt_score = abs(resid.sum()) / n
    viol = icpt_score
    finite = np.isfinite(w)
    active = finite & (beta != 0.0)
    inactive = finite & (beta == 0.0)
    if np.any(active):
        viol = max(viol, float(np.max(np.abs(
            score[active] - lam * w[active] * np.sign(beta[active])))))
    if np.any(inactive):
        viol = max(viol, float(np.max(
            np.abs(score[inactive]) - lam * w[inactive], initial=0.0)))
    return viol, scale


def objective_value(problem: LassoProblem, lam: float, b0: float,
                    beta: np.ndarray) -> float:
    """Penalized objective in the reported convention (finite part only)."""
    X, y, w = problem.X, problem.y, problem.penalty_factors
    finite = np.isfinite(w)
    penalty = lam * float(np.sum(w[finite] * np.abs(beta[finite])))
    if problem.family == "linear":
        r = y - b0 - X @ beta
        return float(r @ r) + penalty
    eta = b0 + X @ beta
    p = np.clip(expit(eta), PROB_CLAMP, 1.0 - PROB_CLAMP)
    nll = -float(np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))
    return nll + penalty


def _finalize(problem, lam, b0, beta, sweeps, history):
    viol, scale = _kkt_violation(problem, lam, b0, beta)
    converged = viol <= KKT_RTOL * scale
    if problem._scale is not None:
        beta = beta / problem._scale
    active = np.nonzero(beta != 0.0)[0]
    return LassoSolution(
        lam=float(lam), intercept=float(b0), coefficients=beta,
        active_set=active, signs=np.sign(beta[active]).astype(int),
        converged=converged, kkt_violation=viol, sweeps=sweeps,
        objective_history=history)


def solve_weighted_lasso(problem: LassoProblem, lam: float,
                         warm: tuple[float, np.ndarray] | None = None,
                         warm_residual: np.ndarray | None = None,
                         max_sweeps: int = CD_MAX_SWEEPS,
                         tol: float = CD_TOL,
                         track_objective: bool = False) -> LassoSolution:
    """Minimize sum (y - b0 - Xb)^2 + lam * sum w_j |b_j| (linear family)."""
    if problem.family != "linear":
        raise LassoError("use solve_logistic_lasso for the logistic family")
    if lam < 0:
        raise LassoError("lambda must be >= 0")
    X, y = problem.X, problem.y
    n, p = X.shape
    free_idx = problem.free_columns()
    a = np.full(n, 2.0)
    sjj = 2.0 * problem._colnorms2()
    thr = np.zeros(p)
    thr[free_idx] = lam * problem.penalty_factors[free_idx]
    if warm is not None:
        b0 = float(warm[0])
        beta = warm[1].copy()
        if problem._scale is not None:
            beta = beta * problem._scale  # back to the internal column scale
        if np.any(beta[~np.isfinite(problem.penalty_factors)] != 0.0):
            raise LassoError("warm start has nonzero coefficient on an excluded column")
    else:
        b0 = float(y.mean())
        beta = np.zeros(p)
    history: list[float] = []
    # the early KKT exit exists for saturated penalized fits; an unpenalized
    # solve must polish all the way down to the coefficient-change tolerance
    # (the lam=0 contract is agreement with least squares at 1e-8)
    kkt_exit = 0.5 * KKT_RTOL * problem._kkt_scale() if lam > 0 else 0.0
    if not track_objective and p <= GRAM_MAX_P:
        b0, sweeps, converged = _gram_cd(problem, lam, beta, tol, max_sweeps,
                                         kkt_exit)
        if not converged and sweeps >= max_sweeps:
            viol, _ = _kkt_violation(problem, lam, b0, beta)
            raise ConvergenceError(f"coordinate descent hit {max_sweeps} sweeps", viol)
        return _finalize(problem, lam, b0, beta, sweeps, history)
    if warm is not None and warm_residual is not None:
        r = warm_residual.copy()
    else:
        r = y - b0 - X @ beta
    if track_objective:
        # plain full-cyclic sweeps, one at a time, recording the objective
        b0_box = np.array([b0])
        asum = float(a.sum())
        sweeps = 0
        delta = np.inf
        history.append(objective_value(problem, lam, b0_box[0], beta))
        while sweeps < max_sweeps:
            _, delta = _cd_sweeps(X, a, r, beta, b0_box, sjj, thr, free_idx,
                                  asum, tol, 1, 0.0)
            sweeps += 1
            history.append(objective_value(problem, lam, b0_box[0], beta))
            if delta < tol:
                break
        b0, converged = float(b0_box[0]), delta < tol
    else:
        b0, sweeps, converged = _quadratic_cd(
            X, a, r, beta, b0, sjj, thr, free_idx, tol, max_sweeps, kkt_exit,
            csc=problem._binary_csc())
    if not converged and sweeps >= max_sweeps:
        viol, _ = _kkt_violation(problem, lam, b0, beta)
        raise ConvergenceError(f"coordinate descent hit {max_sweeps} sweeps", viol)
    sol = _finalize(problem, lam, b0, beta, sweeps, history)
    sol._residual = r  # reused as the next warm start along a path
    return sol


def solve_logistic_lasso(problem: LassoProblem, lam: float,
                         warm: tuple[float, np.ndarray] | None = None,
                         max_sweeps: int = CD_MAX_SWEEPS,
                         tol: float = CD_TOL) -> LassoSolution:
    """Proximal-Newton minimizer of the penalized mean Bernoulli NLL.

    Outer IRLS loop around the same weighted CD kernel; lambda is per
    observation (average-log-likelihood scaling).
    """
    if problem.family != "logistic":
        raise LassoError("problem family is not logistic")
    if lam < 0:
        raise LassoError("lambda must be >= 0")
    X, y = problem.X, problem.y
    n, p = X.shape
    free_idx = problem.free_columns()
    thr = np.zeros(p)
    thr[free_idx] = lam * problem.penalty_factors[free_idx]
    if warm is not None:
        b0 = float(warm[0])
        beta = warm[1].copy()
        if problem._scale is not None:
            beta = beta * problem._scale
    else:
        ybar = min(max(float(y.mean()), PROB_CLAMP), 1.0 - PROB_CLAMP)
        b0 = float(np.log(ybar / (1.0 - ybar)))
        beta = np.zeros(p)
    eta = b0 + X @ beta
    total_sweeps = 0
    scale = problem._kkt_scale()
    for _ in range(LOGISTIC_MAX_OUTER):
        # stop on the true KKT conditions, comfortably inside the verified
        # tolerance (the quadratic approximation itself never reaches 0)
        viol, _ = _kkt_violation(problem, lam, b0, beta)
        if viol <= 0.9 * KKT_RTOL * scale:
            break
        p_hat = np.clip(expit(eta), IRLS_PROB_CLAMP, 1.0 - IRLS_PROB_CLAMP)
        wq = np.clip(p_hat * (1.0 - p_hat), IRLS_WEIGHT_CLAMP, None)
        z = eta + (y - p_hat) / wq
        a = wq / n
        # intermediate quadratic subproblems need less accuracy than the
        # final polish; the loop exits only on the true KKT criterion
        if viol <= 20.0 * KKT_RTOL * scale:
            inner_tol = tol
        elif viol <= 200.0 * KKT_RTOL * scale:
            inner_tol = max(tol, 1e-7)
        else:
            inner_tol = max(tol, 1e-5)
        if p <= GRAM_MAX_P:
            b0, sweeps, ok = _weighted_gram_cd(
                X, a, z, beta, thr, free_idx, inner_tol,
                max_sweeps - total_sweeps, 0.1 * KKT_RTOL * scale)
            total_sweeps += max(sweeps, 1)
            eta = b0 + X @ beta
        else:
            csc = problem._binary_csc()
            if csc is not None:
                sjj = _binary_colsums(csc[0], csc[1], a, np.empty(p))
            else:
                sjj = np.einsum("ij,ij->j", X, a[:, None] * X)
            r = z - eta  # residual of the working response at the current point
            b0, sweeps, ok = _quadratic_cd(
                X, a, r, beta, b0, sjj, thr, free_idx, inner_tol,
                max_sweeps - total_sweeps, 0.1 * KKT_RTOL * scale, csc=csc)
            total_sweeps += max(sweeps, 1)
            eta = z - r  # identical to b0 + X @ beta, maintained incrementally
        if np.max(np.abs(beta)) > LOGISTIC_DIVERGENCE_BOUND:
            viol, _ = _kkt_violation(problem, lam, b0, beta)
            raise ConvergenceError("coefficients diverged (separation-like data)", viol)
        if total_sweeps >= max_sweeps:
            viol, _ = _kkt_violation(problem, lam, b0, beta)
            if viol > KKT_RTOL * scale:
                raise ConvergenceError(f"IRLS/CD hit {max_sweeps} sweeps", viol)
            break
    else:
        viol, _ = _kkt_violation(problem, lam, b0, beta)
        if viol > KKT_RTOL * scale:
            raise ConvergenceError(
                f"IRLS failed to converge in {LOGISTIC_MAX_OUTER} iterations", viol)
    return _finalize(problem, lam, b0, beta, total_sweeps, [])


def _null_residual(problem: LassoProblem):
    """Residual of the richest always-unpenalized model (intercept + w=0 cols).

    This is the point from which lambda_max is measured: at that lambda the
    solution keeps exactly the unpenalized columns and nothing else.
    """
    w = problem.penalty_factors
    zero_cols = np.nonzero(w == 0.0)[0]
    y = problem.y
    if zero_cols.size == 0:
        # intercept-only null model; for the logistic family p = mean(y)
        return y - y.mean()
    sub = LassoProblem(X=problem.X[:, zero_cols], y=y,
                       penalty_factors=np.zeros(zero_cols.size),
                       family=problem.family)
    if problem.family == "linear":
        sol = solve_weighted_lasso(sub, 0.0)
    else:
        sol = solve_logistic_lasso(sub, 0.0)
    fitted = sol.intercept + problem.X[:, zero_cols] @ sol.coefficients
    if problem.family == "logistic":
        return y - expit(fitted)
    return y - fitted


def lambda_grid(problem: LassoProblem, n_lambdas: int = 100,
                ratio: float = 1e-4) -> np.ndarray:
    """Descending log-spaced grid from lambda_max down to lambda_max * ratio.

    lambda_max is the smallest lambda at which every positively penalized
    coefficient is zero, derived from the KKT threshold at the null model:
    2|x_j' r0| / w_j for the linear family, |x_j' r0| / (n w_j) for the
    logistic one.
    """
    if n_lambdas < 1:
        raise LassoError("n_lambdas must be >= 1")
    if not (0 < ratio <= 1):
        raise LassoError("ratio must be in (0, 1]")
    w = problem.penalty_factors
    pos = np.isfinite(w) & (w > 0)
    if not np.any(np.isfinite(w)):
        raise LassoError("all penalty factors are +inf; nothing to fit")
    if not np.any(pos):
        raise LassoError("no positively penalized column; grid is undefined")
    r0 = _null_residual(problem)
    score = np.abs(problem.X[:, pos].T @ r0)
    if problem.family == "linear":
        lam_max = float(np.max(2.0 * score / w[pos]))
    else:
        lam_max = float(np.max(score / (problem.n * w[pos])))
    if lam_max <= 0:
        lam_max = 1e-3  # degenerate flat response; any tiny grid works
    lam_max *= 1.0 + 1e-10  # keep the top of the grid strictly all-zero
    if n_lambdas == 1:
        return np.array([lam_max])
    return lam_max * np.power(ratio, np.arange(n_lambdas) / (n_lambdas - 1))


def _dev_ratio(problem: LassoProblem, sol: LassoSolution) -> float:
    """Fraction of the null deviance explained (R^2 for the linear family)."""
    y = problem.y
    eta = sol.intercept + problem.X_raw @ sol.coefficients
    if problem.family == "linear":
        rss = float(np.sum((y - eta) ** 2))
        tss = float(np.sum((y - y.mean()) ** 2))
        return 1.0 - rss / tss if tss > 0 else 1.0
    p = np.clip(expit(eta), PROB_CLAMP, 1.0 - PROB_CLAMP)
    dev = -2.0 * float(np.sum(y * np.log(p) + (1.0 - y) * np.log1p(-p)))
    pbar = min(max(float(y.mean()), PROB_CLAMP), 1.0 - PROB_CLAMP)
    dev0 = -2.0 * float(np.sum(y * np.log(pbar) + (1.0 - y) * np.log1p(pbar - 1.0)))
    return 1.0 - dev / dev0 if dev0 > 0 else 1.0


def solve_path(problem: LassoProblem, grid: np.ndarray,
               stop_dev_ratio: float | None = None,
               stop_active_frac: float | None = None):
    """Warm-started solutions down a descending lambda grid.

    When stopping thresholds are given the path ends early once the fit
    saturates (deviance ratio or active count past the threshold), the usual
    guard against crawling through a useless overfit tail when p >= n.  The
    returned list may then be shorter than the grid.
    """
    grid = np.asarray(grid, dtype=float)
    if np.any(np.diff(grid) >= 0):
        raise LassoError("lambda grid must be strictly decreasing")
    sols = []
    warm = None
    resid = None
    for lam in grid:
        if problem.family == "linear":
            sol = solve_weighted_lasso(problem, float(lam), warm=warm,
                                       warm_residual=resid)
            resid = getattr(sol, "_residual", None)
        else:
            sol = solve_logistic_lasso(problem, float(lam), warm=warm)
        warm = (sol.intercept, sol.coefficients)
        sols.append(sol)
        if stop_active_frac is not None and \
                sol.active_set.size >= stop_active_frac * min(problem.n, problem.p):
            break
        if stop_dev_ratio is not None and \
                _dev_ratio(problem, sol) >= stop_dev_ratio:
            break
    return sols


def _fold_assignment(n: int, K: int, rng_seed) -> list[np.ndarray]:
    rng = np.random.default_rng(rng_seed)
    perm = rng.permutation(n)
    return [np.sort(part) for part in np.array_split(perm, K)]


CV_PATIENCE = 10


def _cv_fold_losses_pruned(problem, sub, sub_grid, grid, test_idx):
    """Fold losses for a large path, pruned once deeper fits stop helping.

    Fits lambda by lambda with warm starts, stopping after CV_PATIENCE
    consecutive non-improvements of the held-out loss or once the training
    fit saturates; the last fitted model's loss carries forward.  The
    overfit tail this skips can never win the argmin (its loss is at or
    above the running minimum, and ties resolve to the larger lambda).
    """
    X_te = problem.X_raw[test_idx]
    y_te = problem.y[test_idx]
    losses = np.empty(len(grid))
    warm = None
    resid = None
    best = np.inf
    stale = 0
    last = np.nan
    for i, lam in enumerate(sub_grid):
        if problem.family == "linear":
            sol = solve_weighted_lasso(sub, float(lam), warm=warm,
                                       warm_residual=resid)
            resid = getattr(sol, "_residual", None)
        else:
            sol = solve_logistic_lasso(sub, float(lam), warm=warm)
        warm = (sol.intercept, sol.coefficients)
        eta = sol.intercept + X_te @ sol.coefficients
        if problem.family == "linear":
            last = float(np.mean((y_te - eta) ** 2))
        else:
            pr = np.clip(expit(eta), PROB_CLAMP, 1.0 - PROB_CLAMP)
            last = float(np.mean(-2.0 * (y_te * np.log(pr)
                                         + (1.0 - y_te) * np.log1p(-pr))))
        losses[i] = last
        if last < best:
            best = last
            stale = 0
        else:
            stale += 1
        if stale >= CV_PATIENCE:
            break
        if sol.active_set.size >= 0.9 * min(sub.n, sub.p):
            break
        if _dev_ratio(sub, sol) >= 0.999:
            break
    losses[i + 1:] = last
    return losses


def _heldout_loss(problem, test_idx, b0s, betas, grid):
    X_te = problem.X_raw[test_idx]  # coefficients are in original scale
    y_te = problem.y[test_idx]
    eta = np.asarray(b0s)[None, :] + X_te @ np.column_stack(betas)  # (n_te, L)
    if problem.family == "linear":
        return np.mean((y_te[:, None] - eta) ** 2, axis=0)
    p = np.clip(expit(eta), PROB_CLAMP, 1.0 - PROB_CLAMP)
    dev = -2.0 * (y_te[:, None] * np.log(p) + (1.0 - y_te)[:, None] * np.log1p(-p))
    return np.mean(dev, axis=0)


def cv_select_lambda(problem: LassoProblem, K: int = 10,
                     grid: np.ndarray | None = None,
                     rng_seed=0) -> CvResult:
    """K-fold CV over the grid; chosen_lambda = argmin mean loss (ties: larger).

    Folds come from a seeded random permutation split into K near-equal
    parts; the result is a deterministic function of (problem, grid, seed).
    Linear-family fold fits rescale lambda by fold size (the objective is a
    raw sum of squares, so the per-observation penalty must stay constant).
    """
    if K < 2:
        raise LassoError("K must be >= 2")
    n = problem.n
    if n < K:
        raise LassoError(f"cannot make {K} folds from {n} rows")
    if grid is None:
        grid = lambda_grid(problem)
    grid = np.asarray(grid, dtype=float)
    folds = _fold_assignment(n, K, rng_seed)
    fold_losses = np.empty((K, len(grid)))
    all_rows = np.arange(n)
    for k, test_idx in enumerate(folds):
        if test_idx.size < 2:
            raise LassoError(f"fold {k} has fewer than 2 rows")
        train_idx = np.setdiff1d(all_rows, test_idx, assume_unique=True)
        sub = LassoProblem(X=problem.X_raw[train_idx], y=problem.y[train_idx],
                           penalty_factors=problem.penalty_factors,
                           family=problem.family,
                           standardize=problem.standardize)
        if problem.family == "linear":
            sub_grid = grid * (train_idx.size / n)
        else:
            sub_grid = grid
        if problem.p > GRAM_MAX_P:
            fold_losses[k] = _cv_fold_losses_pruned(problem, sub, sub_grid,
                                                    grid, test_idx)
        else:
            sols = solve_path(sub, sub_grid)
            b0s = [s.intercept for s in sols]
            betas = [s.coefficients for s in sols]
            fold_losses[k] = _heldout_loss(problem, test_idx, b0s, betas, grid)
    cv_mean = fold_losses.mean(axis=0)
    cv_se = fold_losses.std(axis=0, ddof=1) / np.sqrt(K)
    best = int(np.argmin(cv_mean))  # first index wins ties = largest lambda
    return CvResult(lambda_grid=grid, cv_mse=cv_mean, cv_se=cv_se,
                    chosen_lambda=float(grid[best]))
