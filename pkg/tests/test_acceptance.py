"""Acceptance suite: every numbered criterion as one test, each printing a
PASS/FAIL line with the measured values (run with -s or -rA to see them).

Monte Carlo runs are shared across criteria through module-scoped fixtures.
The high-dimensional HAL criterion is marked slow.
"""

import subprocess
import sys
import time

import numpy as np
import pytest
from scipy.special import expit
from scipy.stats import kstest, norm

from emlasso.lassocd import LassoProblem, lambda_grid, objective_value, \
    solve_weighted_lasso
from emlasso.selinf import (selection_polyhedron, selective_ci,
                            truncation_interval, truncnorm_cdf)
from emlasso.simlab import ScenarioConfig, run_replications


def report_line(criterion, ok, detail):
    status = "PASS" if ok else "FAIL"
    print(f"\n[acceptance] criterion {criterion}: {status} — {detail}")
    assert ok, f"criterion {criterion}: {detail}"


def metrics(report):
    by = {v.name: v for v in report.variables}
    return by, report.fcr


@pytest.fixture(scope="module")
def qcgc_n1000():
    cfg = ScenarioConfig(scenario="s1", implementation="qcgc", n=1000,
                         reps=1000, seed=20260809, threads=1)
    t0 = time.time()
    rep = run_replications(cfg)
    rep.wall_clock = time.time() - t0
    return rep


@pytest.fixture(scope="module")
def qcgc_n10000():
    cfg = ScenarioConfig(scenario="s1", implementation="qcgc", n=10_000,
                         reps=300, seed=20260810, threads=2)
    return run_replications(cfg)


class TestCriterion1:
    def test_table1_row_qcgc(self, qcgc_n1000):
        by, fcr = metrics(qcgc_n1000)
        want_mean = {"V1": 0.46, "V2": 0.00, "V3": 0.98, "V4": 0.00}
        want_sel = {"V1": 98, "V2": 21, "V3": 100, "V4": 21}
        ok = qcgc_n1000.failed_reps == 0
        parts = []
        for name in ("V1", "V2", "V3", "V4"):
            v = by[name]
            ok &= abs(v.mean_beta - want_mean[name]) <= 0.04
            ok &= abs(v.pct_sel - want_sel[name]) <= 4.0
            parts.append(f"{name}: mean={v.mean_beta:.3f} sel={v.pct_sel:.1f}")
        ok &= 0.03 <= fcr <= 0.08
        parts.append(f"FCR={fcr:.3f} wall={qcgc_n1000.wall_clock:.0f}s")
        report_line(1, ok, "; ".join(parts))


class TestCriterion2:
    def test_q_correct_double_robustness(self):
        cfg = ScenarioConfig(scenario="s1", implementation="qc", n=10_000,
                             reps=300, seed=20260811, threads=2)
        rep = run_replications(cfg)
        by, _ = metrics(rep)
        ok = (abs(by["V1"].mean_beta - 0.49) <= 0.03
              and abs(by["V3"].mean_beta - 0.99) <= 0.03)
        report_line(2, ok, f"V1 mean={by['V1'].mean_beta:.3f} (want 0.49±0.03), "
                           f"V3 mean={by['V3'].mean_beta:.3f} (want 0.99±0.03)")


class TestCriterion3:
    def test_g_correct_slower_convergence(self):
        cfg1 = ScenarioConfig(scenario="s1", implementation="gc", n=1000,
                              reps=1000, seed=20260812, threads=2)
        rep1 = run_replications(cfg1)
        by1, _ = metrics(rep1)
        cfg2 = ScenarioConfig(scenario="s1", implementation="gc", n=10_000,
                              reps=300, seed=20260813, threads=2)
        rep2 = run_replications(cfg2)
        by2, _ = metrics(rep2)
        ok = (0.26 <= by1["V1"].mean_beta <= 0.36
              and 47.0 <= by1["V1"].pct_sel <= 63.0
              and abs(by2["V1"].mean_beta - 0.47) <= 0.03)
        report_line(3, ok,
                    f"n=1000: V1 mean={by1['V1'].mean_beta:.3f} (want [0.26,0.36]) "
                    f"sel={by1['V1'].pct_sel:.1f} (want [47,63]); "
                    f"n=10000: V1 mean={by2['V1'].mean_beta:.3f} (want 0.47±0.03)")


class TestCriterion4:
    def test_oracle_trend(self, qcgc_n1000, qcgc_n10000):
        small, _ = metrics(qcgc_n1000)
        big, _ = metrics(qcgc_n10000)
        sel_drop = (big["V2"].pct_sel < small["V2"].pct_sel
                    and big["V4"].pct_sel < small["V4"].pct_sel)
        bias_small = abs(small["V1"].mean_beta - 0.5)
        bias_big = abs(big["V1"].mean_beta - 0.5)
        ok = sel_drop and bias_big < bias_small
        report_line(4, ok,
                    f"V2 sel {small['V2'].pct_sel:.1f}->{big['V2'].pct_sel:.1f}, "
                    f"V4 sel {small['V4'].pct_sel:.1f}->{big['V4'].pct_sel:.1f}, "
                    f"|V1 bias| {bias_small:.3f}->{bias_big:.3f}")


class TestCriterion5:
    def test_linear_comparators(self):
        nlin = run_replications(ScenarioConfig(
            scenario="s1", implementation="nlin", n=10_000, reps=300,
            seed=20260814, threads=2))
        by_n, _ = metrics(nlin)
        clin = run_replications(ScenarioConfig(
            scenario="s1", implementation="clin", n=10_000, reps=300,
            seed=20260815, threads=2))
        by_c, _ = metrics(clin)
        ok = (abs(by_n["V1"].mean_beta - 0.69) <= 0.03
              and by_n["V1"].pct_cov < 25.0)
        covs = [by_c[v].pct_cov for v in ("V1", "V2", "V3", "V4")]
        ok &= all(92.0 <= c <= 98.0 for c in covs)
        report_line(5, ok,
                    f"NLin V1 mean={by_n['V1'].mean_beta:.3f} (want 0.69±0.03) "
                    f"cov={by_n['V1'].pct_cov:.1f} (<25); "
                    f"CLin covs={['%.1f' % c for c in covs]} (want [92,98])")


class TestCriterion6:
    def test_truncnorm_quadrature(self):
        cases = [
            (9.0, 0.0, 1.0, 8.5, 10.0),
            (-9.7, 0.0, 1.0, -10.0, -9.5),
            (0.3, 0.0, 1.0, -1.0, 2.0),
            (12.4, 0.0, 4.0, 11.0, 14.0),
            (1.1, 1.0, 0.25, 0.9, np.inf),
            (-20.5, 0.0, 1.0, -21.0, -20.0),
            (15.2, 0.0, 1.0, 15.0, 15.5),
        ]
        worst = 0.0
        for case in cases:
            got = truncnorm_cdf(*case)
            want = _quadrature_cdf(*case)
            worst = max(worst, abs(got - want) / want)
        ok = worst < 1e-8
        report_line("6a", ok, f"max relative CDF error {worst:.2e} (< 1e-8)")

    def test_ci_grid_inversion(self):
        cases = [
            (0.45, 1.0, 0.0, np.inf, 0.05),
            (2.2, 0.64, 1.5, 3.0, 0.05),
            (-0.8, 0.25, -2.0, -0.5, 0.1),
            (5.1, 4.0, 4.0, np.inf, 0.05),
        ]
        worst = 0.0
        for est, s2, nu_lo, nu_hi, alpha in cases:
            lo, hi = selective_ci(est, s2, nu_lo, nu_hi, alpha)
            sigma = np.sqrt(s2)
            glo, ghi = _grid_inversion_oracle(est, s2, nu_lo, nu_hi, alpha)
            worst = max(worst, abs(lo - glo) / sigma, abs(hi - ghi) / sigma)
        ok = worst < 1e-4
        report_line("6b", ok, f"max CI endpoint error {worst:.2e} sigma (< 1e-4)")

    def test_polyhedron_membership(self):
        violations = 0
        checked = 0
        for seed in range(20):
            rng = np.random.default_rng(7000 + seed)
            n, p = 60, 5
            X = rng.standard_normal((n, p))
            beta_true = np.array([1.5, -1.0, 0, 0, 0])
            y = 1.0 + X @ beta_true + rng.standard_normal(n)
            w = rng.uniform(0.7, 1.5, p)
            lam = 0.25 * float(np.max(2 * np.abs(X.T @ (y - y.mean())) / w))
            prob = LassoProblem(X=X, y=y, penalty_factors=w, family="linear")
            sol = solve_weighted_lasso(prob, lam)
            V = np.column_stack([np.ones(n), X])
            wf = np.concatenate([[0.0], w])
            poly = selection_polyhedron(V, lam, wf, sol.active_set + 1,
                                        sol.signs)
            key = (tuple(sol.active_set), tuple(sol.signs))
            bscale = max(1.0, float(np.abs(poly.b).max(initial=0.0)))
            for _ in range(100):
                y2 = y + 0.35 * np.std(y) * rng.standard_normal(n)
                slack = poly.slack(y2)
                if slack.size and np.min(np.abs(slack)) < 1e-7 * bscale:
                    continue
                inside = bool(slack.size == 0 or np.all(slack >= 0))
                s2 = solve_weighted_lasso(
                    LassoProblem(X=X, y=y2, penalty_factors=w,
                                 family="linear"), lam)
                same = (tuple(s2.active_set), tuple(s2.signs)) == key
                checked += 1
                if inside != same:
                    violations += 1
        ok = violations == 0 and checked >= 1800
        report_line("6c", ok,
                    f"{violations} membership violations over {checked} perturbations")


class TestCriterion7:
    def test_pivot_uniformity(self):
        # known-truth Gaussian linear model, orthonormal design, fixed lambda
        rng = np.random.default_rng(31415)
        n, p = 100, 5
        raw = rng.standard_normal((n, p))
        Q, _ = np.linalg.qr(raw - raw.mean(axis=0))
        X = Q  # centered orthonormal columns
        beta_true = np.array([0.35, -0.25, 0.15, 0.0, 0.0])
        sigma = 1.0
        mu = 1.0 + X @ beta_true
        w = np.ones(p)
        lam = 0.18  # keeps selection genuinely random across replications
        pivots = []
        for _ in range(2000):
            y = mu + sigma * rng.standard_normal(n)
            prob = LassoProblem(X=X, y=y, penalty_factors=w, family="linear")
            sol = solve_weighted_lasso(prob, lam)
            if sol.active_set.size == 0:
                continue
            V = np.column_stack([np.ones(n), X])
            wf = np.concatenate([[0.0], w])
            poly = selection_polyhedron(V, lam, wf, sol.active_set + 1,
                                        sol.signs)
            e_cols = np.concatenate([[0], sol.active_set + 1])
            V_E = V[:, e_cols]
            H = np.linalg.inv(V_E.T @ V_E)
            etas = V_E @ H
            for t, j in enumerate(sol.active_set, start=1):
                eta = etas[:, t]
                target = float(eta @ mu)
                s2 = sigma ** 2 * float(eta @ eta)
                nu_lo, nu_hi = truncation_interval(poly, y, eta, s2)
                pivots.append(truncnorm_cdf(float(eta @ y), target, s2,
                                            nu_lo, nu_hi))
        stat = kstest(pivots, "uniform")
        ok = stat.pvalue > 0.01 and len(pivots) >= 2000
        report_line(7, ok, f"KS p={stat.pvalue:.4f} over {len(pivots)} pivots "
                           f"(need p > 0.01)")


@pytest.mark.slow
class TestCriterion8:
    def test_high_dimensional_hal(self):
        cfg = ScenarioConfig(scenario="hd1", implementation="hal", n=1000,
                             reps=100, seed=20260816, threads=2)
        t0 = time.time()
        rep = run_replications(cfg)
        wall = time.time() - t0
        by, fcr = metrics(rep)
        noise_sel = [by[f"N{i:02d}"].pct_sel for i in range(1, 51)]
        med = float(np.median(noise_sel))
        ok = (abs(by["V1"].mean_beta - 0.43) <= 0.06
              and abs(by["V3"].mean_beta - 0.95) <= 0.06
              and 9.0 <= med <= 20.0
              and fcr > 0.08
              and rep.failed_reps == 0)
        report_line(8, ok,
                    f"V1 mean={by['V1'].mean_beta:.3f} (0.43±0.06), "
                    f"V3 mean={by['V3'].mean_beta:.3f} (0.95±0.06), "
                    f"median noise sel={med:.1f} ([9,20]), FCR={fcr:.3f} (>0.08), "
                    f"failed={rep.failed_reps}, wall={wall/60:.1f}min")


class TestCriterion9:
    def test_solver_oracles(self):
        worst_gap = -np.inf
        for seed in range(50):
            rng = np.random.default_rng(8000 + seed)
            n = 30
            X = rng.standard_normal((n, 2))
            y = rng.standard_normal(n)
            w = rng.uniform(0.5, 2.0, 2)
            lam = float(rng.uniform(0.5, 5.0))
            prob = LassoProblem(X=X, y=y, penalty_factors=w, family="linear")
            sol = solve_weighted_lasso(prob, lam)
            assert sol.converged
            obj = objective_value(prob, lam, sol.intercept, sol.coefficients)
            g = np.linspace(-3, 3, 200)
            B1, B2 = np.meshgrid(g, g, indexing="ij")
            R = y[:, None] - (X[:, [0]] * B1.ravel() + X[:, [1]] * B2.ravel())
            R = R - R.mean(axis=0)
            grid_min = float(np.min(
                np.sum(R * R, axis=0)
                + lam * (w[0] * np.abs(B1.ravel()) + w[1] * np.abs(B2.ravel()))))
            worst_gap = max(worst_gap, obj - grid_min)
        ok_grid = worst_gap <= 1e-6

        worst_ols = 0.0
        for seed in range(10):
            rng = np.random.default_rng(8100 + seed)
            X = rng.standard_normal((50, 4))
            y = rng.standard_normal(50)
            prob = LassoProblem(X=X, y=y, penalty_factors=np.ones(4),
                                family="linear")
            sol = solve_weighted_lasso(prob, 0.0)
            from emlasso.linmod import fit_ols
            ols = fit_ols(np.column_stack([np.ones(50), X]), y)
            worst_ols = max(worst_ols,
                            float(np.max(np.abs(
                                np.concatenate([[sol.intercept],
                                                sol.coefficients])
                                - ols.coefficients))))
        ok_ols = worst_ols <= 1e-8
        ok = ok_grid and ok_ols
        report_line(9, ok, f"objective excess over grid min {worst_gap:.2e} "
                           f"(<=1e-6); lambda=0 vs OLS {worst_ols:.2e} (<=1e-8); "
                           f"KKT verified on every solve (converged flags)")


class TestCriterion10:
    def test_thread_count_invariance_cli(self, tmp_path):
        base = [sys.executable, "-m", "emlasso.cli", "simulate",
                "--scenario", "s1", "--impl", "qcgc", "--n", "400",
                "--reps", "8", "--seed", "77"]
        a = tmp_path / "t1"
        b = tmp_path / "t2"
        r1 = subprocess.run(base + ["--threads", "1", "--out", str(a)],
                            capture_output=True)
        r2 = subprocess.run(base + ["--threads", "2", "--out", str(b)],
                            capture_output=True)
        ok = (r1.returncode == 0 and r2.returncode == 0
              and (a.parent / "t1.csv").read_bytes() == (b.parent / "t2.csv").read_bytes()
              and (a.parent / "t1.json").read_bytes() == (b.parent / "t2.json").read_bytes())
        report_line(10, ok, "simulate outputs byte-identical across --threads 1/2")


class TestSmokeRuns:
    """Runs that must execute and emit reports without quantitative gates
    (plus the small-n sanity window)."""

    def test_small_n_qcgc(self):
        cfg = ScenarioConfig(scenario="s1", implementation="qcgc", n=100,
                             reps=500, seed=20260817, threads=2)
        rep = run_replications(cfg)
        by, _ = metrics(rep)
        ok = (abs(by["V1"].mean_beta - 0.39) <= 0.08
              and abs(by["V3"].mean_beta - 0.85) <= 0.08)
        report_line("smoke-n100", ok,
                    f"V1 mean={by['V1'].mean_beta:.3f} (0.39±0.08), "
                    f"V3 mean={by['V3'].mean_beta:.3f} (0.85±0.08), "
                    f"failed={rep.failed_reps}/500")

    def test_scenario3_emits_report(self, tmp_path):
        cfg = ScenarioConfig(scenario="s3", implementation="qcgc", n=500,
                             reps=20, seed=20260818, threads=2)
        rep = run_replications(cfg)
        from emlasso.simlab import report_to_csv, report_to_json
        report_to_csv(rep, tmp_path / "s3.csv")
        report_to_json(rep, tmp_path / "s3.json")
        ok = (tmp_path / "s3.csv").exists() and rep.failed_reps < 20
        report_line("smoke-s3", ok, f"S3 executed, failed={rep.failed_reps}/20")


def _quadrature_cdf(x, mu, sigma2, lo, hi, points=50_001):
    sigma = np.sqrt(sigma2)
    lo_eff = mu - 12 * sigma if not np.isfinite(lo) else lo
    hi_eff = mu + 12 * sigma if not np.isfinite(hi) else hi

    def chunk(a, b):
        if b <= a:
            return 0.0
        t = np.linspace(a, b, points)
        f = np.exp(-0.5 * ((t - mu) / sigma) ** 2)
        h = t[1] - t[0]
        return h / 3 * (f[0] + f[-1] + 4 * f[1:-1:2].sum() + 2 * f[2:-1:2].sum())

    return chunk(lo_eff, min(x, hi_eff)) / chunk(lo_eff, hi_eff)


def _grid_inversion_oracle(est, s2, nu_lo, nu_hi, alpha):
    """Vectorized independent pivot evaluation over a 10^6-point mu grid."""
    sigma = np.sqrt(s2)
    mus = np.linspace(est - 20 * sigma, est + 20 * sigma, 1_000_000)
    a = (nu_lo - mus) / sigma if np.isfinite(nu_lo) else np.full_like(mus, -np.inf)
    b = (nu_hi - mus) / sigma if np.isfinite(nu_hi) else np.full_like(mus, np.inf)
    xi = (est - mus) / sigma
    # log-space evaluation, written independently of the module under test
    log_sf = norm.logsf
    log_cdf = norm.logcdf
    piv = np.empty_like(mus)
    right = a >= 0
    left = b <= 0
    mid = ~right & ~left
    if right.any():
        la, lx = log_sf(a[right]), log_sf(xi[right])
        lb = log_sf(b[right]) if np.isfinite(nu_hi) else np.full(right.sum(), -np.inf)
        num = la + np.log1p(-np.exp(np.minimum(lx - la, 0.0)))
        den = la + np.log1p(-np.exp(np.minimum(lb - la, 0.0)))
        piv[right] = np.exp(num - den)
    if left.any():
        lb_, lx = log_cdf(b[left]), log_cdf(xi[left])
        la_ = log_cdf(a[left]) if np.isfinite(nu_lo) else np.full(left.sum(), -np.inf)
        num = lx + np.log1p(-np.exp(np.minimum(la_ - lx, 0.0)))
        den = lb_ + np.log1p(-np.exp(np.minimum(la_ - lb_, 0.0)))
        piv[left] = np.exp(num - den)
    if mid.any():
        piv[mid] = (norm.cdf(xi[mid]) - norm.cdf(a[mid])) / \
            (norm.cdf(b[mid]) - norm.cdf(a[mid]))
    lo = mus[int(np.argmin(np.abs(piv - (1 - alpha / 2))))]
    hi = mus[int(np.argmin(np.abs(piv - alpha / 2)))]
    return lo, hi
