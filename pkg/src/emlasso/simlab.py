"""Monte Carlo laboratory: data-generating scenarios, the six estimator
implementations, replication running, and summary metrics.

Scenarios share six independent Bernoulli covariates (three confounders
X, V1, V2; one instrument Z; two outcome-only causes V3, V4); the
high-dimensional variant adds 50 Bernoulli(0.5) noise covariates that enter
both the nuisance models and the candidate set.  The treatment-effect truth
is linear in (V1, V3) with coefficients (0.5, 1) in every scenario.
"""

from __future__ import annotations

import concurrent.futures
import csv
import json
import multiprocessing
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit
from scipy.stats import t as t_dist

from .emselect import HalModel, PipelineError, PipelineOptions, run_pipeline
from .lassocd import ConvergenceError, LassoError
from .linmod import LinModError, fit_ols
from .tabular import EmCandidateSet, ModelSpec, ObservationTable, Term

__all__ = [
    "SimLabError",
    "ScenarioConfig",
    "ScenarioTruth",
    "ImplSpec",
    "ReplicationRecord",
    "VariableSummary",
    "SimulationReport",
    "generate_scenario",
    "scenario_truth",
    "implementation_specs",
    "naive_linear_analysis",
    "percent_selection",
    "coverage",
    "fcr",
    "run_replications",
    "report_to_csv",
    "report_to_json",
    "load_report",
]

SCENARIOS = ("s1", "s2", "s3", "hd1")
IMPLEMENTATIONS = ("qcgc", "qc", "gc", "hal", "nlin", "clin")
N_NOISE = 50

_BASE_COVS = (("X", 0.4), ("V1", 0.5), ("V2", 0.6), ("V3", 0.5),
              ("V4", 0.7), ("Z", 0.45))


class SimLabError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str
    implementation: str
    n: int
    reps: int
    seed: int = 0
    alpha: float = 0.05
    cv_folds: int = 10
    gamma: float = 1.0
    trunc: tuple[float, float] | None = None
    threads: int = 1

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise SimLabError(f"unknown scenario {self.scenario!r}")
        if self.implementation not in IMPLEMENTATIONS:
            raise SimLabError(f"unknown implementation {self.implementation!r}")
        if self.n < 2:
            raise SimLabError("n must be >= 2")
        if self.reps < 1:
            raise SimLabError("reps must be >= 1")

    def echo(self) -> dict:
        # threads deliberately omitted: reports must not depend on scheduling
        return {
            "scenario": self.scenario,
            "implementation": self.implementation,
            "n": self.n,
            "reps": self.reps,
            "seed": self.seed,
            "alpha": self.alpha,
            "cv_folds": self.cv_folds,
            "gamma": self.gamma,
            "trunc": list(self.trunc) if self.trunc else None,
        }


@dataclass(frozen=True)
class ScenarioTruth:
    candidate_names: tuple[str, ...]
    beta0: float
    beta: np.ndarray
    em_names: tuple[str, ...]
    q0: np.ndarray | None = None   # row-wise true nuisances, when generated
    q1: np.ndarray | None = None
    g1: np.ndarray | None = None

    @property
    def em_mask(self) -> np.ndarray:
        return np.array([nm in self.em_names for nm in self.candidate_names])


def _scenario_params(scenario: str):
    prop_scale = 3.0 if scenario == "s3" else 1.0
    out_scale = 0.25 if scenario == "s3" else 1.0
    if scenario == "s2":
        triple = 0.0
    elif scenario == "s3":
        triple = 1.0
    else:
        triple = 4.0
    return prop_scale, out_scale, triple


def _propensity_lp(cols: dict, scenario: str) -> np.ndarray:
    scale, _, _ = _scenario_params(scenario)
    return scale * (0.5 * cols["Z"] - 0.2 * cols["X"]
                    + 0.3 * cols["V1"] + 0.4 * cols["V2"])


def _outcome_mean(cols: dict, a: np.ndarray, scenario: str) -> np.ndarray:
    _, s, triple = _scenario_params(scenario)
    return (s * (1.0 + a - 0.5 * cols["X"] + 2.0 * cols["V1"] + cols["V2"]
                 + cols["V3"] - 0.2 * cols["V4"])
            + triple * cols["V1"] * cols["V2"] * cols["V3"]
            + a * (0.5 * cols["V1"] + cols["V3"]))


def _candidate_names(scenario: str) -> tuple[str, ...]:
    names = ["V1", "V2", "V3", "V4"]
    if scenario == "hd1":
        names += [f"N{i:02d}" for i in range(1, N_NOISE + 1)]
    return tuple(names)


def scenario_truth(scenario: str) -> ScenarioTruth:
    if scenario not in SCENARIOS:
        raise SimLabError(f"unknown scenario {scenario!r}")
    names = _candidate_names(scenario)
    _, out_scale, _ = _scenario_params(scenario)
    beta = np.zeros(len(names))
    beta[names.index("V1")] = 0.5
    beta[names.index("V3")] = 1.0
    return ScenarioTruth(candidate_names=names, beta0=out_scale * 1.0,
                         beta=beta, em_names=("V1", "V3"))


def generate_scenario(config: ScenarioConfig,
                      rep_rng: np.random.Generator):
    """One simulated dataset plus the truth record for oracle checks."""
    n = config.n
    scenario = config.scenario
    cov_specs = list(_BASE_COVS)
    if scenario == "hd1":
        cov_specs += [(f"N{i:02d}", 0.5) for i in range(1, N_NOISE + 1)]
    cols = {}
    for name, prob in cov_specs:
        cols[name] = (rep_rng.random(n) < prob).astype(float)
    lp = _propensity_lp(cols, scenario)
    g1 = expit(lp)
    a = (rep_rng.random(n) < g1).astype(float)
    noise = rep_rng.standard_normal(n)
    y = _outcome_mean(cols, a, scenario) + noise
    table = ObservationTable(
        covariate_names=tuple(nm for nm, _ in cov_specs),
        covariates=np.column_stack([cols[nm] for nm, _ in cov_specs]),
        treatment=a,
        outcome=y,
    )
    base = scenario_truth(scenario)
    truth = replace(base,
                    q0=_outcome_mean(cols, np.zeros(n), scenario),
                    q1=_outcome_mean(cols, np.ones(n), scenario),
                    g1=g1)
    return table, truth


@dataclass(frozen=True)
class ImplSpec:
    kind: str                      # "pipeline" or "comparator"
    q_spec: object | None = None   # ModelSpec or HalModel
    g_spec: object | None = None
    comparator: ModelSpec | None = None


def _t(*covs, a=False) -> Term:
    return Term(covariates=tuple(covs), with_treatment=a)


def _correct_q_terms(scenario: str) -> list[Term]:
    terms = [_t(), _t(a=True), _t("X"), _t("V1"), _t("V2"), _t("V3"), _t("V4")]
    if scenario != "s2":
        terms.append(_t("V1", "V2", "V3"))
    terms += [_t("V1", a=True), _t("V3", a=True)]
    return terms


def _correct_g_spec() -> ModelSpec:
    return ModelSpec(terms=(_t(), _t("Z"), _t("X"), _t("V1"), _t("V2")),
                     family="logistic")


def implementation_specs(scenario: str, implementation: str) -> ImplSpec:
    """Model specifications for one (scenario, implementation) cell."""
    if scenario not in SCENARIOS:
        raise SimLabError(f"unknown scenario {scenario!r}")
    candidates = _candidate_names(scenario)
    all_covs = [nm for nm, _ in _BASE_COVS]
    if scenario == "hd1":
        all_covs += [f"N{i:02d}" for i in range(1, N_NOISE + 1)]
    if implementation == "qcgc":
        return ImplSpec("pipeline",
                        q_spec=ModelSpec(tuple(_correct_q_terms(scenario))),
                        g_spec=_correct_g_spec())
    if implementation == "qc":
        return ImplSpec("pipeline",
                        q_spec=ModelSpec(tuple(_correct_q_terms(scenario))),
                        g_spec=ModelSpec(terms=(_t(), _t("X")), family="logistic"))
    if implementation == "gc":
        return ImplSpec("pipeline",
                        q_spec=ModelSpec(terms=(_t(), _t(a=True), _t("V3"))),
                        g_spec=_correct_g_spec())
    if implementation == "hal":
        return ImplSpec("pipeline", q_spec=HalModel(), g_spec=HalModel())
    if implementation == "nlin":
        terms = [_t(), _t(a=True)] + [_t(c) for c in all_covs] \
            + [_t(c, a=True) for c in all_covs]
        return ImplSpec("comparator", comparator=ModelSpec(tuple(terms)))
    if implementation == "clin":
        terms = _correct_q_terms(scenario)
        have = {t for t in terms}
        for c in candidates:
            t = _t(c, a=True)
            if t not in have:
                terms.append(t)
        return ImplSpec("comparator", comparator=ModelSpec(tuple(terms)))
    raise SimLabError(f"unknown implementation {implementation!r}")


def naive_linear_analysis(table: ObservationTable, spec: ModelSpec,
                          candidates, alpha: float = 0.05):
    """OLS fit; per-candidate treatment-interaction estimate, Wald CI, p.

    CIs use t critical values with n - k degrees of freedom.
    """
    from .tabular import build_design
    X = build_design(table, spec)
    fit = fit_ols(X, table.outcome, term_names=spec.labels())
    n, k = X.shape
    dof = n - k
    tcrit = float(t_dist.ppf(1.0 - alpha / 2.0, dof))
    est = np.full(len(candidates), np.nan)
    lo = np.full(len(candidates), np.nan)
    hi = np.full(len(candidates), np.nan)
    pv = np.full(len(candidates), np.nan)
    labels = spec.labels()
    for j, name in enumerate(candidates):
        label = f"A*{name}"
        if label not in labels:
            raise SimLabError(f"comparator spec lacks the {label} term")
        idx = labels.index(label)
        b = fit.coefficients[idx]
        se = float(np.sqrt(fit.residual_variance * fit.gram_inverse[idx, idx]))
        est[j] = b
        lo[j] = b - tcrit * se
        hi[j] = b + tcrit * se
        tstat = b / se if se > 0 else np.inf
        pv[j] = 2.0 * float(t_dist.sf(abs(tstat), dof))
    return est, lo, hi, pv


@dataclass(frozen=True)
class ReplicationRecord:
    rep: int
    beta: np.ndarray
    selected: np.ndarray
    ci_lo: np.ndarray      # NaN where no interval exists
    ci_hi: np.ndarray
    p_value: np.ndarray
    lam: float = np.nan


def _replicate(config: ScenarioConfig, rep: int):
    """One replication; returns a ReplicationRecord or an error string."""
    rng = np.random.default_rng([config.seed, rep])
    table, truth = generate_scenario(config, rng)
    plan = implementation_specs(config.scenario, config.implementation)
    p = len(truth.candidate_names)
    try:
        if plan.kind == "pipeline":
            options = PipelineOptions(gamma=config.gamma, alpha=config.alpha,
                                      trunc=config.trunc,
                                      cv_folds=config.cv_folds,
                                      seed=(config.seed, rep))
            res = run_pipeline(table, plan.q_spec, plan.g_spec,
                               EmCandidateSet(truth.candidate_names), options)
            beta = res.fit.beta
            selected = beta != 0.0
            ci_lo = np.full(p, np.nan)
            ci_hi = np.full(p, np.nan)
            pv = np.full(p, np.nan)
            for iv in res.intervals:
                ci_lo[iv.index] = iv.ci_lo
                ci_hi[iv.index] = iv.ci_hi
                pv[iv.index] = iv.p_value
            return ReplicationRecord(rep=rep, beta=beta, selected=selected,
                                     ci_lo=ci_lo, ci_hi=ci_hi, p_value=pv,
                                     lam=res.fit.lam)
        est, lo, hi, pv = naive_linear_analysis(
            table, plan.comparator, truth.candidate_names, config.alpha)
        return ReplicationRecord(rep=rep, beta=est, selected=pv < config.alpha,
                                 ci_lo=lo, ci_hi=hi, p_value=pv)
    except (PipelineError, LinModError, LassoError, ConvergenceError,
            np.linalg.LinAlgError, ValueError) as exc:
        return f"rep {rep}: {exc}"


def percent_selection(records, j: int) -> float:
    """100 * fraction of replications in which candidate j was selected."""
    if not records:
        return 0.0
    return 100.0 * sum(bool(r.selected[j]) for r in records) / len(records)


def coverage(records, truth: ScenarioTruth, j: int,
             rule: str = "exact-model"):
    """Percent CI coverage of the true coefficient for candidate j.

    "exact-model": denominator restricted to replications whose selected set
    equals the true effect-modifier set exactly (None when that never
    happens).  "unconditional": every replication counts, as used for the
    plain linear comparators.
    """
    target = truth.beta[j]
    if rule == "unconditional":
        hits = [1.0 if r.ci_lo[j] <= target <= r.ci_hi[j] else 0.0
                for r in records]
        return 100.0 * float(np.mean(hits)) if hits else None
    em_mask = truth.em_mask
    chosen = [r for r in records if np.array_equal(r.selected, em_mask)]
    if not chosen:
        return None
    if not em_mask[j]:
        return None  # candidate never has an interval in a true-model rep
    hits = [1.0 if r.ci_lo[j] <= target <= r.ci_hi[j] else 0.0 for r in chosen]
    return 100.0 * float(np.mean(hits))


def fcr(records, truth: ScenarioTruth):
    """Pooled false coverage rate over all selected coefficients."""
    miss = 0
    total = 0
    for r in records:
        for j in np.nonzero(r.selected)[0]:
            total += 1
            if not (r.ci_lo[j] <= truth.beta[j] <= r.ci_hi[j]):
                miss += 1
    return miss / total if total else None


@dataclass(frozen=True)
class VariableSummary:
    name: str
    mean_beta: float
    pct_sel: float
    pct_cov: float | None


@dataclass
class SimulationReport:
    config: ScenarioConfig
    variables: list[VariableSummary]
    fcr: float | None
    failed_reps: int
    wall_clock: float = 0.0
    records: list = field(default_factory=list, repr=False)
    failures: list = field(default_factory=list, repr=False)


def run_replications(config: ScenarioConfig) -> SimulationReport:
    """Run all replications (optionally in worker processes) and aggregate.

    Per-rep RNG streams derive from (seed, rep), so the report is a
    deterministic function of the config regardless of parallelism.
    """
    start = time.time()
    results: dict[int, object] = {}
    reps = range(config.reps)
    if config.threads > 1:
        ctx = multiprocessing.get_context("fork")
        with concurrent.futures.ProcessPoolExecutor(
                max_workers=config.threads, mp_context=ctx) as pool:
            futures = {pool.submit(_replicate, config, r): r for r in reps}
            for fut in concurrent.futures.as_completed(futures):
                results[futures[fut]] = fut.result()
    else:
        for r in reps:
            results[r] = _replicate(config, r)
    records = []
    failures = []
    for r in reps:  # rep order, independent of completion order
        out = results[r]
        if isinstance(out, str):
            failures.append(out)
        else:
            records.append(out)
    truth = scenario_truth(config.scenario)
    rule = ("unconditional"
            if config.implementation in ("nlin", "clin") else "exact-model")
    variables = []
    for j, name in enumerate(truth.candidate_names):
        mean_beta = (float(np.mean([r.beta[j] for r in records]))
                     if records else float("nan"))
        variables.append(VariableSummary(
            name=name,
            mean_beta=mean_beta,
            pct_sel=percent_selection(records, j),
            pct_cov=coverage(records, truth, j, rule=rule),
        ))
    return SimulationReport(config=config, variables=variables,
                            fcr=fcr(records, truth),
                            failed_reps=len(failures),
                            wall_clock=time.time() - start,
                            records=records, failures=failures)


def _fmt(x) -> str:
    if x is None:
        return ""
    return f"{x:.10g}"


def report_to_csv(report: SimulationReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variable", "mean_beta", "pct_sel", "pct_cov",
                         "fcr", "failed_reps"])
        for v in report.variables:
            writer.writerow([v.name, _fmt(v.mean_beta), _fmt(v.pct_sel),
                             _fmt(v.pct_cov), _fmt(report.fcr),
                             report.failed_reps])


def report_to_json(report: SimulationReport, path) -> None:
    payload = {
        "schema": 1,
        "config": report.config.echo(),
        "variables": [
            {"name": v.name, "mean_beta": v.mean_beta, "pct_sel": v.pct_sel,
             "pct_cov": v.pct_cov}
            for v in report.variables
        ],
        "fcr": report.fcr,
        "failed_reps": report.failed_reps,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_report(path) -> dict:
    """Read a report produced by report_to_json or report_to_csv."""
    path = str(path)
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    if not text.strip():
        raise SimLabError(f"{path}: empty report file")
    if path.endswith(".json"):
        payload = json.loads(text)
        if payload.get("schema") != 1:
            raise SimLabError(f"{path}: unsupported schema {payload.get('schema')!r}")
        return payload
    rows = list(csv.reader(text.splitlines()))
    header = rows[0]
    expected = ["variable", "mean_beta", "pct_sel", "pct_cov", "fcr",
                "failed_reps"]
    if header != expected:
        raise SimLabError(f"{path}: unexpected CSV header {header}")
    variables = []
    fcr_val = None
    failed = 0
    for rec in rows[1:]:
        variables.append({
            "name": rec[0],
            "mean_beta": float(rec[1]),
            "pct_sel": float(rec[2]),
            "pct_cov": float(rec[3]) if rec[3] else None,
        })
        fcr_val = float(rec[4]) if rec[4] else None
        failed = int(rec[5])
    return {"schema": 1, "config": None, "variables": variables,
            "fcr": fcr_val, "failed_reps": failed}
