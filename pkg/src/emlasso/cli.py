"""Command-line front end: fit a dataset, run simulations, render reports.

Exit codes: 0 success, 2 usage/validation error, 3 numerical failure.
The EMLASSO_SEED environment variable supplies the default seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .drpseudo import PseudoOutcomeError
from .emselect import HalModel, PipelineError, PipelineOptions, run_pipeline
from .hal import HalError
from .lassocd import LassoError
from .linmod import LinModError
from .selinf import SelInfError
from .simlab import (ScenarioConfig, SimLabError, load_report,
                     report_to_csv, report_to_json, run_replications)
from .tabular import EmCandidateSet, TabularError, load_csv, parse_formula

NUMERIC_ERRORS = (PipelineError, LinModError, LassoError, SelInfError,
                  PseudoOutcomeError, HalError, np.linalg.LinAlgError)


def _default_seed() -> int:
    env = os.environ.get("EMLASSO_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise TabularError(f"EMLASSO_SEED must be an integer, got {env!r}") from None


def _parse_trunc(value: str | None):
    if value is None:
        return None
    parts = [p for p in value.replace(",", " ").split() if p]
    try:
        nums = [float(p) for p in parts]
    except ValueError:
        raise TabularError(f"--trunc expects numbers, got {value!r}") from None
    if len(nums) == 1:
        lo = nums[0]
        nums = [lo, 1.0 - lo]
    if len(nums) != 2 or not (0 < nums[0] < nums[1] < 1):
        raise TabularError(f"--trunc needs 0 < lo < hi < 1, got {value!r}")
    return (nums[0], nums[1])


def _parse_model(text: str, family: str, table, *, allow_treatment: bool):
    if text.strip().lower() == "hal":
        return HalModel()
    spec = parse_formula(text, family=family)
    for term in spec.terms:
        if term.with_treatment and not allow_treatment:
            raise TabularError("the g-model formula cannot reference A")
        for cov in term.covariates:
            if cov not in table.covariate_names:
                raise TabularError(
                    f"formula references unknown column {cov!r}")
    return spec


def cmd_fit(args) -> int:
    table = load_csv(args.data, args.treatment, args.outcome)
    em_names = tuple(nm.strip() for nm in args.em.split(",") if nm.strip())
    if not em_names:
        raise TabularError("--em needs at least one candidate name")
    em = EmCandidateSet(em_names)
    em.validate_against(table)
    q_spec = _parse_model(args.q_model, "linear", table, allow_treatment=True)
    g_spec = _parse_model(args.g_model, "logistic", table, allow_treatment=False)
    trunc = _parse_trunc(args.trunc)
    options = PipelineOptions(gamma=args.gamma, alpha=args.alpha, trunc=trunc,
                              cv_folds=args.cv_folds, seed=args.seed)
    result = run_pipeline(table, q_spec, g_spec, em, options)
    fit = result.fit
    payload = {
        "selected": list(fit.active_names),
        "intercept": fit.beta0,
        "lambda": fit.lam,
        "coefficients": {nm: float(b) for nm, b in zip(fit.candidate_names,
                                                       fit.beta)},
        "pilot": {nm: float(b) for nm, b in zip(fit.candidate_names,
                                                fit.pilot_coefficients)},
        "pilot_sigma2": fit.pilot_sigma2,
        "intervals": [
            {"name": iv.name, "estimate": iv.estimate, "ci_lo": iv.ci_lo,
             "ci_hi": iv.ci_hi, "p_value": iv.p_value,
             "nu_lo": None if np.isinf(iv.nu_lo) else iv.nu_lo,
             "nu_hi": None if np.isinf(iv.nu_hi) else iv.nu_hi}
            for iv in result.intervals
        ],
        "nuisance": {
            **{k: v for k, v in result.diagnostics.items()},
            "truncation": list(trunc) if trunc else None,
        },
        "config": {
            "data": args.data, "treatment": args.treatment,
            "outcome": args.outcome, "em": list(em_names),
            "q_model": args.q_model, "g_model": args.g_model,
            "alpha": args.alpha, "gamma": args.gamma,
            "cv_folds": args.cv_folds, "seed": args.seed,
            "trunc": list(trunc) if trunc else None,
        },
    }
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {args.out} (selected: {', '.join(fit.active_names) or 'none'})")
    return 0


def cmd_simulate(args) -> int:
    config = ScenarioConfig(
        scenario=args.scenario, implementation=args.impl, n=args.n,
        reps=args.reps, seed=args.seed, alpha=args.alpha,
        cv_folds=args.cv_folds, gamma=args.gamma,
        trunc=_parse_trunc(args.trunc), threads=args.threads)
    report = run_replications(config)
    report_to_csv(report, args.out + ".csv")
    report_to_json(report, args.out + ".json")
    print(f"wrote {args.out}.csv and {args.out}.json "
          f"({report.failed_reps} failed reps, "
          f"{report.wall_clock:.1f}s)", file=sys.stderr)
    return 0


def _render_reports(payloads) -> str:
    names = [v["name"] for v in payloads[0]["variables"]]
    for payload in payloads[1:]:
        if [v["name"] for v in payload["variables"]] != names:
            raise SimLabError("reports list different variables; cannot align")
    def fmt(x, digits):
        return "" if x is None else f"{x:.{digits}f}"
    group_header = f"{'mean_beta':>10}  {'%sel':>6}  {'%cov':>6}  {'FCR':>6}"
    lines = ["Coef    " + "  | ".join(group_header for _ in payloads)]
    for i, name in enumerate(names):
        cells = []
        for payload in payloads:
            v = payload["variables"][i]
            fcr_txt = ""
            if i == 0 and payload["fcr"] is not None:
                fcr_txt = f"{100.0 * payload['fcr']:.1f}"
            cells.append(f"{fmt(v['mean_beta'], 3):>10}  {fmt(v['pct_sel'], 1):>6}"
                         f"  {fmt(v['pct_cov'], 1):>6}  {fcr_txt:>6}")
        lines.append(f"{name:<8}" + "  | ".join(cells))
    return "\n".join(lines)


def cmd_report(args) -> int:
    payloads = [load_report(path) for path in args.paths]
    print(_render_reports(payloads))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="emlasso",
        description="Doubly robust adaptive-LASSO effect-modifier discovery")
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="fit one dataset and write a JSON result")
    fit.add_argument("--data", required=True, help="CSV file with header row")
    fit.add_argument("--treatment", required=True)
    fit.add_argument("--outcome", required=True)
    fit.add_argument("--em", required=True,
                     help="comma-separated candidate effect modifiers")
    fit.add_argument("--q-model", required=True,
                     help="outcome model formula, or 'hal'")
    fit.add_argument("--g-model", required=True,
                     help="treatment model formula, or 'hal'")
    fit.add_argument("--trunc", default=None,
                     help="propensity truncation: 'lo' (hi = 1 - lo) or 'lo,hi'")
    fit.add_argument("--alpha", type=float, default=0.05)
    fit.add_argument("--gamma", type=float, default=1.0)
    fit.add_argument("--cv-folds", type=int, default=10)
    fit.add_argument("--seed", type=int, default=None)
    fit.add_argument("--out", required=True, help="output JSON path")

    sim = sub.add_parser("simulate", help="run a Monte Carlo scenario")
    sim.add_argument("--scenario", required=True,
                     choices=["s1", "s2", "s3", "hd1"])
    sim.add_argument("--impl", required=True,
                     choices=["qcgc", "qc", "gc", "hal", "nlin", "clin"])
    sim.add_argument("--n", type=int, required=True)
    sim.add_argument("--reps", type=int, required=True)
    sim.add_argument("--seed", type=int, default=None)
    sim.add_argument("--alpha", type=float, default=0.05)
    sim.add_argument("--gamma", type=float, default=1.0)
    sim.add_argument("--cv-folds", type=int, default=10)
    sim.add_argument("--trunc", default=None)
    sim.add_argument("--threads", type=int, default=1)
    sim.add_argument("--out", required=True, help="output path prefix")

    rep = sub.add_parser("report", help="render report files side by side")
    rep.add_argument("paths", nargs="+", help="JSON or CSV report files")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if getattr(args, "seed", None) is None and args.command in ("fit", "simulate"):
            args.seed = _default_seed()
        if args.command == "fit":
            return cmd_fit(args)
        if args.command == "simulate":
            return cmd_simulate(args)
        return cmd_report(args)
    except (TabularError, SimLabError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NUMERIC_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
