import itertools
import json

import numpy as np
import pytest
from scipy.special import expit

from emlasso.simlab import (ReplicationRecord, ScenarioConfig, SimLabError,
                            coverage, fcr, generate_scenario,
                            implementation_specs, load_report,
                            naive_linear_analysis, percent_selection,
                            report_to_csv, report_to_json, run_replications,
                            scenario_truth)


def config(**kw):
    base = dict(scenario="s1", implementation="qcgc", n=1000, reps=1, seed=0)
    base.update(kw)
    return ScenarioConfig(**base)


class TestGeneration:
    def test_s1_truth_coefficients(self):
        truth = scenario_truth("s1")
        np.testing.assert_array_equal(truth.beta, [0.5, 0.0, 1.0, 0.0])
        assert truth.beta0 == 1.0
        assert truth.em_names == ("V1", "V3")

    def test_cate_by_cell_enumeration(self):
        # brute force: Y(1)-Y(0) averaged over every covariate cell matches
        # the linear truth exactly for the first two scenarios
        for scenario in ("s1", "s2"):
            cfg = config(scenario=scenario, n=200)
            table, truth = generate_scenario(cfg, np.random.default_rng(0))
            diff = truth.q1 - truth.q0
            lin = truth.beta0 + table.subset_columns(
                ["V1", "V2", "V3", "V4"]) @ truth.beta
            np.testing.assert_allclose(diff, lin, atol=1e-12)

    def test_propensity_at_origin(self):
        cfg = config(n=5000)
        table, truth = generate_scenario(cfg, np.random.default_rng(1))
        zero_rows = np.all(table.subset_columns(["Z", "X", "V1", "V2"]) == 0,
                           axis=1)
        assert zero_rows.any()
        np.testing.assert_allclose(truth.g1[zero_rows], 0.5)

    @pytest.mark.slow
    def test_marginal_means_large_n(self):
        cfg = config(n=100_000)
        table, _ = generate_scenario(cfg, np.random.default_rng(2))
        want = dict(X=0.4, V1=0.5, V2=0.6, V3=0.5, V4=0.7, Z=0.45)
        for name, p in want.items():
            assert table.column(name).mean() == pytest.approx(p, abs=0.01)

    @pytest.mark.slow
    def test_treated_prevalence_matches_enumeration(self):
        # exact oracle: enumerate the 2^4 cells of (Z, X, V1, V2)
        probs = dict(Z=0.45, X=0.4, V1=0.5, V2=0.6)
        mean_g = 0.0
        for z, x, v1, v2 in itertools.product([0, 1], repeat=4):
            w = ((probs["Z"] if z else 1 - probs["Z"])
                 * (probs["X"] if x else 1 - probs["X"])
                 * (probs["V1"] if v1 else 1 - probs["V1"])
                 * (probs["V2"] if v2 else 1 - probs["V2"]))
            mean_g += w * expit(0.5 * z - 0.2 * x + 0.3 * v1 + 0.4 * v2)
        cfg = config(n=100_000)
        table, _ = generate_scenario(cfg, np.random.default_rng(3))
        assert table.treatment.mean() == pytest.approx(mean_g, abs=0.01)

    def test_s2_drops_triple_interaction(self):
        c1 = config(scenario="s1", n=4000)
        c2 = config(scenario="s2", n=4000)
        t1, _ = generate_scenario(c1, np.random.default_rng(9))
        t2, _ = generate_scenario(c2, np.random.default_rng(9))
        # identical draws; outcomes differ exactly by 4*V1*V2*V3
        np.testing.assert_array_equal(t1.covariates, t2.covariates)
        triple = t1.column("V1") * t1.column("V2") * t1.column("V3")
        np.testing.assert_allclose(t1.outcome - t2.outcome, 4.0 * triple,
                                   atol=1e-12)

    def test_hd1_adds_noise_candidates(self):
        cfg = config(scenario="hd1", n=100)
        table, truth = generate_scenario(cfg, np.random.default_rng(4))
        assert len(truth.candidate_names) == 54
        assert table.covariates.shape[1] == 56
        assert truth.candidate_names[4] == "N01"
        np.testing.assert_array_equal(truth.beta[4:], 0.0)

    def test_s3_scaling(self):
        truth = scenario_truth("s3")
        assert truth.beta0 == 0.25
        np.testing.assert_array_equal(truth.beta, [0.5, 0.0, 1.0, 0.0])


class TestImplementationSpecs:
    def test_qc_misspecifies_g_as_x_only(self):
        plan = implementation_specs("s1", "qc")
        assert plan.g_spec.labels() == ["1", "X"]

    def test_s2_correct_q_omits_triple(self):
        plan = implementation_specs("s2", "qcgc")
        assert "V1*V2*V3" not in plan.q_spec.labels()
        plan1 = implementation_specs("s1", "qcgc")
        assert "V1*V2*V3" in plan1.q_spec.labels()

    def test_gc_misspecifies_q(self):
        plan = implementation_specs("s1", "gc")
        assert plan.q_spec.labels() == ["1", "A", "V3"]

    def test_nlin_has_all_first_order_interactions(self):
        plan = implementation_specs("s1", "nlin")
        labels = plan.comparator.labels()
        for c in ("X", "V1", "V2", "V3", "V4", "Z"):
            assert c in labels and f"A*{c}" in labels
        assert "V1*V2*V3" not in labels

    def test_clin_contains_truth_plus_null_interactions(self):
        plan = implementation_specs("s1", "clin")
        labels = plan.comparator.labels()
        for lbl in ("V1*V2*V3", "A*V1", "A*V2", "A*V3", "A*V4"):
            assert lbl in labels

    def test_unknown_combination(self):
        with pytest.raises(SimLabError):
            implementation_specs("s9", "qcgc")


class TestNaiveLinear:
    def test_noiseless_truth_gives_tiny_pvalues(self):
        cfg = config(scenario="s1", implementation="clin", n=2000)
        table, truth = generate_scenario(cfg, np.random.default_rng(5))
        # rebuild the outcome without noise from the truth record
        noiseless = np.where(table.treatment == 1, truth.q1, truth.q0)
        from emlasso.tabular import ObservationTable
        t2 = ObservationTable(table.covariate_names, table.covariates,
                              table.treatment, noiseless)
        plan = implementation_specs("s1", "clin")
        est, lo, hi, pv = naive_linear_analysis(t2, plan.comparator,
                                                truth.candidate_names)
        assert pv[0] < 1e-12 and pv[2] < 1e-12
        np.testing.assert_allclose(est, truth.beta, atol=1e-8)

    def test_interval_contains_estimate(self):
        cfg = config(scenario="s1", implementation="nlin", n=800)
        table, truth = generate_scenario(cfg, np.random.default_rng(6))
        plan = implementation_specs("s1", "nlin")
        est, lo, hi, pv = naive_linear_analysis(table, plan.comparator,
                                                truth.candidate_names)
        assert np.all(lo < est) and np.all(est < hi)


def fake_record(rep, beta, selected, ci_lo, ci_hi):
    p = len(beta)
    return ReplicationRecord(
        rep=rep, beta=np.asarray(beta, float),
        selected=np.asarray(selected, bool),
        ci_lo=np.asarray(ci_lo, float), ci_hi=np.asarray(ci_hi, float),
        p_value=np.full(p, np.nan))


class TestMetrics:
    def setup_method(self):
        self.truth = scenario_truth("s1")

    def test_percent_selection_arithmetic(self):
        nan4 = [np.nan] * 4
        recs = [fake_record(0, [0.4, 0, 1, 0], [1, 0, 1, 0], nan4, nan4),
                fake_record(1, [0.5, 0, 1, 0], [1, 0, 1, 0], nan4, nan4),
                fake_record(2, [0.0, 0, 1, 0], [0, 0, 1, 0], nan4, nan4)]
        assert percent_selection(recs, 0) == pytest.approx(66.6666666, abs=1e-4)
        assert percent_selection(recs, 1) == 0.0

    def test_coverage_exact_model_rule(self):
        # two true-model selections, CI covers once for V1
        em = [1, 0, 1, 0]
        recs = [
            fake_record(0, [0.4, 0, 1, 0], em,
                        [0.2, np.nan, 0.8, np.nan], [0.6, np.nan, 1.2, np.nan]),
            fake_record(1, [0.9, 0, 1, 0], em,
                        [0.8, np.nan, 0.9, np.nan], [1.0, np.nan, 1.3, np.nan]),
            fake_record(2, [0.5, 0.2, 1, 0], [1, 1, 1, 0],
                        [0.3, 0.1, 0.9, np.nan], [0.7, 0.3, 1.1, np.nan]),
        ]
        assert coverage(recs, self.truth, 0) == pytest.approx(50.0)
        assert coverage(recs, self.truth, 2) == pytest.approx(100.0)
        assert coverage(recs, self.truth, 1) is None

    def test_coverage_none_when_never_exact(self):
        recs = [fake_record(0, [0.4, 0.1, 1, 0], [1, 1, 1, 0],
                            [0.2, 0, 0.8, np.nan], [0.6, 0.2, 1.2, np.nan])]
        assert coverage(recs, self.truth, 0) is None

    def test_fcr_arithmetic(self):
        recs = [
            fake_record(0, [0.4, 0, 1, 0], [1, 0, 1, 0],
                        [0.2, np.nan, 0.8, np.nan], [0.6, np.nan, 1.2, np.nan]),
            fake_record(1, [0.9, 0.2, 1, 0], [1, 1, 1, 0],
                        [0.8, 0.1, 0.9, np.nan], [1.0, 0.3, 1.3, np.nan]),
        ]
        # five selected intervals; misses: V1 in rep1 ([0.8,1.0] vs 0.5) and
        # V2 in rep1 ([0.1,0.3] vs 0)
        assert fcr(recs, self.truth) == pytest.approx(2 / 5)

    def test_fcr_none_without_selections(self):
        recs = [fake_record(0, [0, 0, 0, 0], [0, 0, 0, 0],
                            [np.nan] * 4, [np.nan] * 4)]
        assert fcr(recs, self.truth) is None

    def test_fcr_coverage_consistency(self):
        # a non-covering CI in a true-model rep lowers coverage and raises FCR
        em = [1, 0, 1, 0]
        good = fake_record(0, [0.5, 0, 1, 0], em,
                           [0.3, np.nan, 0.8, np.nan], [0.7, np.nan, 1.2, np.nan])
        bad = fake_record(1, [0.9, 0, 1, 0], em,
                          [0.8, np.nan, 0.8, np.nan], [1.0, np.nan, 1.2, np.nan])
        cov_good = coverage([good], self.truth, 0)
        cov_both = coverage([good, bad], self.truth, 0)
        assert cov_both < cov_good
        assert fcr([good, bad], self.truth) > fcr([good], self.truth)


class TestRunner:
    def test_single_rep_aggregation(self):
        rep = run_replications(config(n=400, reps=1, seed=5))
        assert rep.failed_reps == 0
        assert len(rep.records) == 1
        rec = rep.records[0]
        for j, v in enumerate(rep.variables):
            assert v.mean_beta == pytest.approx(rec.beta[j])
            assert v.pct_sel == (100.0 if rec.selected[j] else 0.0)

    def test_failed_reps_counted_not_dropped(self):
        # folds of size 1 make cross-validation impossible: every rep fails
        rep = run_replications(config(n=15, reps=3, seed=6, cv_folds=10))
        assert rep.failed_reps == 3
        assert len(rep.records) == 0
        assert all(np.isnan(v.mean_beta) for v in rep.variables)

    def test_threads_do_not_change_report(self, tmp_path):
        cfg1 = config(n=300, reps=6, seed=11, threads=1)
        cfg2 = config(n=300, reps=6, seed=11, threads=2)
        r1 = run_replications(cfg1)
        r2 = run_replications(cfg2)
        p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
        report_to_json(r1, p1)
        report_to_json(r2, p2)
        assert p1.read_bytes() == p2.read_bytes()
        c1, c2 = tmp_path / "a.csv", tmp_path / "b.csv"
        report_to_csv(r1, c1)
        report_to_csv(r2, c2)
        assert c1.read_bytes() == c2.read_bytes()

    def test_comparator_runner(self):
        rep = run_replications(config(implementation="clin", n=500, reps=4,
                                      seed=7))
        assert rep.failed_reps == 0
        assert rep.variables[0].pct_cov is not None  # unconditional coverage


class TestSerialization:
    def make_report(self):
        return run_replications(config(n=300, reps=3, seed=8))

    def test_json_round_trip(self, tmp_path):
        rep = self.make_report()
        path = tmp_path / "r.json"
        report_to_json(rep, path)
        payload = load_report(path)
        assert payload["schema"] == 1
        assert payload["config"]["n"] == 300
        assert len(payload["variables"]) == 4
        assert payload["variables"][0]["name"] == "V1"

    def test_csv_round_trip(self, tmp_path):
        rep = self.make_report()
        path = tmp_path / "r.csv"
        report_to_csv(rep, path)
        payload = load_report(path)
        assert [v["name"] for v in payload["variables"]] == \
            ["V1", "V2", "V3", "V4"]
        assert payload["failed_reps"] == 0

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "e.json"
        path.write_text("")
        with pytest.raises(SimLabError):
            load_report(path)

    def test_schema_mismatch_rejected(self, tmp_path):
        path = tmp_path / "r.json"
        path.write_text(json.dumps({"schema": 99}))
        with pytest.raises(SimLabError):
            load_report(path)
