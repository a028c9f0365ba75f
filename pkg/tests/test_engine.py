import math

import numpy as np
import pytest

from qpdstrat import (
    Oracle,
    Shots,
    bootstrap_variance_ci,
    build_local_qpd,
    counts_of,
    counts_statistic,
    exact_stratum_moments,
    forward_dp,
    normalized_absolute_variance,
    pad_and_assemble,
    parity_dp,
    parse_model,
    residual_hamilton_allocate,
    run_naive,
    run_stratified,
    variance_ratio,
)
from qpdstrat.util import substream


class ConstantEvaluator:
    obs_norm = 1.0
    pauli_outcomes = True

    def __init__(self, value, g1norm=1.0):
        self.value = value
        self.g1norm = g1norm

    def __call__(self, config, model, rng):
        return self.value


class CountsEvaluator:
    """Outcome depends on the configuration only through its counts vector."""

    obs_norm = 1.0
    pauli_outcomes = True

    def __init__(self, qpd):
        self.qpd = qpd
        self.g1norm = qpd.norm1

    def __call__(self, config, model, rng):
        m = counts_of(config, self.qpd.width)
        return 0.1 * m[0] - 0.05 * m[-1]


def small_qpd():
    return pad_and_assemble(
        [build_local_qpd([0.6, -0.4]), build_local_qpd([0.8, 0.2]), build_local_qpd([0.5, -0.5])]
    )


def plan_for(table, budget):
    items = table.positive_items()
    keys = [k for k, _ in items]
    w = np.array([v for _, v in items])
    return residual_hamilton_allocate(w / w.sum(), budget, keys=keys)


class TestModels:
    def test_parse(self):
        assert parse_model("oracle") == Oracle()
        assert parse_model("shots:64") == Shots(64)
        with pytest.raises(ValueError):
            parse_model("exact")
        with pytest.raises(ValueError):
            Shots(0)

    def test_tags(self):
        assert Oracle().tag() == "oracle" and Oracle().r == 0
        assert Shots(8).tag() == "shots" and Shots(8).r == 8


class TestRunNaive:
    def test_constant_outcome(self):
        report = run_naive(small_qpd(), ConstantEvaluator(0.7), 64, Oracle(), seed=0)
        assert report.mean == pytest.approx(0.7)
        assert report.var_hat == pytest.approx(0.0, abs=1e-30)
        assert report.ci[1] == pytest.approx(0.0, abs=1e-30)

    def test_seed_determinism(self):
        qpd = small_qpd()
        ev = CountsEvaluator(qpd)
        a = run_naive(qpd, ev, 256, Oracle(), seed=5)
        b = run_naive(qpd, ev, 256, Oracle(), seed=5)
        assert a.mean == b.mean and a.var_hat == b.var_hat and a.ci == b.ci
        c = run_naive(qpd, ev, 256, Oracle(), seed=6)
        assert c.mean != a.mean

    def test_worker_invariance(self):
        qpd = small_qpd()
        ev = CountsEvaluator(qpd)
        a = run_naive(qpd, ev, 2048, Oracle(), seed=1, workers=1)
        b = run_naive(qpd, ev, 2048, Oracle(), seed=1, workers=4)
        np.testing.assert_array_equal(a.samples, b.samples)
        assert a.ci == b.ci

    def test_outcome_bound_enforced(self):
        qpd = small_qpd()
        with pytest.raises(AssertionError):
            run_naive(qpd, ConstantEvaluator(10.0, g1norm=qpd.norm1), 16, Oracle(), seed=0)

    def test_minimum_draws(self):
        with pytest.raises(ValueError):
            run_naive(small_qpd(), ConstantEvaluator(0.0), 1, Oracle(), seed=0)


class TestRunStratified:
    def test_counts_sufficient_evaluator_zero_variance(self):
        qpd = small_qpd()
        table = forward_dp(qpd)
        plan = plan_for(table, 128)
        report = run_stratified(qpd, table, plan, CountsEvaluator(qpd), Oracle(), seed=0)
        assert report.var_hat == pytest.approx(0.0, abs=1e-18)
        # the estimate collapses onto the exact weighted mean over strata
        exact = sum(
            w * (0.1 * m[0] - 0.05 * m[-1]) for m, w in table.positive_items()
        )
        assert report.mean == pytest.approx(exact, rel=1e-10)

    def test_residual_bucket_sampled(self):
        qpd = small_qpd()
        table = forward_dp(qpd)
        plan = plan_for(table, 5)
        assert plan.residual_count >= 1
        report = run_stratified(qpd, table, plan, CountsEvaluator(qpd), Oracle(), seed=2)
        assert report.stratum_counts["residual"] == plan.residual_count

    def test_worker_invariance(self):
        qpd = small_qpd()
        table = forward_dp(qpd)
        plan = plan_for(table, 512)
        ev = CountsEvaluator(qpd)
        a = run_stratified(qpd, table, plan, ev, Shots(4), seed=3, workers=1)
        b = run_stratified(qpd, table, plan, ev, Shots(4), seed=3, workers=4)
        assert a.mean == b.mean and a.var_hat == b.var_hat and a.ci == b.ci

    def test_plan_table_mismatch(self):
        qpd = small_qpd()
        table = forward_dp(qpd)
        bad = residual_hamilton_allocate([0.5, 0.5], 16, keys=[(9, 9, 9), (8, 8, 8)])
        with pytest.raises(ValueError, match="missing"):
            run_stratified(qpd, table, bad, CountsEvaluator(qpd), Oracle(), seed=0)

    def test_singleton_strata_flagged(self):
        qpd = small_qpd()
        table = forward_dp(qpd)
        plan = plan_for(table, 6)
        report = run_stratified(qpd, table, plan, CountsEvaluator(qpd), Shots(1), seed=0)
        singles = [k for k, c in report.stratum_counts.items() if c == 1]
        assert set(report.singleton_strata) == set(singles)

    def test_parity_table_design(self):
        qpd = small_qpd()
        table = parity_dp(qpd)
        plan = plan_for(table, 64)
        report = run_stratified(qpd, table, plan, CountsEvaluator(qpd), Oracle(), seed=1, statistic="parity")
        assert report.design == "stratified-parity"
        assert report.k == 64

    def test_report_json_round_trip(self):
        import json

        qpd = small_qpd()
        table = forward_dp(qpd)
        plan = plan_for(table, 32)
        report = run_stratified(qpd, table, plan, CountsEvaluator(qpd), Shots(2), seed=1)
        data = json.loads(json.dumps(report.to_json_dict()))
        assert data["K"] == 32 and data["R"] == 2 and data["model"] == "shots"
        assert data["var_hat"] == report.var_hat
        realised = sum(n for _, n, _ in data["strata"])
        assert realised == 32

    def test_report_csv_row_matches_header(self):
        from qpdstrat.engine import CSV_HEADER

        qpd = small_qpd()
        report = run_naive(qpd, CountsEvaluator(qpd), 16, Oracle(), seed=0)
        row = report.to_row("demo")
        assert len(row) == len(CSV_HEADER.split(","))
        assert row[:3] == ["demo", "naive", "oracle"]

    def test_unbiased_against_enumeration(self, golden_circuit, golden_evaluator, golden_table, golden_enumeration):
        plan = plan_for(golden_table, 512)
        means = [
            run_stratified(golden_circuit.qpd, golden_table, plan, golden_evaluator, Oracle(), seed=s).mean
            for s in range(24)
        ]
        moments = exact_stratum_moments(golden_enumeration, counts_statistic(4))
        from qpdstrat import exact_implemented_variance

        se = np.sqrt(exact_implemented_variance(moments, plan) / len(means))
        assert abs(np.mean(means) - golden_enumeration.mu) < 4 * se


class TestBootstrap:
    def test_constant_data_zero_interval(self):
        stats, ci, flagged = bootstrap_variance_ci(
            [(1.0, np.full(32, 1.5))], b=64, rng=np.random.default_rng(0)
        )
        assert ci == (0.0, 0.0)
        assert not flagged

    def test_singleton_group_flagged(self):
        stats, ci, flagged = bootstrap_variance_ci(
            [(0.5, np.array([1.0])), (0.5, np.arange(8.0))], b=64, rng=np.random.default_rng(0)
        )
        assert flagged == (0,)

    def test_percentile_interval_brackets_point(self):
        rng = np.random.default_rng(4)
        samples = rng.normal(size=512)
        stats, (lo, hi), _ = bootstrap_variance_ci([(1.0, samples)], b=1024, rng=np.random.default_rng(1))
        point = np.var(samples, ddof=1) / samples.size
        assert lo < point < hi
        assert stats.size == 1024

    def test_group_sizes_preserved(self):
        # statistic distribution depends on the group split, not the pooled data
        rng = np.random.default_rng(5)
        g1 = rng.normal(size=100)
        g2 = rng.normal(size=10) * 3.0
        stats, _, _ = bootstrap_variance_ci([(0.7, g1), (0.3, g2)], b=256, rng=np.random.default_rng(2))
        expected_scale = 0.49 * np.var(g1, ddof=1) / 100 + 0.09 * np.var(g2, ddof=1) / 10
        assert np.median(stats) == pytest.approx(expected_scale, rel=0.5)


class TestRatioAndNormalisation:
    def test_ratio_requires_matching_runs(self):
        qpd = small_qpd()
        ev = CountsEvaluator(qpd)
        a = run_naive(qpd, ev, 64, Shots(2), seed=0)
        b = run_naive(qpd, ev, 64, Shots(4), seed=0)
        with pytest.raises(ValueError):
            variance_ratio(a, b)

    def test_zero_naive_variance_rejected(self):
        qpd = small_qpd()
        a = run_naive(qpd, ConstantEvaluator(0.3), 64, Oracle(), seed=0)
        with pytest.raises(ValueError):
            variance_ratio(a, a)

    def test_ratio_point_and_interval(self, golden_circuit, golden_evaluator, golden_table):
        qpd = golden_circuit.qpd
        plan = plan_for(golden_table, 1024)
        strat = run_stratified(qpd, golden_table, plan, golden_evaluator, Oracle(), seed=11)
        naive = run_naive(qpd, golden_evaluator, 1024, Oracle(), seed=11)
        est = variance_ratio(strat, naive)
        assert est.rho == pytest.approx(strat.var_hat / naive.var_hat)
        assert est.ci[0] < est.rho < est.ci[1]

    def test_normalized_variance_cancels_in_ratio(self, golden_circuit, golden_evaluator, golden_table):
        qpd = golden_circuit.qpd
        plan = plan_for(golden_table, 512)
        strat = run_stratified(qpd, golden_table, plan, golden_evaluator, Shots(1), seed=4)
        naive = run_naive(qpd, golden_evaluator, 512, Shots(1), seed=4)
        lhs = normalized_absolute_variance(strat) / normalized_absolute_variance(naive)
        assert lhs == pytest.approx(variance_ratio(strat, naive).rho, rel=1e-12)

    def test_normalized_bound_single_shot(self, golden_circuit, golden_evaluator):
        report = run_naive(golden_circuit.qpd, golden_evaluator, 2048, Shots(1), seed=9)
        half = (report.ci[1] - report.ci[0]) / 2.0 / report.g1norm**2
        assert normalized_absolute_variance(report) <= 1.0 / 2048 + 5.0 * half


def test_substreams_independent_of_order():
    a = substream(7, 1, 3).random(4)
    _ = substream(7, 1, 2).random(4)
    b = substream(7, 1, 3).random(4)
    np.testing.assert_array_equal(a, b)


class TestStatisticalCalibration:
    def test_naive_mean_within_four_sigma(self, golden_circuit, golden_evaluator, golden_enumeration):
        # self-consistency of the plug-in error bar across seeded runs
        qpd = golden_circuit.qpd
        hits = 0
        runs = 200
        for s in range(runs):
            rep = run_naive(qpd, golden_evaluator, 256, Oracle(), seed=1000 + s, bootstrap=8)
            hits += abs(rep.mean - golden_enumeration.mu) < 4.0 * math.sqrt(rep.var_hat)
        assert hits / runs >= 0.98

    def test_bootstrap_interval_covers_true_design_variance(
        self, golden_circuit, golden_evaluator, golden_enumeration
    ):
        from qpdstrat import exact_design_variance

        qpd = golden_circuit.qpd
        budget = 256
        truth = exact_design_variance(golden_enumeration, Oracle()) / budget
        hits = 0
        runs = 200
        for s in range(runs):
            rep = run_naive(qpd, golden_evaluator, budget, Oracle(), seed=10_000 + s)
            hits += rep.ci[0] <= truth <= rep.ci[1]
        assert hits / runs >= 0.90
