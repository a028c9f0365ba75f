import itertools
import math

import numpy as np
import pytest

from qpdstrat import (
    EmptyStratumError,
    ResourceLimitError,
    build_local_qpd,
    concentration_profile,
    conditional_pmf,
    conditional_sample,
    conditional_sample_parity,
    counts_of,
    cumulative_state_count,
    forward_dp,
    merge_counts_to_parity,
    pad_and_assemble,
    parity_dp,
    stratum_count,
)

from conftest import random_product_qpd


def brute_force_counts_weights(qpd):
    """Independent reference: enumerate all configurations and bin by counts."""
    probs = [l.probs for l in qpd.locals]
    out = {}
    for config in itertools.product(range(qpd.width), repeat=qpd.nu):
        p = 1.0
        for i, k in enumerate(config):
            p *= probs[i][k]
        if p == 0.0:
            continue
        m = counts_of(config, qpd.width)
        out[m] = out.get(m, 0.0) + p
    return out


def pec_qpd(nu=7, p=0.01):
    lam = 1.0 - 4.0 * p / 3.0
    coeffs = [(lam + 3.0) / (4.0 * lam)] + [(lam - 1.0) / (4.0 * lam)] * 3
    return pad_and_assemble([build_local_qpd(coeffs) for _ in range(nu)])


class TestCountsOf:
    def test_examples(self):
        assert counts_of((0, 0, 0), 2) == (3, 0)
        assert counts_of((0, 2, 2, 1), 4) == (1, 1, 2, 0)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(0)
        config = list(rng.integers(4, size=9))
        m = counts_of(config, 4)
        for _ in range(5):
            rng.shuffle(config)
            assert counts_of(config, 4) == m

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            counts_of((0, 5), 3)


class TestStratumCount:
    def test_examples(self):
        assert stratum_count(7, 4) == 120
        assert stratum_count(7, 1) == 1
        for nu in (0, 3, 9):
            assert stratum_count(nu, 2) == nu + 1

    def test_big_integers(self):
        assert stratum_count(10**6, 5) == math.comb(10**6 + 4, 4)

    def test_cumulative_matches_layer_sum(self):
        for nu, d in ((7, 4), (5, 3), (0, 2)):
            direct = sum(stratum_count(i, d) for i in range(nu + 1))
            assert cumulative_state_count(nu, d) == direct


class TestForwardDp:
    def test_homogeneous_binomial(self):
        qpd = pad_and_assemble([build_local_qpd([0.5, 0.5])] * 2)
        table = forward_dp(qpd)
        assert table.final_weights[(2, 0)] == pytest.approx(0.25)
        assert table.final_weights[(1, 1)] == pytest.approx(0.5)
        assert table.final_weights[(0, 2)] == pytest.approx(0.25)

    def test_hand_computed_with_point_mass(self):
        qpd = pad_and_assemble([build_local_qpd([1.0, 0.0]), build_local_qpd([0.5, 0.5])])
        table = forward_dp(qpd)
        assert table.final_weights[(2, 0)] == pytest.approx(0.5)
        assert table.final_weights[(1, 1)] == pytest.approx(0.5)
        assert table.final_weights[(0, 2)] == 0.0

    def test_pec_instance_strata(self):
        table = forward_dp(pec_qpd())
        assert len(table.final_weights) == 120
        assert sum(table.final_weights.values()) == pytest.approx(1.0, abs=1e-10)
        assert all(w > 0.0 for w in table.final_weights.values())

    def test_layer_invariants(self):
        rng = np.random.default_rng(2)
        qpd = random_product_qpd(rng, nu=6, width=3)
        table = forward_dp(qpd)
        assert table.layers[0] == {(0, 0, 0): 1.0}
        for i, layer in enumerate(table.layers):
            assert sum(layer.values()) == pytest.approx(1.0, abs=1e-10)
            assert len(layer) <= stratum_count(i, qpd.width)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(42)
        for _ in range(15):
            qpd = random_product_qpd(rng, nu=int(rng.integers(2, 8)), width=int(rng.integers(2, 4)))
            table = forward_dp(qpd)
            ref = brute_force_counts_weights(qpd)
            for m, w in table.final_weights.items():
                assert w == pytest.approx(ref.get(m, 0.0), abs=1e-10)

    def test_state_cap(self):
        qpd = pec_qpd(nu=7)
        with pytest.raises(ResourceLimitError, match="300"):
            forward_dp(qpd, state_cap=300)

    def test_forced_renormalisation_preserves_results(self):
        rng = np.random.default_rng(8)
        qpd = random_product_qpd(rng, nu=6, width=3, allow_zero=False)
        plain = forward_dp(qpd)
        scaled = forward_dp(qpd, renorm_threshold=2.0)
        assert any(s != 0.0 for s in scaled.layer_scales)
        for m, w in plain.final_weights.items():
            assert scaled.final_weights[m] == pytest.approx(w, rel=1e-12, abs=1e-300)
        config = conditional_sample(plain, max(plain.final_weights, key=plain.final_weights.get), np.random.default_rng(0))
        assert scaled.conditional_pmf(config) == pytest.approx(plain.conditional_pmf(config), rel=1e-12)


class TestConditionalSampling:
    def test_symmetric_two_orderings(self):
        qpd = pad_and_assemble([build_local_qpd([0.5, 0.5])] * 2)
        table = forward_dp(qpd)
        assert conditional_pmf(table, (0, 1)) == pytest.approx(0.5)
        assert conditional_pmf(table, (1, 0)) == pytest.approx(0.5)

    def test_forced_stratum(self):
        qpd = pad_and_assemble([build_local_qpd([0.7, 0.3])] * 4)
        table = forward_dp(qpd)
        rng = np.random.default_rng(1)
        assert conditional_sample(table, (4, 0), rng) == (0, 0, 0, 0)

    def test_asymmetric_bayes_example(self):
        # two admissible orderings with probabilities 0.45 and 0.05
        qpd = pad_and_assemble([build_local_qpd([0.9, 0.1]), build_local_qpd([0.5, 0.5])])
        table = forward_dp(qpd)
        assert conditional_pmf(table, (0, 1)) == pytest.approx(0.45 / 0.50)
        assert conditional_pmf(table, (1, 0)) == pytest.approx(0.05 / 0.50)

    def test_counts_always_match(self):
        rng = np.random.default_rng(3)
        qpd = random_product_qpd(rng, nu=6, width=3)
        table = forward_dp(qpd)
        for m, w in table.positive_items():
            for _ in range(5):
                config = conditional_sample(table, m, rng)
                assert counts_of(config, qpd.width) == m

    def test_conditional_law_matches_ratio(self):
        # product of backward probabilities equals p(config) / stratum weight
        rng = np.random.default_rng(4)
        for _ in range(10):
            qpd = random_product_qpd(rng, nu=int(rng.integers(2, 7)), width=int(rng.integers(2, 4)))
            table = forward_dp(qpd)
            probs = [l.probs for l in qpd.locals]
            for config in itertools.product(range(qpd.width), repeat=qpd.nu):
                p = 1.0
                for i, k in enumerate(config):
                    p *= probs[i][k]
                if p == 0.0:
                    continue
                m = counts_of(config, qpd.width)
                assert conditional_pmf(table, config) == pytest.approx(
                    p / table.final_weights[m], abs=1e-10
                )

    def test_mixture_identity(self):
        # sum over strata of w_m * p(config | m) recovers p(config)
        rng = np.random.default_rng(6)
        qpd = random_product_qpd(rng, nu=5, width=3)
        table = forward_dp(qpd)
        probs = [l.probs for l in qpd.locals]
        for config in itertools.product(range(3), repeat=5):
            p = 1.0
            for i, k in enumerate(config):
                p *= probs[i][k]
            if p == 0.0:
                continue
            m = counts_of(config, 3)
            assert table.final_weights[m] * conditional_pmf(table, config) == pytest.approx(p, abs=1e-10)

    def test_sampler_frequencies_total_variation(self):
        qpd = pad_and_assemble([build_local_qpd([0.8, 0.2]), build_local_qpd([0.4, 0.6]), build_local_qpd([0.5, 0.5])])
        table = forward_dp(qpd)
        target = (2, 1)
        law = {}
        for config in itertools.product(range(2), repeat=3):
            if counts_of(config, 2) == target:
                law[config] = conditional_pmf(table, config)
        assert sum(law.values()) == pytest.approx(1.0, abs=1e-12)
        rng = np.random.default_rng(99)
        n = 1_000_000
        freqs = {c: 0 for c in law}
        for _ in range(n):
            freqs[conditional_sample(table, target, rng)] += 1
        tv = 0.5 * sum(abs(freqs[c] / n - law[c]) for c in law)
        assert tv < 5e-3

    def test_empty_stratum_error(self):
        qpd = pad_and_assemble([build_local_qpd([1.0, 0.0]), build_local_qpd([0.5, 0.5])])
        table = forward_dp(qpd)
        with pytest.raises(EmptyStratumError):
            conditional_sample(table, (0, 2), np.random.default_rng(0))


class TestParity:
    def test_all_positive_single_stratum(self):
        qpd = pad_and_assemble([build_local_qpd([0.3, 0.7])] * 3)
        table = parity_dp(qpd)
        assert table.final_weights[(3, 0)] == pytest.approx(1.0)

    def test_symmetric_binomial(self):
        qpd = pad_and_assemble([build_local_qpd([0.5, -0.5])] * 2)
        table = parity_dp(qpd)
        assert table.final_weights[(2, 0)] == pytest.approx(0.25)
        assert table.final_weights[(1, 1)] == pytest.approx(0.5)
        assert table.final_weights[(0, 2)] == pytest.approx(0.25)
        assert sum(table.final_weights.values()) == pytest.approx(1.0, abs=1e-10)

    def test_merge_from_counts(self):
        table = forward_dp(pec_qpd(nu=5))
        merged = merge_counts_to_parity(table)
        direct = parity_dp(pec_qpd(nu=5)).final_weights
        assert set(merged) == set(direct)
        for key, w in direct.items():
            assert merged[key] == pytest.approx(w, abs=1e-12)

    def test_merge_rejects_sign_flips(self):
        qpd = pad_and_assemble([build_local_qpd([0.5, -0.5]), build_local_qpd([-0.5, 0.5])])
        with pytest.raises(ValueError, match="sign"):
            merge_counts_to_parity(forward_dp(qpd))

    def test_conditional_sample_signs(self):
        qpd = pec_qpd(nu=6)
        table = parity_dp(qpd)
        rng = np.random.default_rng(12)
        signs = [l.signs for l in qpd.locals]
        for key, w in table.positive_items():
            config = conditional_sample_parity(table, key, rng)
            pos = sum(1 for i, k in enumerate(config) if signs[i][k] > 0)
            assert (pos, qpd.nu - pos) == key

    def test_conditional_parity_law(self):
        # frequencies of a two-location stratum against the exact restricted law
        qpd = pad_and_assemble([build_local_qpd([0.6, -0.4]), build_local_qpd([0.3, -0.7])])
        table = parity_dp(qpd)
        rng = np.random.default_rng(5)
        n = 200_000
        hits = {}
        for _ in range(n):
            c = conditional_sample_parity(table, (1, 1), rng)
            hits[c] = hits.get(c, 0) + 1
        # exact: p(config) / stratum weight over mixed-sign configurations
        w_strat = table.final_weights[(1, 1)]
        expected = {(0, 1): 0.6 * 0.7 / w_strat, (1, 0): 0.4 * 0.3 / w_strat}
        for c, p in expected.items():
            assert hits[c] / n == pytest.approx(p, abs=0.005)


class TestConcentration:
    def test_single_stratum(self):
        profile = concentration_profile({(3, 0): 1.0}, 0.5)
        assert profile.t_q == 1

    def test_hand_sum(self):
        profile = concentration_profile({"a": 0.9, "b": 0.05, "c": 0.05}, 0.99)
        assert profile.t_q == 3
        np.testing.assert_allclose(profile.cumulative, [0.9, 0.95, 1.0])

    def test_tie_break_lexicographic(self):
        profile = concentration_profile({(1, 0): 0.5, (0, 1): 0.5}, 0.4)
        assert profile.keys[0] == (0, 1)

    def test_threshold_validation(self):
        with pytest.raises(ValueError):
            concentration_profile({"a": 1.0}, 1.0)
