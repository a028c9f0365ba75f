"""Ground truth by full enumeration of the configuration space.

For instances whose configuration count fits under a cap, every variant mean
is evaluated once, giving the exact target, exact design variances for each
measurement model, exact per-stratum moments for any statistic, explained
variance fractions and the variance hierarchy across statistics. Everything
here is finite summation; nothing is sampled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Hashable, Mapping

import numpy as np

from .allocate import AllocationPlan
from .engine import MeasurementModel, Oracle, Shots
from .qpd import ProductQpd
from .strata import ResourceLimitError, counts_of

ENUMERATION_CAP_DEFAULT = 2**24
_BLOCK = 1 << 14

Statistic = Callable[[tuple[int, ...]], Hashable]


@dataclass(eq=False)
class EnumerationResult:
    """Per-configuration means plus the exact target and moment accumulators."""

    qpd: ProductQpd
    mu_config: np.ndarray
    mu: float
    abs_gmu2: float  # sum over configurations of |g| mu^2
    pauli_outcomes: bool
    clamped_strata: int = 0

    @property
    def nu(self) -> int:
        return self.qpd.nu

    @property
    def d(self) -> int:
        return self.qpd.width

    @property
    def g1norm(self) -> float:
        return self.qpd.norm1

    @property
    def total_configs(self) -> int:
        return self.d**self.nu


def _config_blocks(nu: int, d: int):
    """Yield (ranks, digits) blocks covering all d**nu configurations in mixed-radix order."""
    total = d**nu
    shape = (d,) * nu
    start = 0
    while start < total:
        stop = min(start + _BLOCK, total)
        ranks = np.arange(start, stop)
        digits = np.stack(np.unravel_index(ranks, shape), axis=1)
        yield ranks, digits
        start = stop


def _block_g(qpd: ProductQpd, digits: np.ndarray) -> np.ndarray:
    """Product coefficients g for a block of configurations."""
    coeffs = qpd.coeff_matrix()
    g = np.ones(digits.shape[0])
    for i in range(qpd.nu):
        g *= coeffs[i, digits[:, i]]
    return g


def enumerate_means(
    qpd: ProductQpd,
    exact_mean: Callable[[tuple[int, ...]], float],
    pauli_outcomes: bool = True,
    cap: int = ENUMERATION_CAP_DEFAULT,
) -> EnumerationResult:
    """Evaluate every reachable configuration once and accumulate exact sums.

    Configurations with zero coefficient are skipped; their stored mean is 0
    and they carry no weight. Block partial sums are combined with compensated
    summation.
    """
    nu, d = qpd.nu, qpd.width
    total = d**nu
    if total > cap:
        raise ResourceLimitError(f"{total} configurations exceed the enumeration cap of {cap}")

    mu_config = np.zeros(total)
    mu_parts, gmu2_parts, absg_parts = [], [], []
    for ranks, digits in _config_blocks(nu, d):
        g = _block_g(qpd, digits)
        live = np.flatnonzero(g != 0.0)
        mu_blk = np.zeros(ranks.size)
        for j in live:
            mu_blk[j] = exact_mean(tuple(int(x) for x in digits[j]))
        mu_config[ranks] = mu_blk
        mu_parts.append(float(np.sum(g * mu_blk)))
        gmu2_parts.append(float(np.sum(np.abs(g) * mu_blk**2)))
        absg_parts.append(float(np.sum(np.abs(g))))
    mu = math.fsum(mu_parts)
    abs_gmu2 = math.fsum(gmu2_parts)
    # The enumerated 1-norm must reproduce the product form.
    total_absg = math.fsum(absg_parts)
    assert abs(total_absg - qpd.norm1) <= 1e-9 * qpd.norm1
    return EnumerationResult(qpd, mu_config, mu, abs_gmu2, pauli_outcomes)


def exact_design_variance(result: EnumerationResult, model: MeasurementModel) -> float:
    """Single-draw design variance of the weighted estimator under a model.

    Oracle: the between-configuration variance of the weighted means. Shot
    models add the averaged two-valued outcome noise, which requires outcomes
    in {-1, +1}.
    """
    g1 = result.g1norm
    between = g1 * result.abs_gmu2 - result.mu**2
    if isinstance(model, Oracle):
        return between
    if not result.pauli_outcomes:
        raise ValueError("shot-model variance needs two-valued (+/-1) outcomes")
    # E_p[1 - mu^2] with p = |g| / g1norm.
    shot = g1 * g1 * (1.0 - result.abs_gmu2 / g1) / model.r
    return between + shot


@dataclass(eq=False)
class StratumMoments:
    """Exact weights, means and variances per stratum of one statistic."""

    keys: tuple
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    model: MeasurementModel
    clamped: int = 0

    def as_dict(self) -> dict:
        return {
            k: (float(w), float(m), float(v))
            for k, w, m, v in zip(self.keys, self.weights, self.means, self.variances)
        }

    @property
    def proportional_variance(self) -> float:
        """Design variance under ideal proportional allocation: sum w_s sigma_s^2."""
        return float(np.sum(self.weights * self.variances))

    @property
    def between_variance(self) -> float:
        mu = float(np.sum(self.weights * self.means))
        return float(np.sum(self.weights * (self.means - mu) ** 2))


def exact_stratum_moments(
    result: EnumerationResult, statistic: Statistic, model: MeasurementModel = Oracle()
) -> StratumMoments:
    """Exact per-stratum weight, mean and variance of the weighted estimator."""
    g1 = result.g1norm
    acc: dict[Hashable, list[float]] = {}
    for ranks, digits in _config_blocks(result.nu, result.d):
        g = _block_g(result.qpd, digits)
        mu_blk = result.mu_config[ranks]
        for j in range(ranks.size):
            gj = g[j]
            if gj == 0.0:
                continue
            key = statistic(tuple(int(x) for x in digits[j]))
            slot = acc.setdefault(key, [0.0, 0.0, 0.0])
            slot[0] += abs(gj)
            slot[1] += gj * mu_blk[j]
            slot[2] += abs(gj) * mu_blk[j] ** 2
    keys = tuple(sorted(acc))
    w = np.array([acc[k][0] / g1 for k in keys])
    means = np.array([g1 * acc[k][1] / acc[k][0] for k in keys])
    second = np.array([g1 * g1 * acc[k][2] / acc[k][0] for k in keys])
    variances = second - means**2
    if isinstance(model, Shots):
        if not result.pauli_outcomes:
            raise ValueError("shot-model moments need two-valued (+/-1) outcomes")
        shot = np.array([1.0 - acc[k][2] / acc[k][0] for k in keys])
        variances = variances + g1 * g1 * shot / model.r
    clamped = int(np.sum((variances < 0.0) & (variances >= -1e-12)))
    variances = np.where((variances < 0.0) & (variances >= -1e-12), 0.0, variances)
    if np.any(variances < 0.0):
        raise AssertionError("stratum variance below the clamping tolerance")
    return StratumMoments(keys, w, means, variances, model, clamped)


def counts_statistic(width: int) -> Statistic:
    return lambda config: counts_of(config, width)


def parity_statistic(qpd: ProductQpd) -> Statistic:
    signs = [l.signs for l in qpd.locals]

    def stat(config: tuple[int, ...]) -> tuple[int, int]:
        pos = sum(1 for i, k in enumerate(config) if signs[i][k] > 0)
        return (pos, len(config) - pos)

    return stat


def full_statistic(config: tuple[int, ...]) -> tuple[int, ...]:
    return tuple(config)


def explained_variance(
    result: EnumerationResult, statistic: Statistic, model: MeasurementModel = Oracle()
) -> tuple[float, float]:
    """Fraction of single-draw variance captured by a statistic, and its ratio.

    Returns (r2, rho) with rho = 1 - r2: r2 is the between-stratum share of the
    total design variance, rho the ideal proportional-to-naive variance ratio.
    """
    total = exact_design_variance(result, model)
    if total <= 0.0:
        raise ValueError("total design variance is zero; explained fraction undefined")
    moments = exact_stratum_moments(result, statistic, model)
    r2 = moments.between_variance / total
    return r2, 1.0 - r2


@dataclass(frozen=True)
class VarianceHierarchy:
    full: float
    counts: float
    parity: float
    naive: float

    def ordered(self, slack: float = 1e-12) -> bool:
        return (
            self.full <= self.counts + slack
            and self.counts <= self.parity + slack
            and self.parity <= self.naive + slack
        )


def hierarchy_check(result: EnumerationResult, model: MeasurementModel = Oracle()) -> VarianceHierarchy:
    """Proportional design variances of the nested statistics, finest to coarsest.

    The full-configuration statistic leaves only within-configuration noise:
    zero in the oracle model, the averaged shot term otherwise.
    """
    if isinstance(model, Oracle):
        var_full = 0.0
    else:
        g1 = result.g1norm
        var_full = g1 * g1 * (1.0 - result.abs_gmu2 / g1) / model.r
    var_counts = exact_stratum_moments(result, counts_statistic(result.d), model).proportional_variance
    var_parity = exact_stratum_moments(result, parity_statistic(result.qpd), model).proportional_variance
    var_naive = exact_design_variance(result, model)
    return VarianceHierarchy(var_full, var_counts, var_parity, var_naive)


def exact_implemented_variance(moments: StratumMoments, plan: AllocationPlan) -> float:
    """Exact estimator variance of the residual-aware stratified design.

    Uses enumerated within-stratum variances for the retained strata and the
    mixture decomposition (mean spread plus averaged variance) for the
    residual bucket.
    """
    lookup: Mapping = {k: i for i, k in enumerate(moments.keys)}
    total = 0.0
    for idx in plan.active_index:
        key = plan.keys[idx]
        w = plan.weights[idx]
        var_s = moments.variances[lookup[key]]
        total += w * w * var_s / plan.counts[idx]
    if plan.residual_count > 0:
        q = plan.residual_mixture
        drop_keys = plan.dropped_keys
        var_d = np.array([moments.variances[lookup[k]] for k in drop_keys])
        mu_d = np.array([moments.means[lookup[k]] for k in drop_keys])
        mean_mix = float(np.sum(q * mu_d))
        sigma_star2 = float(np.sum(q * var_d) + np.sum(q * (mu_d - mean_mix) ** 2))
        total += plan.dropped_mass**2 * sigma_star2 / plan.residual_count
    return total


def target_budget_ratio(
    result: EnumerationResult, statistic: Statistic, model: MeasurementModel = Oracle()
) -> float:
    """Ratio of ideal budgets reaching equal target variance, proportional over naive."""
    moments = exact_stratum_moments(result, statistic, model)
    return moments.proportional_variance / exact_design_variance(result, model)
