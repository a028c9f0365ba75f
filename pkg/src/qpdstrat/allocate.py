"""Integer sample allocation across strata with an unbiasedness-preserving residual.

Largest-remainder apportionment turns real proportional quotas into integers
but can starve low-weight strata entirely, which would bias the stratified
estimator. The residual construction aggregates all starved strata into one
bucket sampled from their conditional mixture, borrowing the bucket's budget
from donor strata so the total is preserved exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

WEIGHT_SUM_TOL = 1e-12


def _check_weights(weights: np.ndarray):
    if np.any(weights < 0.0):
        raise ValueError("stratum weights must be non-negative")
    total = float(np.sum(weights))
    if abs(total - 1.0) > WEIGHT_SUM_TOL:
        raise ValueError(f"stratum weights must sum to 1 (got {total!r})")


def hamilton_apportion(weights: Sequence[float], budget: int) -> np.ndarray:
    """Largest-remainder rounding of the quotas budget * weights.

    Floors every quota, then hands the leftover units to the largest fractional
    remainders; remainder ties break by ascending stratum index. The result
    satisfies |K_s - budget * w_s| < 1 for every stratum.
    """
    w = np.asarray(weights, dtype=np.float64)
    if budget < 1:
        raise ValueError("budget must be at least 1")
    _check_weights(w)
    quotas = budget * w
    counts = np.floor(quotas).astype(np.int64)
    leftover = budget - int(np.sum(counts))
    remainders = quotas - counts
    # lexsort is stable: sort by remainder descending, index ascending.
    order = np.lexsort((np.arange(w.size), -remainders))
    counts[order[:leftover]] += 1
    return counts


@dataclass(frozen=True, eq=False)
class AllocationPlan:
    """Integer allocation with residual bucket for one set of stratum weights.

    keys are opaque stratum identifiers in a fixed (lexicographic) order;
    counts, weights align with keys. dropped_index points at the strata whose
    final count is zero despite positive weight; the residual bucket samples
    stratum labels from residual_mixture (their conditional probabilities) and
    holds residual_count draws.
    """

    keys: tuple
    weights: np.ndarray
    counts: np.ndarray
    total: int
    residual_count: int
    dropped_index: np.ndarray
    dropped_mass: float
    residual_mixture: np.ndarray

    def __post_init__(self):
        assert int(np.sum(self.counts)) + self.residual_count == self.total
        if self.dropped_mass > 0.0:
            assert self.residual_count >= 1
            assert abs(float(np.sum(self.residual_mixture)) - 1.0) <= WEIGHT_SUM_TOL
        else:
            assert self.residual_count == 0 and self.dropped_index.size == 0

    @property
    def active_index(self) -> np.ndarray:
        return np.flatnonzero(self.counts > 0)

    @property
    def dropped_keys(self) -> tuple:
        return tuple(self.keys[i] for i in self.dropped_index)

    def to_json_dict(self) -> dict:
        def row(key, extra):
            parts = list(key) if isinstance(key, tuple) else [key]
            return parts + extra

        return {
            "K": self.total,
            "per_stratum": [row(k, [int(c)]) for k, c in zip(self.keys, self.counts)],
            "K_star": self.residual_count,
            "dropped": [row(self.keys[i], []) for i in self.dropped_index],
        }


def _borrow(counts: np.ndarray, deficit: int, floor: int) -> int:
    """Take units from donors ordered by decreasing count, draining each to floor."""
    order = np.lexsort((np.arange(counts.size), -counts))
    for s in order:
        while deficit > 0 and counts[s] >= floor + 1:
            counts[s] -= 1
            deficit -= 1
        if deficit == 0:
            break
    return deficit


def residual_hamilton_allocate(
    weights: Sequence[float], budget: int, keys: Sequence | None = None
) -> AllocationPlan:
    """Hamilton apportionment plus a residual bucket restoring exact unbiasedness.

    After plain apportionment, strata with positive weight but zero count are
    earmarked for a residual bucket sized max(1, round(budget * dropped mass)),
    with round-half-away-from-zero. The bucket's units are borrowed from donors
    in two passes (first leaving every donor at least one unit, then allowing
    donors to reach zero), and the dropped set is recomputed afterwards since
    the second pass can create new zeros. Donors cannot run out because the
    residual budget never exceeds the total.
    """
    w = np.asarray(weights, dtype=np.float64)
    counts = hamilton_apportion(w, budget)
    if keys is None:
        keys = tuple(range(w.size))
    else:
        keys = tuple(keys)
        if len(keys) != w.size:
            raise ValueError("keys and weights must have equal length")

    dropped0 = (counts == 0) & (w > 0.0)
    residual = 0
    if np.any(dropped0):
        drop_mass0 = float(np.sum(w[dropped0]))
        residual = max(1, int(math.floor(budget * drop_mass0 + 0.5)))
        deficit = _borrow(counts, residual, floor=1)
        if deficit > 0:
            deficit = _borrow(counts, deficit, floor=0)
        assert deficit == 0, "donor strata exhausted; residual budget exceeded total"

    dropped = np.flatnonzero((counts == 0) & (w > 0.0))
    drop_mass = float(np.sum(w[dropped]))
    if residual > 0 and drop_mass > 0.0:
        mixture = w[dropped] / drop_mass
    else:
        residual = 0
        dropped = np.array([], dtype=np.int64)
        drop_mass = 0.0
        mixture = np.array([], dtype=np.float64)

    return AllocationPlan(
        keys=keys,
        weights=w,
        counts=counts,
        total=budget,
        residual_count=residual,
        dropped_index=dropped,
        dropped_mass=drop_mass,
        residual_mixture=mixture,
    )


def neyman_quotas(weights: Sequence[float], sigmas: Sequence[float], budget: int) -> np.ndarray:
    """Ideal real-valued quotas proportional to weight times within-stratum spread."""
    w = np.asarray(weights, dtype=np.float64)
    s = np.asarray(sigmas, dtype=np.float64)
    _check_weights(w)
    if np.any(s < 0.0):
        raise ValueError("stratum spreads must be non-negative")
    total = float(np.sum(w * s))
    if total == 0.0:
        raise ValueError("all stratum spreads are zero; allocation undefined")
    return budget * w * s / total


def neyman_allocate(
    weights: Sequence[float], sigmas: Sequence[float], budget: int, keys: Sequence | None = None
) -> AllocationPlan:
    """Integerised variance-minimising allocation with the residual machinery.

    Apportionment runs on the normalised weight-times-spread vector, but the
    residual mixture and dropped mass in the returned plan are rebuilt from the
    original weights: the residual bucket must sample the true conditional law
    over starved strata, whatever drove the integer counts. Zero-spread strata
    can be starved even when the spread-weighted dropped mass is zero, in which
    case one extra unit is borrowed so the bucket exists.
    """
    w = np.asarray(weights, dtype=np.float64)
    s = np.asarray(sigmas, dtype=np.float64)
    ideal = neyman_quotas(w, s, budget)
    inner = residual_hamilton_allocate(ideal / budget, budget, keys=keys)

    counts = inner.counts.copy()
    residual = inner.residual_count
    dropped = np.flatnonzero((counts == 0) & (w > 0.0))
    if dropped.size > 0 and residual == 0:
        deficit = _borrow(counts, 1, floor=1)
        if deficit > 0:
            deficit = _borrow(counts, deficit, floor=0)
        assert deficit == 0
        residual = 1
        dropped = np.flatnonzero((counts == 0) & (w > 0.0))
    drop_mass = float(np.sum(w[dropped]))
    if drop_mass > 0.0:
        mixture = w[dropped] / drop_mass
    else:
        residual = 0
        dropped = np.array([], dtype=np.int64)
        mixture = np.array([], dtype=np.float64)

    return AllocationPlan(
        keys=inner.keys,
        weights=w,
        counts=counts,
        total=budget,
        residual_count=residual,
        dropped_index=dropped,
        dropped_mass=drop_mass,
        residual_mixture=mixture,
    )


def truncation_bias_bound(dropped_mass: float, bound: float) -> float:
    """Worst-case estimator bias from discarding the dropped strata outright."""
    if not 0.0 <= dropped_mass <= 1.0 + WEIGHT_SUM_TOL:
        raise ValueError("dropped mass must lie in [0, 1]")
    if bound < 0.0:
        raise ValueError("outcome bound must be non-negative")
    return bound * dropped_mass


def variance_certificate(
    plan: AllocationPlan, weights: Sequence[float] | None = None, budget: int | None = None, bound: float = 1.0
) -> float:
    """Computable bound on the variance perturbation from integer allocation.

    Three terms, each scaled by the squared outcome bound: quota rounding over
    retained strata, residual quota mismatch, and the residual aggregation
    penalty. Residual terms vanish when no residual bucket exists.
    """
    w = plan.weights if weights is None else np.asarray(weights, dtype=np.float64)
    budget = plan.total if budget is None else budget
    active = plan.active_index
    retained = float(
        np.sum(w[active] ** 2 * np.abs(1.0 / plan.counts[active] - 1.0 / (budget * w[active])))
    )
    if plan.residual_count > 0:
        w_star = plan.dropped_mass
        mismatch = w_star * abs(w_star / plan.residual_count - 1.0 / budget)
        aggregation = w_star**2 / plan.residual_count
    else:
        mismatch = 0.0
        aggregation = 0.0
    return bound**2 * (retained + mismatch + aggregation)
