"""Monte Carlo execution of naive and stratified designs over an outcome evaluator.

An outcome evaluator maps (configuration, measurement model, generator) to a
scalar that already carries the decomposition weight and any per-configuration
shot averaging. The engine owns sample allocation, reproducible substreams,
plug-in variance estimates and bootstrap uncertainty. Substreams are derived
from (seed, design tag, task index), so results are identical for any worker
count and independent of scheduling.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .allocate import AllocationPlan
from .qpd import ProductQpd, sample_naive_batch
from .util import categorical_sample, substream

BOOTSTRAP_DEFAULT = 1024
BOOTSTRAP_LEVEL_DEFAULT = 0.95
NAIVE_BLOCK = 1024

# Substream tags keep the random streams of the design phases disjoint.
_STREAM_NAIVE = 0
_STREAM_STRATUM = 1
_STREAM_RESIDUAL = 2
_STREAM_BOOTSTRAP = 3


@dataclass(frozen=True)
class Oracle:
    """Infinite-repetition model: each configuration yields its exact mean."""

    @property
    def r(self) -> int:
        return 0

    def tag(self) -> str:
        return "oracle"


@dataclass(frozen=True)
class Shots:
    """Finite-repetition model: r measurement outcomes averaged per configuration."""

    r: int

    def __post_init__(self):
        if self.r < 1:
            raise ValueError("repetition count must be at least 1")

    def tag(self) -> str:
        return "shots"


MeasurementModel = Oracle | Shots


def parse_model(text: str) -> MeasurementModel:
    """Parse 'oracle' or 'shots:R'."""
    text = text.strip().lower()
    if text == "oracle":
        return Oracle()
    if text.startswith("shots:"):
        return Shots(int(text.split(":", 1)[1]))
    raise ValueError(f"unknown measurement model {text!r}")


class OutcomeEvaluator(Protocol):
    g1norm: float
    obs_norm: float

    def __call__(self, config, model: MeasurementModel, rng: np.random.Generator) -> float: ...


@dataclass(eq=False)
class EstimateReport:
    """Point estimate with plug-in variance, bootstrap interval and run metadata."""

    design: str
    statistic: str
    model: str
    r: int
    k: int
    seed: int
    mean: float
    var_hat: float
    ci: tuple[float, float]
    g1norm: float
    stratum_counts: dict | None = None
    stratum_variances: dict | None = None
    singleton_strata: tuple = ()
    bootstrap_stats: np.ndarray | None = field(default=None, repr=False)
    samples: np.ndarray | None = field(default=None, repr=False)
    group_samples: list | None = field(default=None, repr=False)

    def to_row(self, instance: str) -> list:
        return [
            instance,
            self.design,
            self.model,
            self.k,
            self.r,
            self.seed,
            self.mean,
            self.var_hat,
            self.ci[0],
            self.ci[1],
            self.g1norm,
        ]

    def to_json_dict(self) -> dict:
        def key_of(k):
            return list(k) if isinstance(k, tuple) else k

        out = {
            "design": self.design,
            "statistic": self.statistic,
            "model": self.model,
            "K": self.k,
            "R": self.r,
            "seed": self.seed,
            "mean": self.mean,
            "var_hat": self.var_hat,
            "ci": list(self.ci),
            "g1norm": self.g1norm,
        }
        if self.stratum_counts is not None:
            out["strata"] = [
                [key_of(k), int(n), float(self.stratum_variances[k])]
                for k, n in self.stratum_counts.items()
            ]
            out["singleton_strata"] = [key_of(k) for k in self.singleton_strata]
        return out


CSV_HEADER = "instance,design,model,K,R,seed,mean,var_hat,ci_lo,ci_hi,g1norm"


def _check_bound(values: np.ndarray, evaluator) -> None:
    bound = getattr(evaluator, "obs_norm", 1.0) * evaluator.g1norm
    peak = float(np.max(np.abs(values))) if values.size else 0.0
    if peak > bound * (1.0 + 1e-9):
        raise AssertionError(f"outcome {peak} exceeds the weight bound {bound}")


def _sample_variance(values: np.ndarray) -> float:
    if values.size < 2:
        return 0.0
    return float(np.var(values, ddof=1))


def bootstrap_variance_ci(
    groups: Sequence[tuple[float, np.ndarray]],
    b: int = BOOTSTRAP_DEFAULT,
    level: float = BOOTSTRAP_LEVEL_DEFAULT,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, tuple[float, float], tuple[int, ...]]:
    """Percentile bootstrap of the plug-in variance statistic.

    Each group is (weight, samples); the statistic is the weighted plug-in
    variance sum of w^2 s^2 / n over groups, which covers both the single-group
    naive case (weight 1) and the stratified case with a residual pool.
    Resampling happens within each group, preserving its size. Groups with
    fewer than two entries contribute their point variance of zero without
    resampling and are reported back by index.
    """
    if rng is None:
        rng = np.random.default_rng()
    stats = np.zeros(b)
    flagged = []
    point = 0.0
    for idx, (w, samples) in enumerate(groups):
        samples = np.asarray(samples, dtype=np.float64)
        n = samples.size
        if n < 2:
            flagged.append(idx)
            continue
        point += w * w * _sample_variance(samples) / n
        picks = rng.integers(0, n, size=(b, n))
        res = samples[picks]
        svar = res.var(axis=1, ddof=1)
        stats += w * w * svar / n
    lo, hi = np.quantile(stats, [(1.0 - level) / 2.0, 1.0 - (1.0 - level) / 2.0])
    return stats, (float(lo), float(hi)), tuple(flagged)


def run_naive(
    qpd: ProductQpd,
    evaluator: OutcomeEvaluator,
    k: int,
    model: MeasurementModel,
    seed: int,
    bootstrap: int = BOOTSTRAP_DEFAULT,
    level: float = BOOTSTRAP_LEVEL_DEFAULT,
    workers: int = 1,
) -> EstimateReport:
    """Independent configuration draws from the product law.

    Draws are partitioned into fixed-size blocks with one substream per block,
    so the realised sample does not depend on the worker count.
    """
    if k < 2:
        raise ValueError("need at least two configuration draws")
    blocks = [(bi, min(NAIVE_BLOCK, k - bi * NAIVE_BLOCK)) for bi in range((k + NAIVE_BLOCK - 1) // NAIVE_BLOCK)]

    def run_block(args):
        bi, size = args
        rng = substream(seed, _STREAM_NAIVE, bi)
        configs = sample_naive_batch(qpd, rng, size)
        return np.array([evaluator(tuple(row), model, rng) for row in configs])

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run_block, blocks))
    else:
        parts = [run_block(blk) for blk in blocks]
    samples = np.concatenate(parts)
    _check_bound(samples, evaluator)

    mean = float(np.mean(samples))
    var_hat = _sample_variance(samples) / k
    stats, ci, _ = bootstrap_variance_ci(
        [(1.0, samples)], b=bootstrap, level=level, rng=substream(seed, _STREAM_BOOTSTRAP, 0)
    )
    return EstimateReport(
        design="naive",
        statistic="none",
        model=model.tag(),
        r=model.r,
        k=k,
        seed=seed,
        mean=mean,
        var_hat=var_hat,
        ci=ci,
        g1norm=evaluator.g1norm,
        bootstrap_stats=stats,
        samples=samples,
    )


def run_stratified(
    qpd: ProductQpd,
    table,
    plan: AllocationPlan,
    evaluator: OutcomeEvaluator,
    model: MeasurementModel,
    seed: int,
    statistic: str = "counts",
    bootstrap: int = BOOTSTRAP_DEFAULT,
    level: float = BOOTSTRAP_LEVEL_DEFAULT,
    workers: int = 1,
) -> EstimateReport:
    """Per-stratum conditional draws plus residual draws, combined by weight.

    The table must expose final_weights and conditional_sample; the plan must
    have been built on the table's positive strata in the same key order.
    """
    weights = plan.weights
    for idx, key in enumerate(plan.keys):
        w_table = table.final_weights.get(key)
        if w_table is None or w_table <= 0.0:
            raise ValueError(f"plan stratum {key} is missing from the table or has zero weight")
        if abs(w_table - weights[idx]) > 1e-9:
            raise ValueError(f"plan and table disagree on the weight of stratum {key}")

    active = plan.active_index
    tasks = [(int(rank), plan.keys[rank], int(plan.counts[rank])) for rank in active]

    def run_stratum(task):
        rank, key, n_draws = task
        rng = substream(seed, _STREAM_STRATUM, rank)
        return np.array(
            [evaluator(table.conditional_sample(key, rng), model, rng) for _ in range(n_draws)]
        )

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_stratum = list(pool.map(run_stratum, tasks))
    else:
        per_stratum = [run_stratum(t) for t in tasks]

    residual_samples = np.array([])
    if plan.residual_count > 0:
        rng = substream(seed, _STREAM_RESIDUAL, 0)
        labels = categorical_sample(plan.residual_mixture, rng, size=plan.residual_count)
        draws = []
        for lab in labels:
            key = plan.keys[plan.dropped_index[int(lab)]]
            draws.append(evaluator(table.conditional_sample(key, rng), model, rng))
        residual_samples = np.array(draws)

    all_values = np.concatenate(per_stratum + [residual_samples]) if tasks else residual_samples
    _check_bound(all_values, evaluator)

    mean = 0.0
    var_hat = 0.0
    groups: list[tuple[float, np.ndarray]] = []
    counts_out, var_out, singletons = {}, {}, []
    for (rank, key, n_draws), samples in zip(tasks, per_stratum):
        w = float(weights[rank])
        mean += w * float(np.mean(samples))
        s2 = _sample_variance(samples)
        var_hat += w * w * s2 / n_draws
        groups.append((w, samples))
        counts_out[key] = n_draws
        var_out[key] = s2
        if n_draws == 1:
            singletons.append(key)
    if plan.residual_count > 0:
        w_star = plan.dropped_mass
        mean += w_star * float(np.mean(residual_samples))
        s2 = _sample_variance(residual_samples)
        var_hat += w_star * w_star * s2 / plan.residual_count
        groups.append((w_star, residual_samples))
        counts_out["residual"] = plan.residual_count
        var_out["residual"] = s2
        if plan.residual_count == 1:
            singletons.append("residual")

    stats, ci, _ = bootstrap_variance_ci(
        groups, b=bootstrap, level=level, rng=substream(seed, _STREAM_BOOTSTRAP, 0)
    )
    return EstimateReport(
        design=f"stratified-{statistic}",
        statistic=statistic,
        model=model.tag(),
        r=model.r,
        k=plan.total,
        seed=seed,
        mean=mean,
        var_hat=var_hat,
        ci=ci,
        g1norm=evaluator.g1norm,
        stratum_counts=counts_out,
        stratum_variances=var_out,
        singleton_strata=tuple(singletons),
        bootstrap_stats=stats,
        group_samples=groups,
    )


@dataclass(frozen=True)
class RatioEstimate:
    rho: float
    ci: tuple[float, float]


def variance_ratio(
    strat: EstimateReport, naive: EstimateReport, level: float = BOOTSTRAP_LEVEL_DEFAULT
) -> RatioEstimate:
    """Ratio of plug-in variances with a paired-resample percentile interval."""
    if strat.k != naive.k or strat.r != naive.r:
        raise ValueError("variance ratio requires runs at identical K and R")
    if naive.var_hat == 0.0:
        raise ValueError("naive variance estimate is zero; ratio undefined")
    rho = strat.var_hat / naive.var_hat
    if strat.bootstrap_stats is None or naive.bootstrap_stats is None:
        return RatioEstimate(rho, (float("nan"), float("nan")))
    with np.errstate(divide="ignore"):
        ratios = strat.bootstrap_stats / naive.bootstrap_stats
    lo, hi = np.quantile(ratios, [(1.0 - level) / 2.0, 1.0 - (1.0 - level) / 2.0])
    return RatioEstimate(rho, (float(lo), float(hi)))


def normalized_absolute_variance(report: EstimateReport, g1norm: float | None = None) -> float:
    """Estimator variance divided by the squared circuit 1-norm."""
    g = report.g1norm if g1norm is None else g1norm
    if g <= 0.0:
        raise ValueError("1-norm must be positive")
    return report.var_hat / (g * g)
