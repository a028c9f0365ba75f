"""Counts-vector and sign-parity stratification of product configuration laws.

The counts vector of a configuration records how often each local index occurs
across locations; under the product sampling law it follows a Poisson
multinomial distribution. A forward dynamic programme computes every stratum
weight exactly and caches all prefix layers, after which configurations can be
drawn exactly from the conditional law inside any stratum by a backward pass.
Sign parity is the coarsening that only counts positive versus negative
coefficient choices; it admits the same treatment with a 1-d table.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import comb
from typing import Mapping, Sequence

import numpy as np

from .qpd import ProductQpd
from .util import categorical_index, lex_compositions

STATE_CAP_DEFAULT = 2**31

# Per-layer maxima below this trigger renormalisation with a tracked log scale
# factor. A layer's maximum is bounded below by one over its state count, so
# with float64 this fires only in pathological regimes; the guard exists so
# deep tables degrade loudly rather than silently underflow.
RENORM_THRESHOLD = 1e-250


class ResourceLimitError(RuntimeError):
    """Predicted table size exceeds the configured cap."""


class EmptyStratumError(ValueError):
    """Conditional sampling requested from a stratum of zero probability."""


def counts_of(config: Sequence[int], width: int) -> tuple[int, ...]:
    """Occurrence counts of each index 0..width-1 in the configuration."""
    counts = [0] * width
    for k in config:
        k = int(k)
        if not 0 <= k < width:
            raise ValueError(f"index {k} out of range for width {width}")
        counts[k] += 1
    return tuple(counts)


def stratum_count(nu: int, d: int) -> int:
    """Number of counts vectors of length d summing to nu."""
    if nu < 0 or d < 1:
        raise ValueError("need nu >= 0 and d >= 1")
    return comb(nu + d - 1, d - 1)


def cumulative_state_count(nu: int, d: int) -> int:
    """Total states cached across all layers 0..nu of the forward table."""
    if nu < 0 or d < 1:
        raise ValueError("need nu >= 0 and d >= 1")
    return comb(nu + d, d)


@dataclass(eq=False)
class StratumTable:
    """Cached forward table plus final stratum weights for one product law.

    layers[i] holds the reachable prefix-counts states after i locations with
    their probabilities (scaled by exp(layer_scales[i]) if renormalisation was
    triggered). final_weights covers every counts vector of the full length,
    storing exact zeros for unreachable strata. Immutable after construction.
    """

    qpd: ProductQpd
    layers: list[dict[tuple[int, ...], float]]
    layer_scales: list[float]
    final_weights: dict[tuple[int, ...], float]

    @property
    def nu(self) -> int:
        return self.qpd.nu

    @property
    def width(self) -> int:
        return self.qpd.width

    def positive_items(self) -> list[tuple[tuple[int, ...], float]]:
        """(key, weight) pairs of reachable strata in lexicographic key order."""
        return [(m, w) for m, w in sorted(self.final_weights.items()) if w > 0.0]

    def conditional_sample(self, m: tuple[int, ...], rng: np.random.Generator) -> tuple[int, ...]:
        return conditional_sample(self, m, rng)

    def conditional_pmf(self, config: Sequence[int]) -> float:
        return conditional_pmf(self, config)


def forward_dp(
    qpd: ProductQpd, state_cap: int = STATE_CAP_DEFAULT, renorm_threshold: float = RENORM_THRESHOLD
) -> StratumTable:
    """Exact stratum weights for the counts statistic, all layers cached.

    Layer i is built from layer i-1 by adding one unit to the coordinate of
    each index the i-th location can produce, weighted by its probability.
    Raises ResourceLimitError before allocating if the predicted total state
    count exceeds state_cap.
    """
    nu, d = qpd.nu, qpd.width
    predicted = cumulative_state_count(nu, d)
    if predicted > state_cap:
        raise ResourceLimitError(
            f"forward table needs {predicted} states, exceeding the cap of {state_cap}"
        )

    zero = (0,) * d
    layers: list[dict[tuple[int, ...], float]] = [{zero: 1.0}]
    scales = [0.0]
    for i in range(nu):
        probs = qpd.locals[i].probs
        nxt: dict[tuple[int, ...], float] = {}
        for m, w in layers[i].items():
            for k in range(d):
                p = probs[k]
                if p == 0.0:
                    continue
                key = m[:k] + (m[k] + 1,) + m[k + 1 :]
                nxt[key] = nxt.get(key, 0.0) + p * w
        scale = scales[i]
        peak = max(nxt.values())
        if peak < renorm_threshold:
            scale += np.log(peak)
            inv = 1.0 / peak
            nxt = {m: w * inv for m, w in nxt.items()}
        layers.append(nxt)
        scales.append(scale)

    descale = np.exp(scales[nu])
    final = {m: 0.0 for m in lex_compositions(nu, d)}
    for m, w in layers[nu].items():
        final[m] = w * descale
    return StratumTable(qpd, layers, scales, final)


def conditional_sample(table: StratumTable, m: tuple[int, ...], rng: np.random.Generator) -> tuple[int, ...]:
    """Draw a configuration from the product law conditioned on its counts vector.

    Walks locations in reverse: at step i the index k is drawn with probability
    proportional to p_i(k) times the prefix probability of the remaining counts
    with one unit of k removed. Scale factors cancel inside each step.
    """
    nu, d = table.nu, table.width
    m = tuple(int(x) for x in m)
    if len(m) != d or any(x < 0 for x in m) or sum(m) != nu:
        raise ValueError(f"counts vector {m} is not a composition of {nu} into {d} parts")
    if table.final_weights.get(m, 0.0) <= 0.0:
        raise EmptyStratumError(f"stratum {m} has zero probability")

    remaining = list(m)
    config = [0] * nu
    q = np.empty(d)
    for i in range(nu - 1, -1, -1):
        probs = table.qpd.locals[i].probs
        prev = table.layers[i]
        for k in range(d):
            if remaining[k] > 0 and probs[k] > 0.0:
                key = tuple(remaining[:k] + [remaining[k] - 1] + remaining[k + 1 :])
                q[k] = probs[k] * prev.get(key, 0.0)
            else:
                q[k] = 0.0
        k = categorical_index(q, rng.random())
        config[i] = k
        remaining[k] -= 1
    return tuple(config)


def conditional_pmf(table: StratumTable, config: Sequence[int]) -> float:
    """Exact conditional probability of a configuration given its own stratum.

    Computed as the product of the backward transition probabilities, which
    equals the unconditional probability divided by the stratum weight.
    """
    nu, d = table.nu, table.width
    remaining = list(counts_of(config, d))
    out = 1.0
    for i in range(nu - 1, -1, -1):
        probs = table.qpd.locals[i].probs
        prev = table.layers[i]
        cur = table.layers[i + 1]
        denom = cur.get(tuple(remaining), 0.0)
        if denom <= 0.0:
            raise EmptyStratumError(f"prefix stratum {tuple(remaining)} unreachable at layer {i + 1}")
        k = int(config[i])
        remaining[k] -= 1
        if remaining[k] < 0:
            raise ValueError("configuration inconsistent with its counts vector")
        num = probs[k] * prev.get(tuple(remaining), 0.0)
        # Per-layer scale factors shift prev and cur together, so the ratio
        # picks up exp(scale[i] - scale[i+1]).
        out *= num / denom * np.exp(table.layer_scales[i] - table.layer_scales[i + 1])
    return out


@dataclass(eq=False)
class ParityTable:
    """Poisson binomial table over the number of positive-coefficient choices."""

    qpd: ProductQpd
    positive_mass: np.ndarray
    layers: list[np.ndarray]
    final_weights: dict[tuple[int, int], float]
    positive_labels: list[np.ndarray]
    negative_labels: list[np.ndarray]

    @property
    def nu(self) -> int:
        return self.qpd.nu

    def positive_items(self) -> list[tuple[tuple[int, int], float]]:
        return [(key, w) for key, w in sorted(self.final_weights.items()) if w > 0.0]

    def conditional_sample(self, key: tuple[int, int], rng: np.random.Generator) -> tuple[int, ...]:
        return conditional_sample_parity(self, key, rng)


def parity_dp(qpd: ProductQpd) -> ParityTable:
    """Stratum weights for the sign-parity statistic via a binomial-style DP."""
    nu = qpd.nu
    pos_mass = np.array([float(np.sum(l.probs[l.signs > 0])) for l in qpd.locals])
    layers = [np.array([1.0])]
    for i in range(nu):
        prev = layers[i]
        nxt = np.zeros(i + 2)
        nxt[: i + 1] += prev * (1.0 - pos_mass[i])
        nxt[1:] += prev * pos_mass[i]
        layers.append(nxt)
    final = {(j, nu - j): float(layers[nu][j]) for j in range(nu + 1)}
    pos_labels = [np.flatnonzero(l.signs > 0) for l in qpd.locals]
    neg_labels = [np.flatnonzero(l.signs < 0) for l in qpd.locals]
    return ParityTable(qpd, pos_mass, layers, final, pos_labels, neg_labels)


def conditional_sample_parity(
    table: ParityTable, key: tuple[int, int], rng: np.random.Generator
) -> tuple[int, ...]:
    """Draw a configuration conditioned on its sign-parity stratum.

    First resolves the sign of every location by a backward pass over the 1-d
    table, then draws each index from its local law restricted to the selected
    sign class and renormalised.
    """
    nu = table.nu
    j_plus, j_minus = int(key[0]), int(key[1])
    if j_plus < 0 or j_minus < 0 or j_plus + j_minus != nu:
        raise ValueError(f"parity key {key} is not a composition of {nu} into 2 parts")
    if table.final_weights.get((j_plus, j_minus), 0.0) <= 0.0:
        raise EmptyStratumError(f"parity stratum {key} has zero probability")

    config = [0] * nu
    j = j_plus
    for i in range(nu - 1, -1, -1):
        prev = table.layers[i]
        pi = table.positive_mass[i]
        w_pos = pi * prev[j - 1] if j >= 1 else 0.0
        w_neg = (1.0 - pi) * prev[j] if j <= i else 0.0
        take_pos = rng.random() * (w_pos + w_neg) < w_pos
        local = table.qpd.locals[i]
        if take_pos:
            labels = table.positive_labels[i]
            j -= 1
        else:
            labels = table.negative_labels[i]
        sub = local.probs[labels]
        config[i] = int(labels[categorical_index(sub, rng.random())])
    return tuple(config)


def merge_counts_to_parity(table: StratumTable) -> dict[tuple[int, int], float]:
    """Image of the counts weights under merging labels by coefficient sign.

    Requires every label to carry one sign wherever its coefficient is nonzero;
    labels that are zero everywhere never contribute counts.
    """
    d = table.width
    label_sign = np.zeros(d)
    for local in table.qpd.locals:
        for k in range(d):
            s = local.signs[k]
            if s == 0.0:
                continue
            if label_sign[k] == 0.0:
                label_sign[k] = s
            elif label_sign[k] != s:
                raise ValueError(f"label {k} changes sign across locations; parity merge undefined")
    merged: dict[tuple[int, int], float] = {}
    for m, w in table.final_weights.items():
        p_plus = sum(c for c, s in zip(m, label_sign) if s > 0)
        key = (p_plus, table.nu - p_plus)
        merged[key] = merged.get(key, 0.0) + w
    return merged


@dataclass(frozen=True)
class ConcentrationProfile:
    """Strata sorted by decreasing mass with cumulative sums and a quantile index."""

    keys: tuple
    weights: np.ndarray
    cumulative: np.ndarray
    threshold: float
    t_q: int

    @property
    def total_strata(self) -> int:
        return len(self.keys)


def concentration_profile(weights: Mapping, q: float) -> ConcentrationProfile:
    """Sort strata by decreasing mass and locate the smallest head covering q.

    Ties in mass are broken by lexicographic key order. t_q is 1-based: the
    number of top strata whose cumulative mass first reaches q.
    """
    if not 0.0 < q < 1.0:
        raise ValueError("threshold must lie strictly between 0 and 1")
    items = sorted(weights.items(), key=lambda kv: (-kv[1], kv[0]))
    keys = tuple(k for k, _ in items)
    w = np.array([v for _, v in items], dtype=np.float64)
    cum = np.cumsum(w)
    t_q = int(np.searchsorted(cum, q, side="left")) + 1
    t_q = min(t_q, len(keys))
    return ConcentrationProfile(keys, w, cum, q, t_q)
