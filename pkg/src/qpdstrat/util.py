"""Small shared helpers: reproducible substreams, categorical draws, CSV formatting."""

from __future__ import annotations

from typing import Iterator

import numpy as np


def substream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator derived from (seed, key).

    The key is folded into the SeedSequence spawn key, so streams for distinct
    keys are statistically independent and do not depend on creation order.
    """
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=tuple(key)))


def categorical_index(probs: np.ndarray, u: float) -> int:
    """Map a uniform u in [0, 1) to a category index.

    The cumulative table is renormalised by its total so zero-probability
    categories occupy empty intervals and are never selected.
    """
    cum = np.cumsum(probs)
    total = cum[-1]
    if total <= 0.0:
        raise ValueError("categorical distribution has zero total mass")
    return int(np.searchsorted(cum, u * total, side="right"))


def categorical_sample(probs: np.ndarray, rng: np.random.Generator, size: int | None = None):
    """Draw from a (possibly unnormalised) categorical distribution."""
    cum = np.cumsum(probs)
    total = cum[-1]
    if total <= 0.0:
        raise ValueError("categorical distribution has zero total mass")
    if size is None:
        return int(np.searchsorted(cum, rng.random() * total, side="right"))
    return np.searchsorted(cum, rng.random(size) * total, side="right")


def compositions(total: int, parts: int) -> Iterator[tuple[int, ...]]:
    """All tuples of `parts` non-negative integers summing to `total`, lexicographic."""
    if parts == 1:
        yield (total,)
        return
    for head in range(total, -1, -1):
        for tail in compositions(total - head, parts - 1):
            yield (head,) + tail


def lex_compositions(total: int, parts: int) -> list[tuple[int, ...]]:
    """Compositions sorted ascending lexicographically."""
    return sorted(compositions(total, parts))


def fmt_float(x: float) -> str:
    """Fixed CSV float format: '.' decimal point, 17 significant digits."""
    return format(float(x), ".17g")


def csv_line(fields) -> str:
    out = []
    for f in fields:
        if isinstance(f, float):
            out.append(fmt_float(f))
        else:
            out.append(str(f))
    return ",".join(out)
