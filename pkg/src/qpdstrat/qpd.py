"""Product-form quasi-probability decompositions.

A local decomposition is an ordered table of signed real coefficients, one per
implementable primitive. A product decomposition stacks one local table per
circuit location; its induced sampling law factorises over locations and its
1-norm is the product of the local 1-norms. Indices are 0-based in storage and
in all serialised formats.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .util import categorical_sample

PROB_SUM_TOL = 1e-12

# Above this many locations the plain product of local norms can overflow or
# underflow float64, so the 1-norm is kept in log space and exponentiated on
# demand.
LOG_NORM_SWITCH = 64


class InvalidCoefficientsError(ValueError):
    """Coefficient table is empty, all zero, or contains non-finite entries."""


class ZeroMassConfigurationError(ValueError):
    """Configuration hits a zero-coefficient index and is structurally unreachable."""


@dataclass(frozen=True, eq=False)
class LocalQpd:
    """Signed coefficient table for one location.

    Attributes:
        coeffs: coefficient per primitive index (zeros allowed as padding).
        label: optional tag for diagnostics.
    """

    coeffs: np.ndarray
    label: str | None = None
    norm1: float = field(init=False)
    probs: np.ndarray = field(init=False)
    signs: np.ndarray = field(init=False)

    def __post_init__(self):
        coeffs = np.array(self.coeffs, dtype=np.float64, copy=True)
        norm1 = float(np.sum(np.abs(coeffs)))
        probs = np.abs(coeffs) / norm1
        signs = np.sign(coeffs)
        for name, value in (("coeffs", coeffs), ("norm1", norm1), ("probs", probs), ("signs", signs)):
            object.__setattr__(self, name, value)
        coeffs.setflags(write=False)
        probs.setflags(write=False)
        signs.setflags(write=False)

    @property
    def width(self) -> int:
        return self.coeffs.shape[0]

    def padded(self, width: int) -> "LocalQpd":
        if width == self.width:
            return self
        coeffs = np.zeros(width, dtype=np.float64)
        coeffs[: self.width] = self.coeffs
        return LocalQpd(coeffs, self.label)


def build_local_qpd(coeffs: Sequence[float], label: str | None = None) -> LocalQpd:
    """Validate a coefficient table and cache its 1-norm, probabilities and signs."""
    arr = np.asarray(coeffs, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise InvalidCoefficientsError("coefficient table must be a non-empty 1-d sequence")
    if not np.all(np.isfinite(arr)):
        raise InvalidCoefficientsError("coefficient table contains non-finite entries")
    if not np.any(arr != 0.0):
        raise InvalidCoefficientsError("coefficient table is identically zero")
    local = LocalQpd(arr, label)
    assert abs(float(np.sum(local.probs)) - 1.0) <= PROB_SUM_TOL
    return local


@dataclass(frozen=True, eq=False)
class ProductQpd:
    """Ordered product of local decompositions, padded to a common width."""

    locals: tuple[LocalQpd, ...]

    @property
    def nu(self) -> int:
        return len(self.locals)

    @property
    def width(self) -> int:
        return self.locals[0].width

    @property
    def log_norm1(self) -> float:
        return float(sum(math.log(l.norm1) for l in self.locals))

    @property
    def norm1(self) -> float:
        """Circuit 1-norm, the product of local 1-norms."""
        if self.nu > LOG_NORM_SWITCH:
            return math.exp(self.log_norm1)
        out = 1.0
        for l in self.locals:
            out *= l.norm1
        return out

    def probs_matrix(self) -> np.ndarray:
        """(nu, width) matrix of per-location sampling probabilities."""
        return np.stack([l.probs for l in self.locals])

    def coeff_matrix(self) -> np.ndarray:
        return np.stack([l.coeffs for l in self.locals])


def pad_and_assemble(local_qpds: Sequence[LocalQpd]) -> ProductQpd:
    """Pad all locals with zero coefficients to the maximum width and assemble.

    Padding adds categories of probability exactly zero, so neither the induced
    sampling law on the original support nor the circuit 1-norm changes.
    """
    if len(local_qpds) == 0:
        raise InvalidCoefficientsError("need at least one local decomposition")
    width = max(l.width for l in local_qpds)
    return ProductQpd(tuple(l.padded(width) for l in local_qpds))


def config_sign(qpd: ProductQpd, config: Sequence[int]) -> float:
    """Sign of the product coefficient for a configuration; error on zero mass."""
    if len(config) != qpd.nu:
        raise ValueError(f"configuration length {len(config)} != {qpd.nu}")
    sign = 1.0
    for i, k in enumerate(config):
        k = int(k)
        if not 0 <= k < qpd.width:
            raise ValueError(f"index {k} out of range at position {i}")
        s = qpd.locals[i].signs[k]
        if s == 0.0:
            raise ZeroMassConfigurationError(
                f"configuration hits zero-coefficient index {k} at position {i}"
            )
        sign *= s
    return sign


def config_weight(qpd: ProductQpd, config: Sequence[int]) -> float:
    """Sampling weight of a configuration: the circuit 1-norm with the product sign."""
    return qpd.norm1 * config_sign(qpd, config)


def sample_naive(qpd: ProductQpd, rng: np.random.Generator) -> tuple[int, ...]:
    """One configuration with each index drawn independently from its local law."""
    return tuple(int(categorical_sample(l.probs, rng)) for l in qpd.locals)


def sample_naive_batch(qpd: ProductQpd, rng: np.random.Generator, size: int) -> np.ndarray:
    """(size, nu) array of independent configurations, position by position."""
    out = np.empty((size, qpd.nu), dtype=np.int64)
    for i, l in enumerate(qpd.locals):
        out[:, i] = categorical_sample(l.probs, rng, size=size)
    return out


def qpd_to_json(qpd: ProductQpd) -> str:
    """Serialise as {"locals": [[coeff, ...], ...]}; floats round-trip exactly."""
    return json.dumps({"locals": [list(map(float, l.coeffs)) for l in qpd.locals]})


def qpd_from_json(text: str) -> ProductQpd:
    data = json.loads(text)
    return pad_and_assemble([build_local_qpd(c) for c in data["locals"]])
