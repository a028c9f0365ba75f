"""Dense density-matrix backend and the benchmark decompositions.

Provides transverse-field Ising Trotter circuits, signed angle-interpolation
tables for off-grid rotations, depolarising-inverse tables built from Pauli
conjugations, configuration evaluation on a dense density matrix, and the
outcome evaluators consumed by the sampling engine and the enumeration oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from .engine import MeasurementModel, Oracle
from .qpd import LocalQpd, ProductQpd, ZeroMassConfigurationError, build_local_qpd, config_weight, pad_and_assemble

DENSITY_QUBIT_CAP = 8
MU_CACHE_DEFAULT = 2**20
PAI_BITS_DEFAULT = 5
COEFF_SNAP = 1e-14

PAULI = {
    "I": np.eye(2, dtype=complex),
    "X": np.array([[0, 1], [1, 0]], dtype=complex),
    "Y": np.array([[0, -1j], [1j, 0]], dtype=complex),
    "Z": np.array([[1, 0], [0, -1]], dtype=complex),
}

_Z_SIGN = np.array([[1.0, -1.0], [-1.0, 1.0]])


class DegenerateGridError(ValueError):
    """Angle grid degenerate: the interpolation system is singular."""


@dataclass(frozen=True)
class Rotation:
    """exp(-i angle G / 2) for a Pauli-string generator G on the given qubits."""

    generator: str
    qubits: tuple[int, ...]
    angle: float

    def __post_init__(self):
        if len(self.generator) != len(self.qubits):
            raise ValueError("generator length must match qubit count")
        if any(c not in "XYZ" for c in self.generator):
            raise ValueError(f"unsupported generator {self.generator!r}")


@dataclass(frozen=True)
class PauliConjugation:
    pauli: str
    qubit: int

    def __post_init__(self):
        if self.pauli not in "IXYZ" or len(self.pauli) != 1:
            raise ValueError(f"unsupported Pauli label {self.pauli!r}")


@dataclass(frozen=True)
class Depolarising:
    p: float
    qubit: int

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("depolarising strength must lie in [0, 1]")


ChannelPrimitive = Rotation | PauliConjugation | Depolarising


@lru_cache(maxsize=None)
def _pauli_string_matrix(labels: str) -> np.ndarray:
    out = np.array([[1.0 + 0.0j]])
    for c in labels:
        out = np.kron(out, PAULI[c])
    return out


@lru_cache(maxsize=4096)
def _rotation_matrix(generator: str, angle: float) -> np.ndarray:
    # Generators are Hermitian involutions, so the exponential closes in
    # cos/sin form without a matrix exponential.
    g = _pauli_string_matrix(generator)
    dim = g.shape[0]
    return math.cos(angle / 2.0) * np.eye(dim) - 1j * math.sin(angle / 2.0) * g


class DensityMatrix:
    """Dense 2^n x 2^n state held as a rank-2n tensor for cheap local updates."""

    def __init__(self, n: int, data: np.ndarray | None = None):
        if n > DENSITY_QUBIT_CAP:
            raise ValueError(f"{n} qubits exceeds the dense backend cap of {DENSITY_QUBIT_CAP}")
        self.n = n
        if data is None:
            rho = np.zeros((2**n, 2**n), dtype=complex)
            rho[0, 0] = 1.0
        else:
            rho = np.asarray(data, dtype=complex).copy()
        self.tensor = rho.reshape([2] * (2 * n))

    @property
    def matrix(self) -> np.ndarray:
        dim = 2**self.n
        return self.tensor.reshape(dim, dim)

    def apply_unitary(self, u: np.ndarray, qubits: Sequence[int]) -> None:
        ket = list(qubits)
        bra = [self.n + q for q in qubits]
        self.tensor = _apply_matrix(self.tensor, u, ket)
        self.tensor = _apply_matrix(self.tensor, np.conj(u), bra)

    def apply(self, primitive: ChannelPrimitive) -> None:
        if isinstance(primitive, Rotation):
            self.apply_unitary(_rotation_matrix(primitive.generator, primitive.angle), primitive.qubits)
        elif isinstance(primitive, PauliConjugation):
            self.tensor = _pauli_conjugate(self.tensor, primitive.pauli, primitive.qubit, self.n)
        elif isinstance(primitive, Depolarising):
            self.tensor = _depolarise(self.tensor, primitive.p, primitive.qubit, self.n)
        else:
            raise TypeError(f"unknown primitive {primitive!r}")

    def expectation(self, observable: str) -> float:
        obs = _pauli_string_matrix(observable)
        return float(np.real(np.einsum("ij,ji->", obs, self.matrix)))


def _apply_matrix(tensor: np.ndarray, m: np.ndarray, axes: list[int]) -> np.ndarray:
    k = len(axes)
    moved = np.moveaxis(tensor, axes, range(k))
    shape = moved.shape
    flat = moved.reshape(2**k, -1)
    out = (m @ flat).reshape(shape)
    return np.moveaxis(out, range(k), axes)


def _z_mask(n: int, qubit: int) -> np.ndarray:
    shape = [1] * (2 * n)
    shape[qubit] = 2
    shape[n + qubit] = 2
    return _Z_SIGN.reshape(shape)


def _pauli_conjugate(tensor: np.ndarray, pauli: str, qubit: int, n: int) -> np.ndarray:
    """P rho P for single-qubit Pauli P, using index flips and sign masks."""
    axes = (qubit, n + qubit)
    if pauli == "I":
        return tensor
    if pauli == "X":
        return np.flip(tensor, axis=axes)
    if pauli == "Z":
        return tensor * _z_mask(n, qubit)
    return np.flip(tensor * _z_mask(n, qubit), axis=axes)


def _depolarise(tensor: np.ndarray, p: float, qubit: int, n: int) -> np.ndarray:
    """Four-term Kraus mixture of the identity and the three Pauli conjugations."""
    if p == 0.0:
        return tensor
    zr = tensor * _z_mask(n, qubit)
    xr = np.flip(tensor, axis=(qubit, n + qubit))
    yr = np.flip(zr, axis=(qubit, n + qubit))
    return (1.0 - p) * tensor + (p / 3.0) * (xr + yr + zr)


@dataclass(frozen=True, eq=False)
class QpdCircuit:
    """Fixed channels plus one table of primitive sequences per sampled location.

    locations[i][k] is the channel sequence realised when location i draws
    index k, or None for padded indices that carry zero coefficient. The
    observable is a Pauli string over all qubits.
    """

    n: int
    prologue: tuple[ChannelPrimitive, ...]
    locations: tuple[tuple[tuple[ChannelPrimitive, ...] | None, ...], ...]
    epilogue: tuple[ChannelPrimitive, ...]
    qpd: ProductQpd
    observable: str
    tag: str = ""

    def __post_init__(self):
        if len(self.locations) != self.qpd.nu:
            raise ValueError("location count must match the decomposition length")
        if len(self.observable) != self.n or any(c not in "IXYZ" for c in self.observable):
            raise ValueError("observable must be a Pauli string over all qubits")


def evaluate_configuration(circuit: QpdCircuit, config: Sequence[int]) -> float:
    """Exact conditional mean of the observable for one realised variant."""
    state = DensityMatrix(circuit.n)
    for prim in circuit.prologue:
        state.apply(prim)
    for i, k in enumerate(config):
        seq = circuit.locations[i][int(k)]
        if seq is None:
            raise ZeroMassConfigurationError(f"padded index {k} selected at location {i}")
        for prim in seq:
            state.apply(prim)
    for prim in circuit.epilogue:
        state.apply(prim)
    mu = state.expectation(circuit.observable)
    assert abs(mu) <= 1.0 + 1e-9, f"Pauli expectation {mu} outside [-1, 1]"
    return mu


def default_observable(n: int) -> str:
    """Single X on the site whose bond is applied last in each step.

    Matches the benchmark convention: with wires indexed from the least
    significant tensor position, this is the first site.
    """
    return "I" * (n - 1) + "X"


def build_tfim_trotter(
    n: int, trotter_steps: int, h: float = 0.6, coupling: float = 0.7, t: float = 1.0, boundary: str = "ring"
) -> list[Rotation]:
    """First-order Trotter gate list for the transverse-field Ising chain.

    Each step applies n single-qubit X rotations of angle 2 h dt followed by
    the ZZ bond rotations of angle 2 J dt (n bonds on a ring, n - 1 open),
    with dt = t / steps and the convention exp(-i angle G / 2).
    """
    if n < 2 or trotter_steps < 1:
        raise ValueError("need at least two sites and one step")
    if boundary not in ("ring", "open"):
        raise ValueError(f"unknown boundary {boundary!r}")
    dt = t / trotter_steps
    gates: list[Rotation] = []
    bonds = n if boundary == "ring" else n - 1
    for _ in range(trotter_steps):
        for j in range(n):
            gates.append(Rotation("X", (j,), 2.0 * h * dt))
        for j in range(bonds):
            gates.append(Rotation("ZZ", (j, (j + 1) % n), 2.0 * coupling * dt))
    return gates


def pai_coefficients(offset: float, step: float) -> np.ndarray:
    """Signed three-term mixture reproducing a rotation offset inside one grid cell.

    Solves the 3x3 system matching the constant, cosine and sine components of
    the rotation channel at the lower notch, the upper notch and the antipodal
    notch against the target angle. Coefficients below the snap tolerance are
    zeroed so on-grid targets give exact point masses.
    """
    if not 0.0 <= offset < step:
        raise ValueError("offset must lie in [0, step)")
    if not 0.0 < step <= math.pi:
        raise ValueError("grid step must lie in (0, pi]")
    system = np.array(
        [
            [1.0, 1.0, 1.0],
            [1.0, math.cos(step), math.cos(math.pi)],
            [0.0, math.sin(step), math.sin(math.pi)],
        ]
    )
    rhs = np.array([1.0, math.cos(offset), math.sin(offset)])
    if abs(np.linalg.det(system)) < 1e-12:
        raise DegenerateGridError(f"grid step {step} makes the interpolation system singular")
    gamma = np.linalg.solve(system, rhs)
    residual = float(np.max(np.abs(system @ gamma - rhs)))
    assert residual < 1e-12, f"interpolation residual {residual}"
    gamma[np.abs(gamma) < COEFF_SNAP] = 0.0
    return gamma


def attach_pai(gates: Sequence[Rotation], b_bits: int = PAI_BITS_DEFAULT, observable: str | None = None, tag: str = "") -> QpdCircuit:
    """Replace every rotation by its three-notch signed mixture on a 2^b grid."""
    if not gates:
        raise ValueError("gate list is empty")
    n = 1 + max(q for g in gates for q in g.qubits)
    step = 2.0 * math.pi / 2**b_bits
    locals_: list[LocalQpd] = []
    locations = []
    for gate in gates:
        if not isinstance(gate, Rotation):
            raise TypeError("angle interpolation applies to rotations only")
        notch = math.floor(gate.angle / step)
        base = notch * step
        offset = gate.angle - base
        if offset >= step:  # guard the floor against fp at cell boundaries
            notch += 1
            base = notch * step
            offset = gate.angle - base
        gamma = pai_coefficients(offset, step)
        locals_.append(build_local_qpd(gamma, label=f"{gate.generator}@{gate.angle:.6f}"))
        locations.append(
            (
                (Rotation(gate.generator, gate.qubits, base),),
                (Rotation(gate.generator, gate.qubits, base + step),),
                (Rotation(gate.generator, gate.qubits, base + math.pi),),
            )
        )
    qpd = pad_and_assemble(locals_)
    obs = observable if observable is not None else default_observable(n)
    return QpdCircuit(n, (), tuple(locations), (), qpd, obs, tag=tag)


def pec_local_coefficients(p: float) -> np.ndarray:
    """Coefficients of the depolarising inverse over Pauli conjugations."""
    if not 0.0 <= p < 0.75:
        raise ValueError("depolarising strength must lie in [0, 3/4) for an invertible channel")
    lam = 1.0 - 4.0 * p / 3.0
    gamma_i = (lam + 3.0) / (4.0 * lam)
    gamma_p = (lam - 1.0) / (4.0 * lam)
    return np.array([gamma_i, gamma_p, gamma_p, gamma_p])


def attach_pec(gates: Sequence[Rotation], p: float, observable: str | None = None, tag: str = "") -> QpdCircuit:
    """Dress every gate with per-qubit depolarising noise and its sampled inverse.

    Each gate is followed by one noise leg per support qubit; a leg's primitive
    for index P is the noisy leg followed by conjugation with P. The first leg
    of a gate carries the gate unitary itself.
    """
    if not gates:
        raise ValueError("gate list is empty")
    n = 1 + max(q for g in gates for q in g.qubits)
    gamma = pec_local_coefficients(p)
    locals_: list[LocalQpd] = []
    locations = []
    for gate in gates:
        for leg, q in enumerate(gate.qubits):
            prefix = (gate,) if leg == 0 else ()
            locations.append(
                tuple(prefix + (Depolarising(p, q), PauliConjugation(label, q)) for label in "IXYZ")
            )
            locals_.append(build_local_qpd(gamma, label=f"inv-depol q{q}"))
    qpd = pad_and_assemble(locals_)
    obs = observable if observable is not None else default_observable(n)
    return QpdCircuit(n, (), tuple(locations), (), qpd, obs, tag=tag)


class CircuitOutcomeEvaluator:
    """Outcome evaluator over a circuit with memoised exact configuration means.

    Under the oracle model the outcome is the weighted exact mean; under a
    shot model it is the weighted average of r simulated two-valued outcomes.
    Exact means are cached per configuration with LRU eviction.
    """

    obs_norm = 1.0
    pauli_outcomes = True

    def __init__(self, circuit: QpdCircuit, model: MeasurementModel | None = None, cache_size: int = MU_CACHE_DEFAULT):
        self.circuit = circuit
        self.qpd = circuit.qpd
        self.g1norm = circuit.qpd.norm1
        self.default_model = model
        self._mean = lru_cache(maxsize=cache_size)(lambda cfg: evaluate_configuration(circuit, cfg))

    def exact_mean(self, config) -> float:
        return self._mean(tuple(int(k) for k in config))

    def __call__(self, config, model: MeasurementModel | None = None, rng: np.random.Generator | None = None) -> float:
        if model is None:
            model = self.default_model
        if model is None:
            raise ValueError("no measurement model given")
        config = tuple(int(k) for k in config)
        weight = config_weight(self.qpd, config)
        mu = self._mean(config)
        if isinstance(model, Oracle):
            return weight * mu
        prob_up = min(1.0, max(0.0, (1.0 + mu) / 2.0))
        ups = int(rng.binomial(model.r, prob_up))
        z_bar = (2.0 * ups - model.r) / model.r
        return weight * z_bar


def make_outcome_evaluator(
    circuit: QpdCircuit, model: MeasurementModel | None = None, cache_size: int = MU_CACHE_DEFAULT
) -> CircuitOutcomeEvaluator:
    return CircuitOutcomeEvaluator(circuit, model=model, cache_size=cache_size)


def build_instance(spec: dict) -> QpdCircuit:
    """Build a benchmark circuit from its JSON description.

    Recognised keys: model ("tfim"), n, L, h, J, t, boundary ("ring"/"open"),
    qpd ("pai"/"pec"), B_bits for pai, p for pec, optional observable and tag.
    """
    model = spec.get("model", "tfim")
    if model != "tfim":
        raise ValueError(f"unknown instance model {model!r}")
    n = int(spec["n"])
    steps = int(spec["L"])
    h = float(spec.get("h", 0.6))
    coupling = float(spec.get("J", 0.7))
    t = float(spec.get("t", 1.0))
    boundary = spec.get("boundary", "ring")
    gates = build_tfim_trotter(n, steps, h=h, coupling=coupling, t=t, boundary=boundary)
    observable = spec.get("observable")
    kind = spec.get("qpd", "pai")
    if kind == "pai":
        b_bits = int(spec.get("B_bits", PAI_BITS_DEFAULT))
        tag = spec.get("tag", f"tfim-n{n}-L{steps}-{boundary}-pai-b{b_bits}")
        return attach_pai(gates, b_bits=b_bits, observable=observable, tag=tag)
    if kind == "pec":
        p = float(spec.get("p", 0.01))
        tag = spec.get("tag", f"tfim-n{n}-L{steps}-{boundary}-pec-p{p:g}")
        return attach_pec(gates, p, observable=observable, tag=tag)
    raise ValueError(f"unknown decomposition kind {kind!r}")
