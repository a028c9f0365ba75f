import numpy as np
import pytest

from qpdstrat import (
    Rotation,
    build_instance,
    build_local_qpd,
    enumerate_means,
    forward_dp,
    make_outcome_evaluator,
    pad_and_assemble,
)
from qpdstrat.circuits import QpdCircuit

GOLDEN_SPEC = {"model": "tfim", "n": 3, "L": 1, "boundary": "open", "qpd": "pec", "p": 0.01}


@pytest.fixture(scope="session")
def golden_circuit():
    return build_instance(GOLDEN_SPEC)


@pytest.fixture(scope="session")
def golden_evaluator(golden_circuit):
    return make_outcome_evaluator(golden_circuit)


@pytest.fixture(scope="session")
def golden_enumeration(golden_circuit, golden_evaluator):
    return enumerate_means(golden_circuit.qpd, golden_evaluator.exact_mean)


@pytest.fixture(scope="session")
def golden_table(golden_circuit):
    return forward_dp(golden_circuit.qpd)


def random_product_qpd(rng, nu=None, width=None, signed=True, allow_zero=True):
    """Random product decomposition with optional signs and zero padding entries."""
    nu = nu if nu is not None else int(rng.integers(2, 7))
    width = width if width is not None else int(rng.integers(2, 4))
    locals_ = []
    for _ in range(nu):
        while True:
            coeffs = rng.uniform(-1.0, 1.0, size=width)
            if not signed:
                coeffs = np.abs(coeffs)
            if allow_zero:
                coeffs[rng.random(width) < 0.15] = 0.0
            if np.any(np.abs(coeffs) > 0.05):
                break
        locals_.append(build_local_qpd(coeffs))
    return pad_and_assemble(locals_)


def random_circuit_instance(rng, max_qubits=2, max_locations=4, max_width=3, sign_consistent=True):
    """Small random instance: random rotations as primitives, random signed tables.

    With sign_consistent each label keeps one coefficient sign across all
    locations, which is what makes sign parity a coarsening of the counts
    statistic (as in the benchmark decompositions).
    """
    n = int(rng.integers(1, max_qubits + 1))
    nu = int(rng.integers(2, max_locations + 1))
    width = int(rng.integers(2, max_width + 1))
    label_signs = np.where(rng.random(width) < 0.5, -1.0, 1.0)
    locals_ = []
    locations = []
    for _ in range(nu):
        prims = []
        for _ in range(width):
            axis = "XYZ"[rng.integers(3)]
            qubit = int(rng.integers(n))
            prims.append((Rotation(axis, (qubit,), float(rng.uniform(0, 2 * np.pi))),))
        while True:
            coeffs = rng.uniform(-1.0, 1.0, size=width)
            if sign_consistent:
                coeffs = np.abs(coeffs) * label_signs
            if np.any(np.abs(coeffs) > 0.1):
                break
        locals_.append(build_local_qpd(coeffs))
        locations.append(tuple(prims))
    qpd = pad_and_assemble(locals_)
    while True:
        obs = "".join("IXYZ"[rng.integers(4)] for _ in range(n))
        if any(c != "I" for c in obs):
            break
    return QpdCircuit(n, (), tuple(locations), (), qpd, obs, tag="random")
