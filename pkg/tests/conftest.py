import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from contmeas import MeasurementModel, pauli, pure_state, sigma_minus  # noqa: E402

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}

EXCITED = pure_state([1, 0])
GROUND = pure_state([0, 1])
PLUS = pure_state([1, 1])
MIXED = np.eye(2) / 2


def decay_homodyne(gamma=1.0):
    return MeasurementModel(H=np.zeros((2, 2)), diffusive=[(np.sqrt(gamma) * sigma_minus(), 0.0)],
                            name="decay_homodyne")


def decay_counting(gamma=1.0):
    return MeasurementModel(H=np.zeros((2, 2)), jumps=[([np.sqrt(gamma) * sigma_minus()], 1.0)],
                            name="decay_counting")


def driven_mixed():
    return MeasurementModel(H=0.5 * pauli("x"), diffusive=[(np.sqrt(0.5) * sigma_minus(), 0.0)],
                            jumps=[([np.sqrt(0.5) * sigma_minus()], 1.0)], name="driven_mixed")


def qnd(gamma=1.0):
    return MeasurementModel(H=np.zeros((2, 2)), diffusive=[(np.sqrt(gamma) * pauli("z"), 0.0)],
                            name="qnd")


def dephasing_unobserved():
    return MeasurementModel(H=np.zeros((2, 2)), diffusive=[(pauli("z"), 0.0)],
                            unobserved=[pauli("x")], name="dephasing_unobserved")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_state(rng, d=2, rank=None):
    rank = d if rank is None else rank
    a = rng.standard_normal((d, rank)) + 1j * rng.standard_normal((d, rank))
    rho = a @ a.conj().T
    return rho / np.trace(rho).real


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
