import numpy as np
import pytest

from conftest import EXCITED, MIXED, decay_counting, decay_homodyne, driven_mixed, qnd, random_state
import oracles
from contmeas import (
    MeasurementModel,
    TimeGrid,
    classical_information,
    classical_information_rate,
    equilibrium_state,
    info_report,
    pure_state,
    purity_deficit,
    relative_entropy,
    von_neumann_entropy,
)
from contmeas.info import entropy_balance, jump_bracket


def test_entropy_values():
    assert von_neumann_entropy(MIXED) == pytest.approx(np.log(2))
    assert von_neumann_entropy(EXCITED) == 0.0
    assert von_neumann_entropy(np.diag([0.7, 0.3])) == pytest.approx(-0.7 * np.log(0.7) - 0.3 * np.log(0.3))


def test_relative_entropy(rng):
    x, y = random_state(rng), random_state(rng)
    assert relative_entropy(x, x) == pytest.approx(0.0, abs=1e-12)
    assert relative_entropy(x, y) > 0
    assert relative_entropy(MIXED, EXCITED) == np.inf
    assert relative_entropy(EXCITED, MIXED) == pytest.approx(np.log(2))


def test_purity_deficit_range(rng):
    for d in (2, 3, 4):
        assert 0 <= purity_deficit(random_state(rng, d)) <= (d - 1) / d + 1e-12
    assert purity_deficit(np.eye(3) / 3) == pytest.approx(2 / 3)


def test_jump_bracket_conventions():
    assert jump_bracket(0.7, 0.7) == pytest.approx(0.0)
    assert jump_bracket(0.0, 0.4) == pytest.approx(0.4)
    assert np.isnan(jump_bracket(0.3, 0.0))
    assert jump_bracket(0.0, 0.0) == 0.0
    assert jump_bracket(0.2, 0.5) > 0


def test_entropy_balance_identity(rng):
    states = np.array([random_state(rng, 3) for _ in range(50)])
    lhs, rhs = entropy_balance(states)
    assert lhs == pytest.approx(rhs, abs=1e-12)
    w = rng.random(50)
    lhs, rhs = entropy_balance(states, w)
    assert lhs == pytest.approx(rhs, abs=1e-12)


def test_pure_initial_state_has_zero_classical_information():
    ci = classical_information(driven_mixed(), EXCITED, TimeGrid(0.5, 1e-3, stride=100), 50, 1)
    assert np.all(ci.value == 0.0)
    rate, _ = classical_information_rate(driven_mixed(), EXCITED, 0.2, 20, 1)
    assert rate == 0.0


def test_classical_information_at_zero_and_nonnegative():
    grid = TimeGrid(1.0, 1e-3, stride=200)
    ci = classical_information(driven_mixed(), np.diag([0.6, 0.4]), grid, 400, 2)
    assert ci.value[0] == 0.0
    assert np.all(ci.value >= -3 * np.nan_to_num(ci.se) - 1e-15)
    # same sample, reweighted into the component-law form
    assert np.allclose(ci.value, ci.value_p, atol=1e-12)
    assert ci.consistency <= 1e-10


def test_both_measures_agree_with_oracle():
    grid = TimeGrid(0.6, 1e-3, stride=200)
    for measure in ("reference", "posterior"):
        ci = classical_information(qnd(), MIXED, grid, 1500, 3, measure=measure)
        for i, t in enumerate(grid.times):
            tol = 4 * ci.se[i] + 1e-12
            assert abs(ci.value[i] - oracles.qnd_classical_information(t)) <= tol


def test_rate_at_time_zero_for_qnd():
    # both sigma_z eigenstates give signals +-2, the mixture gives 0
    rate, se = classical_information_rate(qnd(), MIXED, 0.0, 1, 0)
    assert rate == pytest.approx(2.0) and se == 0.0


def test_rate_with_counting_channel_is_nonnegative():
    rho = np.diag([0.5, 0.5])
    rate, se = classical_information_rate(decay_counting(), rho, 0.3, 500, 4)
    assert rate >= -3 * se


def test_info_report_basic_properties():
    grid = TimeGrid(1.0, 1e-3, stride=250)
    rho = np.diag([0.8, 0.2])
    rep = info_report(driven_mixed(), rho, grid, 300, 5)
    assert rep.information[0] == pytest.approx(0.0, abs=1e-12)
    assert rep.classical[0] == 0.0
    assert np.all(rep.information <= rep.initial_entropy + 1e-12)
    assert rep.balance_residual <= 1e-8
    assert np.all(rep.mean_relative_entropy >= -1e-12)
    assert rep.initial_entropy == pytest.approx(von_neumann_entropy(rho))
    assert np.allclose(rep.decomposition_weights, [0.8, 0.2])
    assert len(rep.rows()) == len(grid.times)
    # the reference-measure form of the mean entropy estimates the same quantity
    assert abs(rep.mean_entropy_q[-1] - rep.mean_entropy[-1]) <= 4 * (
        rep.mean_entropy_q_se[-1] + rep.mean_entropy_se[-1])


def test_information_gain_from_equilibrium_is_nonnegative():
    m = decay_homodyne()
    eq = equilibrium_state(m).state
    rep = info_report(m, eq, TimeGrid(0.5, 1e-3, stride=250), 50, 6)
    assert np.all(rep.information >= -1e-12)


def test_single_trajectory_report_has_no_standard_errors():
    rep = info_report(qnd(), MIXED, TimeGrid(0.1, 1e-3, stride=50), 1, 7)
    assert rep.mean_entropy_se is None and rep.classical_se is None
    assert all(np.isnan(r["mean_entropy_se"]) for r in rep.rows())


def test_degenerate_state_records_its_decomposition():
    m = MeasurementModel(H=np.zeros((3, 3)), diffusive=[(np.diag([1.0, 0.0, -1.0]), 0.0)])
    rep = info_report(m, np.eye(3) / 3, TimeGrid(0.2, 1e-3, stride=100), 20, 8)
    assert rep.decomposition_vectors.shape == (3, 3)
    assert np.allclose(rep.decomposition_vectors.conj().T @ rep.decomposition_vectors, np.eye(3))


def test_pure_state_entropy_clamped():
    assert von_neumann_entropy(pure_state([1, 1j])) >= 0.0
