import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfql.core import (DiscreteSpace, RateSchedule, TimeGrid, check_distribution, marginals,
                       mean_action, onehot_mix, project, rho_nu, rho_q, uniform_flow)

GRID = DiscreteSpace(0.0, 4.0, 0.05)


def nearest_brute(space, v):
    # lower neighbour wins exact ties because argmin returns the first minimum
    d = np.abs(space.values - v)
    return space.values[np.argmin(d)]


def test_time_grid():
    g = TimeGrid(1.0, 16)
    assert g.dt == 1 / 16
    assert g.points[0] == 0.0 and g.points[-1] == 1.0
    assert np.all(np.diff(g.points) > 0)
    with pytest.raises(ValueError):
        TimeGrid(0.0, 4)
    with pytest.raises(ValueError):
        TimeGrid(1.0, -1)


def test_space_values():
    assert len(GRID) == 81
    assert GRID.values[0] == 0.0 and GRID.values[-1] == 4.0
    assert np.allclose(np.diff(GRID.values), 0.05)
    with pytest.raises(ValueError):
        DiscreteSpace(0.0, 1.0, 0.3)
    with pytest.raises(ValueError):
        DiscreteSpace(1.0, 1.0, 0.1)
    with pytest.raises(ValueError):
        GRID.values[0] = 5.0


def test_project_examples():
    assert project(GRID, 1.234) == pytest.approx(nearest_brute(GRID, 1.234))
    assert project(GRID, 1.234) == pytest.approx(1.25)
    assert project(GRID, -3.0) == 0.0
    assert project(GRID, 2.0) == 2.0
    assert project(GRID, 99.0) == 4.0


def test_project_midpoint_goes_down():
    sp = DiscreteSpace(0.0, 1.0, 0.25)
    assert project(sp, 0.125) == 0.0
    assert project(sp, 0.375) == 0.25


@settings(max_examples=300, deadline=None)
@given(st.floats(-10, 10, allow_nan=False))
def test_project_matches_brute_force(v):
    got = project(GRID, v)
    want = nearest_brute(GRID, v)
    # away from exact ties the nearest point is unique
    if abs(abs(got - v) - abs(want - v)) > 1e-12:
        pytest.fail(f"{v}: {got} vs {want}")


@settings(max_examples=300, deadline=None)
@given(st.floats(-1e6, 1e6, allow_nan=False))
def test_project_idempotent_and_bounded(v):
    p = project(GRID, v)
    assert GRID.values[0] <= p <= GRID.values[-1]
    assert project(GRID, p) == p


def test_rate_schedule_validation():
    with pytest.raises(ValueError):
        RateSchedule(0.5, 0.85)
    with pytest.raises(ValueError):
        RateSchedule(0.55, 0.0)
    RateSchedule(0.7, 0.05)  # slow MFC exponent is allowed


def test_rho_examples():
    s = RateSchedule(0.55, 0.85)
    assert rho_q(s, 2, 0) == 1.0
    assert rho_q(s, 2, 4) == pytest.approx(9 ** -0.55)
    assert rho_q(RateSchedule(1.0, 0.85), 16, 1) == pytest.approx(1 / 17)
    assert rho_nu(s, 0) == 1.0
    assert rho_nu(s, 99) == pytest.approx(100 ** -0.85)
    assert rho_nu(RateSchedule(0.7, 0.05), 3) == pytest.approx(4 ** -0.05)
    with pytest.raises(ValueError):
        rho_nu(s, -1)
    with pytest.raises(ValueError):
        rho_q(s, 2, -1)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.51, 1.0), st.floats(0.01, 1.0), st.integers(0, 10 ** 6), st.integers(1, 10 ** 6))
def test_rates_decrease(wq, wn, a, d):
    s = RateSchedule(wq, wn)
    assert rho_nu(s, a) >= rho_nu(s, a + d)
    assert rho_q(s, 16, a) >= rho_q(s, 16, a + d)
    assert 0 < rho_nu(s, a) <= 1 and 0 < rho_q(s, 16, a) <= 1


def test_rho_nu_square_summable():
    s = RateSchedule(0.55, 0.85)
    k = np.arange(10 ** 6)
    r = 1.0 / (1.0 + k) ** s.omega_nu
    sq = np.cumsum(r ** 2)
    lin = np.cumsum(r)
    # squares plateau while the plain sum keeps growing
    half = len(k) // 2
    assert (sq[-1] - sq[half]) / sq[-1] < 1e-4
    assert (lin[-1] - lin[half]) / lin[-1] > 0.1
    assert sq[-1] < 1.0 + 1.0 / (2 * s.omega_nu - 1)


def test_marginals_examples():
    mu, th = marginals(np.full((2, 2), 0.25))
    assert np.allclose(mu, 0.5) and np.allclose(th, 0.5)
    nu = np.zeros((2, 2))
    nu[1, 0] = 1
    mu, th = marginals(nu)
    assert mu.tolist() == [0, 1] and th.tolist() == [1, 0]
    mu, th = marginals([[0.1, 0.2], [0.3, 0.4]])
    assert np.allclose(mu, [0.3, 0.7]) and np.allclose(th, [0.4, 0.6])


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2 ** 31))
def test_marginals_are_distributions(nx, na, seed):
    nu = np.random.default_rng(seed).dirichlet(np.ones(nx * na)).reshape(nx, na)
    for m in marginals(nu):
        assert m.min() >= 0 and abs(m.sum() - 1) < 1e-9


def test_mean_action_examples():
    sp = DiscreteSpace(0.0, 4.0, 1.0)
    assert mean_action(np.eye(5)[2], sp) == 2.0
    assert mean_action([0.5, 0.5], DiscreteSpace(0.0, 1.0, 1.0)) == 0.5
    assert mean_action([0.25, 0.75], DiscreteSpace(-1.0, 3.0, 4.0)) == 2.0
    with pytest.raises(ValueError):
        mean_action([1.0], sp)


def test_check_distribution():
    check_distribution([0.5, 0.5])
    with pytest.raises(ValueError):
        check_distribution([0.6, 0.6])
    with pytest.raises(ValueError):
        check_distribution([1.5, -0.5])
    with pytest.raises(ValueError):
        check_distribution([])
    with pytest.raises(ValueError):
        check_distribution([np.nan, 1.0])


def test_onehot_mix_and_uniform():
    flow = uniform_flow(3, 2, 2)
    assert flow.shape == (3, 2, 2) and np.allclose(flow.sum(axis=(1, 2)), 1)
    w = np.full(4, 0.25)
    onehot_mix(w, 0, 0.5)
    assert np.allclose(w, [0.625, 0.125, 0.125, 0.125])
    assert math.isclose(w.sum(), 1.0)
