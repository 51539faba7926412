import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfql.core import DiscreteSpace
from mfql.env import HaraEnvironment, HaraParams, TabularEnvironment, TraderEnvironment, TraderParams


def point_theta(env, value):
    th = np.zeros(len(env.actions))
    th[env.actions.index(value)] = 1.0
    return th


def nearest(values, v):
    return int(np.argmin(np.abs(np.asarray(values) - v)))


# -- HARA -------------------------------------------------------------------------

def test_hara_defaults():
    env = HaraEnvironment()
    p = env.params
    assert (p.c, p.discount, p.gamma) == (3.0, 0.95, 0.2)
    assert p.noise_values == (0.9, 1.3) and p.noise_probs == (0.75, 0.25)
    assert len(env.states) == len(env.actions) == 81
    assert env.n_steps == 2


def test_hara_zero_wealth_absorbs():
    env = HaraEnvironment()
    rng = np.random.default_rng(0)
    for _ in range(20):
        xn, c = env.step(0, 0, 0, rng=rng, theta=np.full(81, 1 / 81))
        assert xn == 0 and c == 0.0


def test_hara_production_at_zero():
    p = HaraParams()
    assert p.mean_w == pytest.approx(1.0)
    ewg = 0.75 * 0.9 ** 0.2 + 0.25 * 1.3 ** 0.2
    assert p.production(0.0) == pytest.approx(3.0 / (0.95 * ewg))
    assert p.production(0.0) * p.mean_w == pytest.approx(3.0 / 0.95 * 1.0 / ewg)


def test_hara_production_decreasing():
    p = HaraParams()
    z = np.linspace(0, 5, 500)
    g = p.production(z)
    assert np.all(g > 0) and np.all(np.diff(g) < 0)


def test_hara_rejects_inadmissible():
    env = HaraEnvironment()
    with pytest.raises(ValueError):
        env.step(0, env.states.index(0.5), env.actions.index(1.0), rng=np.random.default_rng(0),
                 theta=np.full(81, 1 / 81))


def test_hara_admissible_mask():
    env = HaraEnvironment()
    m = env.admissible_mask()
    for i, x in enumerate(env.states.values):
        allowed = env.actions.values[m[0, i]]
        assert np.all(allowed <= x + 1e-12) and allowed.max() == pytest.approx(x)
    assert m[-1, :, 0].all() and not m[-1, :, 1:].any()


def test_hara_terminal_cost():
    env = HaraEnvironment()
    x = env.states.index(1.0)
    theta = np.full(81, 1 / 81)
    assert env.terminal_cost(x, theta=theta) == pytest.approx(-(0.95 ** 2) / 0.2)
    # the step at n = N_T returns the same value and keeps the state
    xn, c = env.step(2, x, 0, rng=np.random.default_rng(1), theta=theta)
    assert xn == x and c == pytest.approx(-(0.95 ** 2) / 0.2)


def tiny_hara():
    sp = DiscreteSpace(0.0, 2.0, 1.0)
    ac = DiscreteSpace(0.0, 1.0, 0.5)
    p = HaraParams(initial_low=1.9, initial_high=2.1)
    return HaraEnvironment(p, 2, sp, ac)


def enumerate_cost(env, policy, z, x0):
    """Expected cost of a feedback policy with the population mean action held at
    ``z``, by listing every noise path."""
    p = env.params
    g = p.production(z)
    total = 0.0
    for path in itertools.product(range(len(p.noise_values)), repeat=env.n_steps):
        prob = np.prod([p.noise_probs[j] for j in path])
        x = env.states.values[x0]
        cost = 0.0
        for n in range(env.n_steps):
            a = env.actions.values[policy[n][nearest(env.states.values, x)]]
            cost += -(p.discount ** n) * (x - a) ** p.gamma / p.gamma
            x = env.states.values[nearest(env.states.values, g * p.noise_values[path[n]] * a)]
        cost += -(p.discount ** env.n_steps) * x ** p.gamma / p.gamma
        total += prob * cost
    return total


def test_hara_trajectory_cost_matches_enumeration():
    env = tiny_hara()
    policy = [[0, 1, 2], [0, 1, 1], [0, 0, 0]]
    theta = np.array([0.2, 0.5, 0.3])
    z = float(theta @ env.actions.values)
    x0 = env.states.index(2.0)
    want = enumerate_cost(env, policy, z, x0)

    # exact kernel propagation with the population frozen
    nu = np.zeros((3, 3))
    nu[0] = theta  # any joint with action marginal theta
    mu = np.eye(3)[x0]
    got = 0.0
    for n in range(env.n_steps):
        a = np.array(policy[n])
        got += mu @ env.running_cost(n, nu)[np.arange(3), a]
        mu = mu @ env.transition_kernel(n, nu)[np.arange(3), a]
    got += mu @ env.terminal_costs(nu)
    assert got == pytest.approx(want, abs=1e-12)

    # Monte Carlo through the sampled step
    rng = np.random.default_rng(3)
    costs = []
    for _ in range(20000):
        x, c = x0, 0.0
        for n in range(env.n_steps + 1):
            a = policy[n][x]
            x, f = env.step(n, x, a, rng=rng, theta=theta)
            c += f
        costs.append(c)
    costs = np.array(costs)
    assert abs(costs.mean() - want) < 4 * costs.std() / math.sqrt(len(costs)) + 1e-12


def test_hara_initial_samples():
    env = HaraEnvironment()
    rng = np.random.default_rng(0)
    xs = env.states.values[[env.sample_initial(rng) for _ in range(100000)]]
    assert 0.48 <= xs.mean() <= 0.52
    assert xs.min() >= 0.0 and xs.max() <= 1.0
    mu0 = env.initial_distribution()
    assert mu0.sum() == pytest.approx(1.0)
    assert mu0 @ env.states.values == pytest.approx(0.5)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(0, 4))
def test_hara_wealth_stays_nonnegative(seed, z):
    env = HaraEnvironment()
    rng = np.random.default_rng(seed)
    theta = point_theta(env, env.actions.project(z))
    mask = env.admissible_mask()
    x = env.sample_initial(rng)
    for n in range(env.n_steps + 1):
        adm = np.flatnonzero(mask[n, x])
        x, c = env.step(n, x, int(rng.choice(adm)), rng=rng, theta=theta)
        assert env.states.values[x] >= 0 and math.isfinite(c)


# -- trader -----------------------------------------------------------------------

def test_trader_defaults():
    env = TraderEnvironment()
    assert env.time_grid.dt == 1 / 16
    assert env.states.step == env.actions.step == 0.25
    assert (env.states.lower, env.states.upper) == (-1.5, 1.75)
    assert (env.actions.lower, env.actions.upper) == (-2.5, 1.0)
    mfc = TraderEnvironment(regime="mfc")
    assert (mfc.states.lower, mfc.states.upper) == (-0.75, 4.0)
    assert (mfc.actions.lower, mfc.actions.upper) == (-0.25, 5.0)
    assert env.admissible_mask().all()
    with pytest.raises(ValueError):
        TraderEnvironment(regime="both")


def test_trader_params_validation():
    with pytest.raises(ValueError):
        TraderParams(c_alpha=0.0)
    with pytest.raises(ValueError):
        TraderParams(c_x=-1.0)
    with pytest.raises(ValueError):
        TraderParams(c_g=-0.1)
    with pytest.raises(ValueError):
        TraderParams(horizon=0.0)


def test_trader_driftless_step():
    env = TraderEnvironment(TraderParams(sigma=0.0))
    theta = point_theta(env, 0.0)
    rng = np.random.default_rng(0)
    for xi, x in enumerate(env.states.values):
        xn, c = env.step(0, xi, env.actions.index(0.0), rng=rng, theta=theta)
        assert xn == xi
        assert c == pytest.approx(env.time_grid.dt * x * x)  # c_x / 2 = 1


def test_trader_cost_at_zero_inventory():
    env = TraderEnvironment()
    x0 = env.states.index(0.0)
    rng = np.random.default_rng(0)
    for th_val in (-2.0, 0.0, 1.0):
        theta = point_theta(env, th_val)
        for ai, a in enumerate(env.actions.values):
            _, c = env.step(3, x0, ai, rng=rng, theta=theta)
            assert c == pytest.approx(env.time_grid.dt * 0.5 * a * a)


def test_trader_terminal_cost():
    env = TraderEnvironment()
    x = env.states.index(1.0)
    assert env.terminal_cost(x, theta=point_theta(env, 0.0)) == pytest.approx(0.15)


def test_trader_one_step_mean():
    env = TraderEnvironment()
    rng = np.random.default_rng(11)
    x0, a1 = env.states.index(0.0), env.actions.index(1.0)
    theta = point_theta(env, 0.0)
    n_draws = 100000
    xs = env.states.values[[env.step(0, x0, a1, rng=rng, theta=theta)[0] for _ in range(n_draws)]]
    dt, sigma = env.time_grid.dt, env.params.sigma
    assert abs(xs.mean() - dt) < 3 * sigma * math.sqrt(dt) / math.sqrt(n_draws)
    # exact mean of the projected Gaussian step
    exact = env.transition_kernel(0, None)[x0, a1] @ env.states.values
    assert abs(xs.mean() - exact) < 4 * xs.std() / math.sqrt(n_draws)


def test_trader_kernel_matches_sampling():
    env = TraderEnvironment()
    rng = np.random.default_rng(5)
    xi, ai = env.states.index(0.5), env.actions.index(-1.0)
    theta = point_theta(env, 0.0)
    n_draws = 50000
    hits = np.bincount([env.step(4, xi, ai, rng=rng, theta=theta)[0] for _ in range(n_draws)],
                       minlength=len(env.states))
    p = env.transition_kernel(4, None)[xi, ai]
    assert p.sum() == pytest.approx(1.0)
    se = np.sqrt(p * (1 - p) / n_draws)
    assert np.all(np.abs(hits / n_draws - p) <= 5 * se + 1e-4)


def test_trader_initial_samples():
    env = TraderEnvironment()
    rng = np.random.default_rng(2)
    idx = np.array([env.sample_initial(rng) for _ in range(100000)])
    xs = env.states.values[idx]
    assert idx.min() >= 0 and idx.max() < len(env.states)
    assert abs(xs.std() / 0.3 - 1) < 0.05
    assert env.initial_distribution().sum() == pytest.approx(1.0)


def test_trader_deterministic_euler():
    env = TraderEnvironment(TraderParams(sigma=0.0))
    rng = np.random.default_rng(0)
    theta = point_theta(env, -0.5)
    controls = [-2.0, -2.0, 1.0, 0.5]
    xi = env.states.index(0.5)
    x = 0.5
    for n, a in enumerate(controls):
        xi, c = env.step(n, xi, env.actions.index(a), rng=rng, theta=theta)
        want_cost = (1 / 16) * (0.5 * a * a + x * x - 1.75 * x * -0.5)
        assert c == pytest.approx(want_cost)
        x = env.states.values[nearest(env.states.values, x + a / 16)]
        assert env.states.values[xi] == x


def test_replay_same_seed():
    for env, theta in ((HaraEnvironment(), np.full(81, 1 / 81)),
                       (TraderEnvironment(), point_theta(TraderEnvironment(), 0.0))):
        outs = []
        for _ in range(2):
            rng = np.random.default_rng(42)
            outs.append([env.step(0, 10, 3, rng=rng, theta=theta) for _ in range(50)])
        assert outs[0] == outs[1]


def test_step_requires_generator_and_population():
    env = TraderEnvironment()
    with pytest.raises(ValueError):
        env.step(0, 0, 0, theta=point_theta(env, 0.0))
    with pytest.raises(ValueError):
        env.step(0, 0, 0, rng=np.random.default_rng(0))


# -- tabular ----------------------------------------------------------------------

def test_tabular_validation():
    ker = np.zeros((2, 2, 2))
    ker[..., 0] = 1
    TabularEnvironment(ker, np.zeros((2, 2)), np.zeros(2), [0.5, 0.5], 2)
    bad = ker.copy()
    bad[0, 0] = [0.5, 0.6]
    with pytest.raises(ValueError):
        TabularEnvironment(bad, np.zeros((2, 2)), np.zeros(2), [0.5, 0.5], 2)
    with pytest.raises(ValueError):
        TabularEnvironment(ker, np.zeros((3, 2, 2)), np.zeros(2), [0.5, 0.5], 2)


def test_tabular_crowd_cost():
    ker = np.zeros((2, 2, 2))
    ker[..., 1] = 1
    env = TabularEnvironment(ker, np.ones((2, 2)), np.zeros(2), [0.5, 0.5], 2, crowd_aversion=2.0)
    assert env.interaction == "state"
    xn, c = env.step(0, 0, 1, rng=np.random.default_rng(0), mu=np.array([0.25, 0.75]))
    assert xn == 1 and c == pytest.approx(1.0 + 2.0 * 0.25)
