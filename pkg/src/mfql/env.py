"""Mean-field environments.

An environment maps ``(n, x, a, population)`` to a sampled next state and a
realised cost. Two views are offered for each concrete problem:

* ``step`` draws from a caller-owned ``numpy.random.Generator``; the learner
  calls the same compiled routine inside its training loop.
* ``transition_kernel`` / ``running_cost`` / ``terminal_costs`` give the exact
  finite model, used by the model-based solvers in :mod:`mfql.deterministic`.

States and actions are passed around as grid indices.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np
from scipy.special import ndtr

from .core import DiscreteSpace, TimeGrid, check_distribution

TABULAR, HARA, TRADER = 0, 1, 2


@numba.njit(cache=True)
def _project(svals, v):
    lower = svals[0]
    size = svals.shape[0]
    step = (svals[size - 1] - lower) / (size - 1)
    idx = math.ceil((v - lower) / step - 0.5)
    if idx < 0:
        return 0
    if idx > size - 1:
        return size - 1
    return idx


@numba.njit(cache=True)
def _categorical(cdf, u):
    k = 0
    last = cdf.shape[0] - 1
    while k < last and u >= cdf[k]:
        k += 1
    return k


@numba.njit(cache=True)
def env_initial(kind, ip, init_cdf, svals, rng):
    if kind == HARA:
        return _project(svals, ip[0] + (ip[1] - ip[0]) * rng.random())
    if kind == TRADER:
        return _project(svals, ip[0] + ip[1] * rng.normal())
    return _categorical(init_cdf, rng.random())


@numba.njit(cache=True)
def env_step(kind, fp, tab_cdf, tab_cost, tab_term, svals, avals,
             n, n_steps, xi, ai, z, mu_x, rng):
    """One transition. ``z`` is the population mean action and ``mu_x`` the
    population mass at the current state; each environment reads only what it
    depends on. Returns ``(next_state_index, cost)``; at ``n == n_steps`` the
    state is unchanged and the cost is terminal."""
    x = svals[xi]
    if kind == HARA:
        c, rho, gam, ewg = fp[0], fp[1], fp[2], fp[3]
        if n == n_steps:
            return xi, -(rho ** n) * x ** gam / gam
        a = avals[ai]
        if a > x + 1e-12:
            raise ValueError("inadmissible action: investment exceeds wealth")
        nw = int(fp[4])
        u = rng.random()
        w = fp[5 + nw - 1]
        acc = 0.0
        for j in range(nw):
            acc += fp[5 + nw + j]
            if u < acc:
                w = fp[5 + j]
                break
        g = c / (rho * ewg * (1.0 + (c - 1.0) * z ** 3))
        return _project(svals, g * w * a), -(rho ** n) * (x - a) ** gam / gam
    if kind == TRADER:
        c_alpha, c_x, gam, c_g, sigma, dt = fp[0], fp[1], fp[2], fp[3], fp[4], fp[5]
        if n == n_steps:
            return xi, 0.5 * c_g * x * x
        a = avals[ai]
        xj = _project(svals, x + a * dt + sigma * math.sqrt(dt) * rng.normal())
        return xj, dt * (0.5 * c_alpha * a * a + 0.5 * c_x * x * x - gam * x * z)
    # tabular; an uncoupled problem never reads mu_x, which may be NaN
    crowd = fp[0] * mu_x if fp[0] != 0.0 else 0.0
    if n == n_steps:
        return xi, tab_term[xi] + crowd
    xj = _categorical(tab_cdf[xi, ai], rng.random())
    return xj, tab_cost[n, xi, ai] + crowd


def _cell_edges(space: DiscreteSpace) -> np.ndarray:
    v = space.values
    mids = 0.5 * (v[1:] + v[:-1])
    return np.concatenate(([-np.inf], mids, [np.inf]))


class MeanFieldEnvironment:
    """Shared machinery; subclasses fill in the problem-specific parts.

    ``interaction`` names the population statistic the problem depends on:
    ``"action"`` (mean action), ``"state"`` (state marginal) or ``"none"``.
    """

    kind = TABULAR
    interaction = "none"
    backup_discount = 1.0

    time_grid: TimeGrid
    states: DiscreteSpace
    actions: DiscreteSpace

    @property
    def n_steps(self) -> int:
        return self.time_grid.n_steps

    # -- admissibility -------------------------------------------------
    def admissible_mask(self) -> np.ndarray:
        """Boolean array ``[n, x, a]``; every action is admissible by default."""
        return np.ones((self.n_steps + 1, len(self.states), len(self.actions)), dtype=bool)

    def admissible(self, n: int, x: int) -> np.ndarray:
        return np.flatnonzero(self.admissible_mask()[n, x])

    # -- sampling --------------------------------------------------------
    def _numba_args(self):
        raise NotImplementedError

    def _initial_args(self):
        raise NotImplementedError

    def sample_initial(self, rng: np.random.Generator) -> int:
        ip, cdf = self._initial_args()
        return int(env_initial(self.kind, ip, cdf, self.states.values, rng))

    def step(self, n, x, a, nu=None, rng=None, *, theta=None, mu=None):
        """Sample ``(next_state_index, cost)`` from state index ``x`` under
        action index ``a`` at time index ``n``.

        The population enters through ``nu`` (joint, states x actions) or
        through its marginals ``theta`` / ``mu``.
        """
        if rng is None:
            raise ValueError("step requires an explicit random generator")
        z, mu_x = self._summaries(x, nu, theta, mu)
        fp, cdf, cost, term = self._numba_args()
        xj, c = env_step(self.kind, fp, cdf, cost, term, self.states.values,
                         self.actions.values, int(n), self.n_steps, int(x), int(a),
                         z, mu_x, rng)
        return int(xj), float(c)

    def terminal_cost(self, x, nu=None, *, theta=None, mu=None) -> float:
        z, mu_x = self._summaries(x, nu, theta, mu)
        fp, cdf, cost, term = self._numba_args()
        return float(env_step(self.kind, fp, cdf, cost, term, self.states.values,
                              self.actions.values, self.n_steps, self.n_steps, int(x), 0,
                              z, mu_x, np.random.default_rng(0))[1])

    def _summaries(self, x, nu, theta, mu):
        if nu is not None:
            nu = np.asarray(nu, dtype=float)
            mu = nu.sum(axis=1)
            theta = nu.sum(axis=0)
        z = float(theta @ self.actions.values) if theta is not None else math.nan
        mu_x = float(mu[x]) if mu is not None else math.nan
        if self.interaction == "action" and math.isnan(z):
            raise ValueError(f"{type(self).__name__} needs the action distribution")
        if self.interaction == "state" and math.isnan(mu_x):
            raise ValueError(f"{type(self).__name__} needs the state distribution")
        return z, mu_x

    # -- exact finite model ----------------------------------------------
    def initial_distribution(self) -> np.ndarray:
        raise NotImplementedError

    def transition_kernel(self, n: int, nu) -> np.ndarray:
        """Exact ``p[x, a, x']`` at time index ``n`` given the joint ``nu``."""
        raise NotImplementedError

    def running_cost(self, n: int, nu) -> np.ndarray:
        """Exact expected running cost ``f[x, a]`` at time index ``n``."""
        raise NotImplementedError

    def terminal_costs(self, nu) -> np.ndarray:
        raise NotImplementedError

    def to_model(self):
        from .deterministic import TabularModel

        return TabularModel(
            kernel=self.transition_kernel,
            cost=self.running_cost,
            terminal=self.terminal_costs,
            mu0=self.initial_distribution(),
            n_steps=self.n_steps,
            n_actions=len(self.actions),
            admissible=self.admissible_mask(),
        )

    def _mean_action(self, nu) -> float:
        return float(np.asarray(nu).sum(axis=0) @ self.actions.values)


@dataclass(frozen=True)
class HaraParams:
    c: float = 3.0
    discount: float = 0.95
    gamma: float = 0.2
    noise_values: tuple = (0.9, 1.3)
    noise_probs: tuple = (0.75, 0.25)
    initial_low: float = 0.0
    initial_high: float = 1.0

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ValueError("utility exponent gamma must lie in (0, 1)")
        if not 0 < self.discount <= 1:
            raise ValueError("discount must lie in (0, 1]")
        if len(self.noise_values) != len(self.noise_probs):
            raise ValueError("noise_values and noise_probs differ in length")
        check_distribution(self.noise_probs, name="noise_probs")
        if min(self.noise_values) < 0:
            raise ValueError("noise support must be non-negative")

    @property
    def mean_w_gamma(self) -> float:
        return float(np.dot(self.noise_probs, np.power(self.noise_values, self.gamma)))

    @property
    def mean_w(self) -> float:
        return float(np.dot(self.noise_probs, self.noise_values))

    def production(self, z):
        """Deterministic production factor ``g(z)``; ``G(z, W) = g(z) W``."""
        z = np.asarray(z, dtype=float)
        return self.c / (self.discount * self.mean_w_gamma * (1.0 + (self.c - 1.0) * z ** 3))


class HaraEnvironment(MeanFieldEnvironment):
    """Capital accumulation with HARA utility and production decreasing in the
    population's mean investment.

    Utility is negated so the learner minimises. Discounting is folded into the
    per-step cost, so the backup discount is 1. The final action is forced to 0
    (everything is consumed).
    """

    kind = HARA
    interaction = "action"

    def __init__(self, params: HaraParams | None = None, n_steps: int = 2,
                 states: DiscreteSpace | None = None, actions: DiscreteSpace | None = None):
        self.params = params or HaraParams()
        self.time_grid = TimeGrid(float(n_steps), n_steps)
        self.states = states or DiscreteSpace(0.0, 4.0, 0.05)
        self.actions = actions or DiscreteSpace(0.0, 4.0, 0.05)
        if self.actions.values[0] != 0.0:
            raise ValueError("the action grid must contain 0 (needed for admissibility)")
        if self.states.values[0] < 0:
            raise ValueError("wealth grid must be non-negative")

    def admissible_mask(self):
        mask = self.actions.values[None, :] <= self.states.values[:, None] + 1e-12
        full = np.repeat(mask[None], self.n_steps + 1, axis=0)
        full[-1] = False
        full[-1, :, 0] = True
        return full

    def _numba_args(self):
        p = self.params
        fp = np.array([p.c, p.discount, p.gamma, p.mean_w_gamma, len(p.noise_values),
                       *p.noise_values, *p.noise_probs], dtype=float)
        return fp, np.zeros((1, 1, 1)), np.zeros((1, 1, 1)), np.zeros(1)

    def _initial_args(self):
        p = self.params
        return np.array([p.initial_low, p.initial_high]), np.zeros(1)

    def initial_distribution(self):
        p = self.params
        edges = np.clip(_cell_edges(self.states), p.initial_low, p.initial_high)
        mass = np.diff(edges) / (p.initial_high - p.initial_low)
        return mass / mass.sum()

    def transition_kernel(self, n, nu):
        p = self.params
        nx, na = len(self.states), len(self.actions)
        ker = np.zeros((nx, na, nx))
        if n >= self.n_steps:
            ker[np.arange(nx), :, np.arange(nx)] = 1.0
            return ker
        g = float(p.production(self._mean_action(nu)))
        for w, pw in zip(p.noise_values, p.noise_probs):
            dest = np.array([self.states.index(g * w * a) for a in self.actions.values])
            ker[:, np.arange(na), dest] += pw
        return ker

    def running_cost(self, n, nu):
        p = self.params
        consumption = np.clip(self.states.values[:, None] - self.actions.values[None, :], 0, None)
        return -(p.discount ** n) * consumption ** p.gamma / p.gamma

    def terminal_costs(self, nu):
        p = self.params
        return -(p.discount ** self.n_steps) * self.states.values ** p.gamma / p.gamma


@dataclass(frozen=True)
class TraderParams:
    c_alpha: float = 1.0
    c_x: float = 2.0
    gamma: float = 1.75
    c_g: float = 0.3
    sigma: float = 0.5
    horizon: float = 1.0

    def __post_init__(self):
        if not self.c_alpha > 0:
            raise ValueError("c_alpha must be > 0")
        if not self.c_x > 0:
            raise ValueError("c_x must be > 0")
        if self.c_g < 0:
            raise ValueError("c_g must be >= 0")
        if not self.horizon > 0:
            raise ValueError("horizon must be > 0")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")


TRADER_GRIDS = {
    "mfg": {"actions": (-2.5, 1.0), "states": (-1.5, 1.75)},
    "mfc": {"actions": (-0.25, 5.0), "states": (-0.75, 4.0)},
}


class TraderEnvironment(MeanFieldEnvironment):
    """Inventory liquidation with linear price impact from the mean trading
    rate; Euler step of ``dX = a dt + sigma dW`` projected on the grid."""

    kind = TRADER
    interaction = "action"

    def __init__(self, params: TraderParams | None = None, n_steps: int = 16,
                 states: DiscreteSpace | None = None, actions: DiscreteSpace | None = None,
                 regime: str = "mfg", initial_mean: float = 0.5, initial_sd: float = 0.3):
        self.params = params or TraderParams()
        self.time_grid = TimeGrid(self.params.horizon, n_steps)
        step = math.sqrt(self.time_grid.dt)
        if regime not in TRADER_GRIDS:
            raise ValueError(f"regime must be one of {sorted(TRADER_GRIDS)}, got {regime!r}")
        grids = TRADER_GRIDS[regime]
        self.states = states or DiscreteSpace(*grids["states"], step)
        self.actions = actions or DiscreteSpace(*grids["actions"], step)
        self.initial_mean = initial_mean
        self.initial_sd = initial_sd

    def _numba_args(self):
        p = self.params
        fp = np.array([p.c_alpha, p.c_x, p.gamma, p.c_g, p.sigma, self.time_grid.dt])
        return fp, np.zeros((1, 1, 1)), np.zeros((1, 1, 1)), np.zeros(1)

    def _initial_args(self):
        return np.array([self.initial_mean, self.initial_sd]), np.zeros(1)

    def _gaussian_cells(self, mean, sd):
        edges = _cell_edges(self.states)
        if sd == 0:
            out = np.zeros(len(self.states))
            out[self.states.index(mean)] = 1.0
            return out
        return np.diff(ndtr((edges - np.asarray(mean)[..., None]) / sd), axis=-1)

    def initial_distribution(self):
        return self._gaussian_cells(self.initial_mean, self.initial_sd)

    def transition_kernel(self, n, nu):
        nx, na = len(self.states), len(self.actions)
        if n >= self.n_steps:
            ker = np.zeros((nx, na, nx))
            ker[np.arange(nx), :, np.arange(nx)] = 1.0
            return ker
        dt = self.time_grid.dt
        means = self.states.values[:, None] + self.actions.values[None, :] * dt
        sd = self.params.sigma * math.sqrt(dt)
        if sd == 0:
            ker = np.zeros((nx, na, nx))
            for i in range(nx):
                for j in range(na):
                    ker[i, j, self.states.index(means[i, j])] = 1.0
            return ker
        return self._gaussian_cells(means, sd)

    def running_cost(self, n, nu):
        p = self.params
        x = self.states.values[:, None]
        a = self.actions.values[None, :]
        z = self._mean_action(nu)
        return self.time_grid.dt * (0.5 * p.c_alpha * a ** 2 + 0.5 * p.c_x * x ** 2 - p.gamma * x * z)

    def terminal_costs(self, nu):
        return 0.5 * self.params.c_g * self.states.values ** 2


class TabularEnvironment(MeanFieldEnvironment):
    """Finite model given by explicit arrays.

    ``kernel[x, a, x']`` is time-homogeneous, ``cost[n, x, a]`` (or ``[x, a]``)
    is the running cost and ``terminal[x]`` the terminal cost. A non-zero
    ``crowd_aversion`` adds ``crowd_aversion * mu_n(x)`` to every cost, making
    the problem interact through the state distribution.
    """

    kind = TABULAR

    def __init__(self, kernel, cost, terminal, mu0, n_steps: int,
                 crowd_aversion: float = 0.0, states: DiscreteSpace | None = None,
                 actions: DiscreteSpace | None = None, admissible=None):
        kernel = np.asarray(kernel, dtype=float)
        nx, na, nx2 = kernel.shape
        if nx != nx2:
            raise ValueError("kernel must have shape (states, actions, states)")
        for row in kernel.reshape(-1, nx):
            check_distribution(row, name="kernel row")
        cost = np.asarray(cost, dtype=float)
        if cost.ndim == 2:
            cost = np.repeat(cost[None], max(n_steps, 1), axis=0)
        if cost.shape != (max(n_steps, 1), nx, na):
            raise ValueError(f"cost has shape {cost.shape}, expected {(n_steps, nx, na)}")
        self.kernel = kernel
        self.cost = cost
        self.terminal = np.asarray(terminal, dtype=float)
        self.mu0 = check_distribution(mu0, name="mu0")
        self.time_grid = TimeGrid(float(max(n_steps, 1)), n_steps)
        self.states = states or DiscreteSpace(0.0, float(nx - 1), 1.0)
        self.actions = actions or DiscreteSpace(0.0, float(na - 1), 1.0)
        self.crowd_aversion = float(crowd_aversion)
        self.interaction = "state" if self.crowd_aversion else "none"
        self._admissible = None if admissible is None else np.asarray(admissible, dtype=bool)

    def admissible_mask(self):
        if self._admissible is not None:
            return self._admissible.copy()
        return super().admissible_mask()

    def _numba_args(self):
        cdf = np.cumsum(self.kernel, axis=2)
        return np.array([self.crowd_aversion]), cdf, self.cost, self.terminal

    def _initial_args(self):
        return np.zeros(2), np.cumsum(self.mu0)

    def initial_distribution(self):
        return self.mu0.copy()

    def transition_kernel(self, n, nu):
        if n >= self.n_steps:
            nx, na = self.kernel.shape[:2]
            ker = np.zeros_like(self.kernel)
            ker[np.arange(nx), :, np.arange(nx)] = 1.0
            return ker
        return self.kernel.copy()

    def running_cost(self, n, nu):
        out = self.cost[n].copy()
        if self.crowd_aversion:
            out += self.crowd_aversion * np.asarray(nu).sum(axis=1)[:, None]
        return out

    def terminal_costs(self, nu):
        out = self.terminal.copy()
        if self.crowd_aversion:
            out += self.crowd_aversion * np.asarray(nu).sum(axis=1)
        return out
