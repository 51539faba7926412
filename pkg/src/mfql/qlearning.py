"""Unified two-timescale mean-field Q-learning for finite horizon.

A single agent interacts with a mean-field environment, and learns two
things at once: the time-indexed Q-table and an estimate of the population
distribution (joint state-action, state marginal or action marginal). The
two estimates are updated with learning rates that decay at different
speeds. When the Q-table learns faster, the result is the MFG equilibrium.
When the distribution learns faster, the result approaches the MFC optimum.

The inner loop is compiled with numba. The public helpers
(:func:`epsilon_greedy`, :func:`update_distribution`, :func:`update_q`,
:func:`run_episode`) call the same compiled routines that :func:`train` runs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_time_state_pairs, check_unit_interval
from .core import RateSchedule
from .env import env_initial, env_step

MODES = {"joint": 0, "state": 1, "action": 2}
JOINT, STATE, ACTION = 0, 1, 2
COMPATIBLE = {"none": set(MODES), "action": {"joint", "action"}, "state": {"joint", "state"}}


# -- compiled kernels ---------------------------------------------------------

@numba.njit(cache=True)
def _eps_greedy(q_row, adm, n_adm, eps, rng):
    u = rng.random()
    if u < eps:
        return adm[rng.integers(0, n_adm)]
    best = adm[0]
    best_v = q_row[best]
    for j in range(1, n_adm):
        a = adm[j]
        if q_row[a] < best_v:
            best_v = q_row[a]
            best = a
    return best


@numba.njit(cache=True)
def _mix(row, idx, rho):
    """``row <- row + rho (delta_idx - row)``, renormalised; returns the L1 change."""
    l1 = 0.0
    total = 0.0
    for j in range(row.shape[0]):
        new = (1.0 - rho) * row[j]
        if j == idx:
            new += rho
        l1 += abs(new - row[j])
        row[j] = new
        total += new
    for j in range(row.shape[0]):
        row[j] /= total
    return l1


@numba.njit(cache=True)
def _q_update(q, n, x, a, cost, xn, rho, discount, adm_idx, adm_cnt, n_steps):
    target = cost
    if n < n_steps:
        nxt = q[n + 1, xn]
        m = nxt[adm_idx[n + 1, xn, 0]]
        for j in range(1, adm_cnt[n + 1, xn]):
            v = nxt[adm_idx[n + 1, xn, j]]
            if v < m:
                m = v
        target += discount * m
    old = q[n, x, a]
    q[n, x, a] = old + rho * (target - old)
    return abs(q[n, x, a] - old)


@numba.njit(cache=True)
def _summaries(row, mode, x, avals, na):
    z = math.nan
    mu_x = math.nan
    if mode == JOINT:
        z = 0.0
        for j in range(row.shape[0]):
            z += row[j] * avals[j % na]
        mu_x = 0.0
        for a in range(na):
            mu_x += row[x * na + a]
    elif mode == ACTION:
        z = 0.0
        for a in range(na):
            z += row[a] * avals[a]
    else:
        mu_x = row[x]
    return z, mu_x


@numba.njit(cache=True)
def _flat_index(mode, x, a, na):
    if mode == JOINT:
        return x * na + a
    if mode == STATE:
        return x
    return a


@numba.njit(cache=True)
def _episode(kind, fp, cdf, tcost, tterm, svals, avals, ip, init_cdf,
             adm_idx, adm_cnt, q, dist, counts, mode, k,
             omega_q, omega_nu, eps, discount, rng,
             rec_x, rec_a, rec_c, rec_xn, nu_norm, q_norm):
    n_steps = q.shape[0] - 1
    na = q.shape[2]
    rho_nu = 1.0 / (1.0 + k) ** omega_nu
    x = env_initial(kind, ip, init_cdf, svals, rng)
    for n in range(n_steps + 1):
        a = _eps_greedy(q[n, x], adm_idx[n, x], adm_cnt[n, x], eps, rng)
        row = dist[n]
        nu_norm[n] = _mix(row, _flat_index(mode, x, a, na), rho_nu)
        z, mu_x = _summaries(row, mode, x, avals, na)
        xn, c = env_step(kind, fp, cdf, tcost, tterm, svals, avals,
                         n, n_steps, x, a, z, mu_x, rng)
        counts[n, x, a] += 1
        rho_q = 1.0 / (1.0 + n_steps * counts[n, x, a]) ** omega_q
        q_norm[n] = _q_update(q, n, x, a, c, xn, rho_q, discount, adm_idx, adm_cnt, n_steps)
        rec_x[n] = x
        rec_a[n] = a
        rec_c[n] = c
        rec_xn[n] = xn
        x = xn


@numba.njit(cache=True)
def _slice_means(dist, mode, avals, out):
    na = avals.shape[0]
    for n in range(dist.shape[0]):
        if mode == STATE:
            out[n] = math.nan
            continue
        s = 0.0
        for j in range(dist.shape[1]):
            s += dist[n, j] * avals[j % na]
        out[n] = s


@numba.njit(cache=True)
def _train(kind, fp, cdf, tcost, tterm, svals, avals, ip, init_cdf,
           adm_idx, adm_cnt, q, dist, counts, mode, k0, n_episodes,
           omega_q, omega_nu, eps, discount, tol_nu, tol_q, early_stop, log_every, rng,
           log_ep, log_nu, log_q, log_mean):
    n_times = q.shape[0]
    rec_x = np.empty(n_times, np.int64)
    rec_a = np.empty(n_times, np.int64)
    rec_c = np.empty(n_times)
    rec_xn = np.empty(n_times, np.int64)
    nu_norm = np.empty(n_times)
    q_norm = np.empty(n_times)
    means = np.empty(n_times)
    n_log = 0
    done = 0
    converged = False
    for i in range(n_episodes):
        k = k0 + i
        _episode(kind, fp, cdf, tcost, tterm, svals, avals, ip, init_cdf,
                 adm_idx, adm_cnt, q, dist, counts, mode, k,
                 omega_q, omega_nu, eps, discount, rng,
                 rec_x, rec_a, rec_c, rec_xn, nu_norm, q_norm)
        done += 1
        converged = True
        for n in range(n_times):
            if not (nu_norm[n] <= tol_nu and q_norm[n] < tol_q):
                converged = False
                break
        if (i % log_every == 0 or i == n_episodes - 1 or (converged and early_stop)) and n_log < log_ep.shape[0]:
            _slice_means(dist, mode, avals, means)
            log_ep[n_log] = k
            log_nu[n_log, :] = nu_norm
            log_q[n_log, :] = q_norm
            log_mean[n_log, :] = means
            n_log += 1
        if converged and early_stop:
            break
    return done, converged, n_log


# -- Python-facing API --------------------------------------------------------

@dataclass
class LearnerConfig:
    omega_q: float = 0.55
    omega_nu: float = 0.85
    epsilon: float = 0.15
    discount: float = 1.0
    tol_nu: float = 1e-6
    tol_q: float = 1e-6
    max_episodes: int = 10_000
    mode: str = "action"
    seed: int | None = 0
    log_every: int = 1
    early_stopping: bool = True

    def __post_init__(self):
        RateSchedule(self.omega_q, self.omega_nu)
        check_unit_interval(self.epsilon, "epsilon")
        check_unit_interval(self.discount, "discount", open_left=True)
        if not (self.tol_nu > 0 and self.tol_q > 0):
            raise ValueError("tolerances must be > 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {sorted(MODES)}, got {self.mode!r}")
        if self.max_episodes < 0:
            raise ValueError("max_episodes must be >= 0")
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")

    @property
    def schedule(self) -> RateSchedule:
        return RateSchedule(self.omega_q, self.omega_nu)


@dataclass
class LearnerState:
    """Q-table, distribution estimate and visit counts.

    ``dist`` is stored flat per time slice: ``[n, x * |A| + a]`` in joint mode,
    ``[n, x]`` in state mode and ``[n, a]`` in action mode.
    """

    q: np.ndarray
    dist: np.ndarray
    counts: np.ndarray
    mode: str
    episode: int = 0

    @classmethod
    def initial(cls, n_steps: int, n_states: int, n_actions: int, mode: str = "action"):
        size = {"joint": n_states * n_actions, "state": n_states, "action": n_actions}[mode]
        return cls(
            q=np.zeros((n_steps + 1, n_states, n_actions)),
            dist=np.full((n_steps + 1, size), 1.0 / size),
            counts=np.zeros((n_steps + 1, n_states, n_actions), dtype=np.int64),
            mode=mode,
        )

    @classmethod
    def for_env(cls, env, mode: str = "action"):
        return cls.initial(env.n_steps, len(env.states), len(env.actions), mode)

    @property
    def distribution(self) -> np.ndarray:
        """Distribution estimate, joint ``[n, x, a]`` or marginal ``[n, .]``."""
        if self.mode == "joint":
            return self.dist.reshape(self.q.shape)
        return self.dist

    @property
    def theta(self) -> np.ndarray | None:
        if self.mode == "joint":
            return self.distribution.sum(axis=1)
        return self.dist if self.mode == "action" else None

    @property
    def occupancy(self) -> np.ndarray:
        """State visits per time index, ``[n, x]``."""
        return self.counts.sum(axis=2)


@dataclass
class EpisodeRecord:
    states: np.ndarray
    actions: np.ndarray
    costs: np.ndarray
    next_states: np.ndarray
    nu_norms: np.ndarray
    q_norms: np.ndarray

    @property
    def steps(self) -> list[tuple]:
        return [(n, int(x), int(a), float(c), int(xn)) for n, (x, a, c, xn) in
                enumerate(zip(self.states, self.actions, self.costs, self.next_states))]

    def __len__(self):
        return len(self.states)


@dataclass
class TrainingTrace:
    """Per-logged-episode diagnostics; rows align with ``episodes``."""

    episodes: np.ndarray
    nu_norms: np.ndarray
    q_norms: np.ndarray
    mean_actions: np.ndarray
    converged: bool = False
    n_episodes: int = 0
    extra: dict = field(default_factory=dict)


def _admissible_tables(mask: np.ndarray):
    counts = mask.sum(axis=2)
    if counts.min() == 0:
        n, x = np.argwhere(counts == 0)[0]
        raise ValueError(f"empty admissible action set at n={n}, x={x}")
    idx = np.zeros(mask.shape, dtype=np.int64)
    for n, x in np.ndindex(mask.shape[:2]):
        a = np.flatnonzero(mask[n, x])
        idx[n, x, :len(a)] = a
    return idx, counts.astype(np.int64)


class _EnvArgs:
    """Arrays the compiled loop needs from an environment, built once."""

    def __init__(self, env):
        self.kind = env.kind
        self.fp, self.cdf, self.tcost, self.tterm = env._numba_args()
        self.ip, self.init_cdf = env._initial_args()
        self.svals = np.ascontiguousarray(env.states.values)
        self.avals = np.ascontiguousarray(env.actions.values)
        self.adm_idx, self.adm_cnt = _admissible_tables(env.admissible_mask())

    def head(self):
        return (self.kind, self.fp, self.cdf, self.tcost, self.tterm, self.svals,
                self.avals, self.ip, self.init_cdf, self.adm_idx, self.adm_cnt)


def _check_mode(env, mode):
    if mode not in COMPATIBLE[env.interaction]:
        raise ValueError(
            f"mode {mode!r} cannot drive an environment interacting through {env.interaction!r}")


def epsilon_greedy(q_row, admissible, epsilon: float, rng: np.random.Generator) -> int:
    """Admissible argmin of ``q_row`` with probability ``1 - epsilon``, otherwise
    a uniform admissible action."""
    adm = np.asarray(admissible, dtype=np.int64)
    if adm.size == 0:
        raise ValueError("empty admissible action set")
    return int(_eps_greedy(np.asarray(q_row, dtype=float), adm, adm.size, float(epsilon), rng))


def update_distribution(state: LearnerState, n: int, x: int, a: int, rho: float) -> np.ndarray:
    """Move slice ``n`` of the distribution estimate towards the observation."""
    if not 0 < rho <= 1:
        raise ValueError(f"rate must lie in (0, 1], got {rho}")
    na = state.q.shape[2]
    _mix(state.dist[n], _flat_index(MODES[state.mode], x, a, na), rho)
    return state.dist[n]


def update_q(state: LearnerState, n: int, transition, rho: float, discount: float = 1.0,
             admissible_mask: np.ndarray | None = None) -> float:
    """Stochastic-approximation update of the single entry ``Q_n(x, a)``.

    ``transition`` is ``(x, a, cost, next_x)``. Returns the absolute change.
    """
    x, a, cost, xn = transition
    if admissible_mask is None:
        admissible_mask = np.ones(state.q.shape, dtype=bool)
    idx, cnt = _admissible_tables(admissible_mask)
    return float(_q_update(state.q, n, x, a, float(cost), xn, float(rho), float(discount),
                           idx, cnt, state.q.shape[0] - 1))


def run_episode(env, state: LearnerState, config: LearnerConfig,
                rng: np.random.Generator) -> EpisodeRecord:
    """Play one episode, updating ``state`` in place; ``state.episode`` is the
    index ``k`` used in the distribution rate and is incremented."""
    _check_mode(env, state.mode)
    args = _EnvArgs(env)
    n_times = env.n_steps + 1
    rec = EpisodeRecord(np.empty(n_times, np.int64), np.empty(n_times, np.int64),
                        np.empty(n_times), np.empty(n_times, np.int64),
                        np.empty(n_times), np.empty(n_times))
    _episode(*args.head(), state.q, state.dist, state.counts, MODES[state.mode],
             state.episode, config.omega_q, config.omega_nu, config.epsilon,
             config.discount, rng, rec.states, rec.actions, rec.costs, rec.next_states,
             rec.nu_norms, rec.q_norms)
    state.episode += 1
    return rec


def train(env, config: LearnerConfig, state: LearnerState | None = None,
          rng: np.random.Generator | None = None) -> tuple[LearnerState, TrainingTrace]:
    """Run episodes until the break rule holds on every time slice or the
    episode budget is spent. With ``early_stopping=False`` the whole budget is
    used and ``converged`` reports whether the last episode met the rule."""
    if state is None:
        state = LearnerState.for_env(env, config.mode)
    _check_mode(env, state.mode)
    if rng is None:
        rng = np.random.default_rng(config.seed)
    args = _EnvArgs(env)
    n_times = env.n_steps + 1
    budget = config.max_episodes
    n_slots = -(-budget // config.log_every) + 1 if budget else 0
    log_ep = np.zeros(n_slots, np.int64)
    log_nu = np.zeros((n_slots, n_times))
    log_q = np.zeros((n_slots, n_times))
    log_mean = np.zeros((n_slots, n_times))
    done, converged, n_log = _train(
        *args.head(), state.q, state.dist, state.counts, MODES[state.mode],
        state.episode, budget, config.omega_q, config.omega_nu, config.epsilon,
        config.discount, config.tol_nu, config.tol_q, bool(config.early_stopping),
        config.log_every, rng, log_ep, log_nu, log_q, log_mean)
    state.episode += done
    trace = TrainingTrace(log_ep[:n_log], log_nu[:n_log], log_q[:n_log], log_mean[:n_log],
                          bool(converged), int(done))
    return state, trace


def greedy_policy(state: LearnerState, admissible_mask: np.ndarray | None = None) -> np.ndarray:
    """Admissible argmin of every ``Q_n(x, .)``, lowest index on ties."""
    q = state.q
    if admissible_mask is None:
        admissible_mask = np.ones(q.shape, dtype=bool)
    return np.where(admissible_mask, q, np.inf).argmin(axis=2)


def mean_field_estimate(state: LearnerState, actions) -> np.ndarray:
    """Estimated ``E[alpha_{t_n}]`` for every time slice (NaN in state mode)."""
    out = np.empty(state.q.shape[0])
    _slice_means(state.dist, MODES[state.mode], np.asarray(actions.values), out)
    return out


class MeanFieldQLearner(BaseEstimator):
    """Two-timescale Q-learner with the scikit-learn estimator interface.

    ``omega_q < omega_nu`` gives the competitive (MFG) solution,
    ``omega_q > omega_nu`` the cooperative (MFC) one.

    Parameters
    ----------
    omega_q, omega_nu : float
        Exponents of the Q-table and distribution learning rates.
    epsilon : float
        Exploration probability of the epsilon-greedy behaviour policy.
    discount : float
        Factor applied to the bootstrapped value in the Q target.
    tol_nu, tol_q : float
        Break-rule tolerances on the per-slice update norms.
    max_episodes : int
        Episode budget.
    mode : {"action", "state", "joint"}
        Which population distribution is estimated.
    random_state : int, Generator or None
    log_every : int
        Stride of the recorded convergence trace.
    early_stopping : bool
        Stop at the first episode meeting the break rule. An episode that
        changes nothing (say, a zero-cost path through unexplored entries)
        meets it trivially, so fixed-budget runs switch this off.

    Attributes
    ----------
    q_ : ndarray of shape (n_steps + 1, n_states, n_actions)
    distribution_ : ndarray
    counts_ : ndarray
    policy_ : ndarray of shape (n_steps + 1, n_states)
        Greedy admissible action index.
    control_ : ndarray of shape (n_steps + 1, n_states)
        Greedy action value.
    mean_field_ : ndarray of shape (n_steps + 1,)
    trace_ : TrainingTrace
    converged_ : bool
    n_episodes_ : int
    """

    def __init__(self, omega_q=0.55, omega_nu=0.85, epsilon=0.15, discount=1.0,
                 tol_nu=1e-6, tol_q=1e-6, max_episodes=10_000, mode="action",
                 random_state=None, log_every=1, early_stopping=True):
        self.omega_q = omega_q
        self.omega_nu = omega_nu
        self.epsilon = epsilon
        self.discount = discount
        self.tol_nu = tol_nu
        self.tol_q = tol_q
        self.max_episodes = max_episodes
        self.mode = mode
        self.random_state = random_state
        self.log_every = log_every
        self.early_stopping = early_stopping

    def _config(self) -> LearnerConfig:
        seed = self.random_state if not isinstance(self.random_state, np.random.Generator) else None
        return LearnerConfig(self.omega_q, self.omega_nu, self.epsilon, self.discount,
                             self.tol_nu, self.tol_q, self.max_episodes, self.mode,
                             seed, self.log_every, self.early_stopping)

    def fit(self, env, y=None):
        config = self._config()
        rng = (self.random_state if isinstance(self.random_state, np.random.Generator)
               else np.random.default_rng(self.random_state))
        state, trace = train(env, config, rng=rng)
        mask = env.admissible_mask()
        self.env_ = env
        self.state_ = state
        self.q_ = state.q
        self.distribution_ = state.distribution
        self.counts_ = state.counts
        self.occupancy_ = state.occupancy
        self.policy_ = greedy_policy(state, mask)
        self.control_ = env.actions.values[self.policy_]
        self.mean_field_ = mean_field_estimate(state, env.actions)
        self.trace_ = trace
        self.converged_ = trace.converged
        self.n_episodes_ = trace.n_episodes
        return self

    def predict(self, X):
        """Greedy action index for each ``(time index, state index)`` row."""
        check_is_fitted(self, "q_")
        X = check_time_state_pairs(X, self.q_.shape[0], self.q_.shape[1])
        return self.policy_[X[:, 0], X[:, 1]]
