"""Model-based operators: exact backward Bellman sweep, forward population
propagation and the damped two-timescale iteration between them.

Used both as a solver in its own right and as the reference the model-free
learner is checked against.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .core import RateSchedule, check_distribution, uniform_flow
from ._validation import check_time_state_pairs


class InvalidModelError(ValueError):
    pass


@dataclass
class TabularModel:
    """Finite mean-field model.

    ``kernel(n, nu)`` returns ``p[x, a, x']``, ``cost(n, nu)`` returns
    ``f[x, a]`` and ``terminal(nu)`` returns ``g[x]``, where ``nu`` is the
    joint state-action distribution at that time. ``admissible`` is an
    optional boolean mask ``[n, x, a]``.
    """

    kernel: Callable
    cost: Callable
    terminal: Callable
    mu0: np.ndarray
    n_steps: int
    n_actions: int
    admissible: np.ndarray | None = None

    def __post_init__(self):
        self.mu0 = check_distribution(self.mu0, name="mu0")
        if self.n_steps < 0:
            raise InvalidModelError("n_steps must be >= 0")

    @property
    def n_states(self) -> int:
        return len(self.mu0)

    def mask(self) -> np.ndarray:
        if self.admissible is None:
            return np.ones((self.n_steps + 1, self.n_states, self.n_actions), dtype=bool)
        return np.asarray(self.admissible, dtype=bool)

    def checked_kernel(self, n, nu) -> np.ndarray:
        ker = np.asarray(self.kernel(n, nu), dtype=float)
        if ker.min() < -1e-12 or np.abs(ker.sum(axis=-1) - 1.0).max() > 1e-9:
            raise InvalidModelError(f"transition kernel at n={n} is not stochastic")
        return ker


def masked_min(q: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return np.where(mask, q, np.inf).min(axis=-1)


def greedy(q: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Admissible argmin over the last axis; ties go to the lowest index."""
    return np.where(mask, q, np.inf).argmin(axis=-1)


def backward_bellman(model: TabularModel, nu_flow) -> np.ndarray:
    """Optimal Q-tensor ``[n, x, a]`` of one player facing the flow ``nu_flow``."""
    nu_flow = np.asarray(nu_flow, dtype=float)
    n_steps = model.n_steps
    nx, na = nu_flow.shape[1:]
    mask = model.mask()
    q = np.empty((n_steps + 1, nx, na))
    q[n_steps] = np.asarray(model.terminal(nu_flow[n_steps]))[:, None]
    for n in range(n_steps - 1, -1, -1):
        ker = model.checked_kernel(n, nu_flow[n])
        v_next = masked_min(q[n + 1], mask[n + 1])
        q[n] = model.cost(n, nu_flow[n]) + ker @ v_next
    return q


def forward_population(model: TabularModel, q) -> np.ndarray:
    """Distribution flow generated when everybody plays the greedy control of ``q``."""
    q = np.asarray(q, dtype=float)
    return propagate(model, greedy(q, model.mask()))


def propagate(model: TabularModel, policy) -> np.ndarray:
    """Exact state-action flow under a deterministic feedback ``policy[n, x]``."""
    policy = np.asarray(policy)
    nx = model.n_states
    rows = np.arange(nx)
    flow = np.zeros((model.n_steps + 1, nx, model.n_actions))
    mu = model.mu0.copy()
    for n in range(model.n_steps + 1):
        flow[n, rows, policy[n]] = mu
        if n < model.n_steps:
            ker = model.checked_kernel(n, flow[n])
            mu = mu @ ker[rows, policy[n]]
    return flow


def policy_cost(model: TabularModel, policy) -> float:
    """Social cost of ``policy`` when the whole population uses it."""
    policy = np.asarray(policy)
    flow = propagate(model, policy)
    rows = np.arange(model.n_states)
    total = 0.0
    for n in range(model.n_steps):
        f = model.cost(n, flow[n])
        total += float(flow[n].sum(axis=1) @ f[rows, policy[n]])
    total += float(flow[-1].sum(axis=1) @ model.terminal(flow[-1]))
    return total


@dataclass
class FixedPointResult:
    q: np.ndarray
    flow: np.ndarray
    policy: np.ndarray
    trace: np.ndarray  # rows (iteration, q_residual, nu_residual)
    converged: bool


def _slice_l1(d: np.ndarray) -> float:
    return float(np.abs(d).reshape(d.shape[0], -1).sum(axis=1).max())


def damped_iteration(model: TabularModel, schedule: RateSchedule | tuple | None = None,
                     max_iters: int = 1000, tol: float = 1e-8) -> FixedPointResult:
    """Two-timescale damped iteration between the Bellman and population operators.

    ``schedule`` is a :class:`RateSchedule` (rates ``1/(1+k)**omega``), a pair
    of constant rates ``(rho_q, rho_nu)``, or ``None`` for the undamped
    alternation. The recorded residuals are the operator gaps
    ``max_n |T(nu_k) - Q_k|_1`` and ``max_n |P(Q_{k+1}) - nu_k|_1``; the iteration
    stops once both fall below ``tol``. Without convergence the iterate with
    the smallest residual is returned.
    """
    if schedule is None:
        rates = lambda k: (1.0, 1.0)  # noqa: E731
    elif isinstance(schedule, RateSchedule):
        rates = lambda k: (1.0 / (1.0 + k) ** schedule.omega_q,  # noqa: E731
                           1.0 / (1.0 + k) ** schedule.omega_nu)
    else:
        rq, rn = map(float, schedule)
        rates = lambda k: (rq, rn)  # noqa: E731

    mask = model.mask()
    nu = uniform_flow(model.n_steps + 1, model.n_states, model.n_actions)
    q = np.zeros_like(nu)
    trace = []
    best = (np.inf, q, nu)
    for k in range(max_iters):
        rq, rn = rates(k)
        t_q = backward_bellman(model, nu)
        q_res = _slice_l1(np.where(mask, t_q - q, 0.0))
        q_next = q + rq * (t_q - q)
        p_nu = forward_population(model, q_next)
        nu_res = _slice_l1(p_nu - nu)
        trace.append((k, q_res, nu_res))
        if max(q_res, nu_res) < best[0]:
            best = (max(q_res, nu_res), q, nu)
        if q_res < tol and nu_res < tol:
            return FixedPointResult(q, nu, greedy(q, mask), np.array(trace), True)
        q = q_next
        nu = nu + rn * (p_nu - nu)
        nu /= nu.sum(axis=(1, 2), keepdims=True)
    _, q, nu = best
    return FixedPointResult(q, nu, greedy(q, mask), np.array(trace).reshape(-1, 3), False)


class DampedFixedPoint(BaseEstimator):
    """Estimator wrapper around :func:`damped_iteration`.

    ``fit`` accepts a :class:`TabularModel` or an environment exposing
    ``to_model()``; ``predict`` maps ``(time index, state index)`` rows to the
    greedy action index.
    """

    def __init__(self, omega_q=None, omega_nu=None, max_iter=1000, tol=1e-8):
        self.omega_q = omega_q
        self.omega_nu = omega_nu
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, model, y=None):
        if hasattr(model, "to_model"):
            model = model.to_model()
        schedule = None
        if self.omega_q is not None or self.omega_nu is not None:
            schedule = RateSchedule(self.omega_q, self.omega_nu)
        res = damped_iteration(model, schedule, self.max_iter, self.tol)
        self.model_ = model
        self.q_ = res.q
        self.flow_ = res.flow
        self.trace_ = res.trace
        self.converged_ = res.converged
        self.n_iter_ = len(res.trace)
        self.policy_ = res.policy
        return self

    def predict(self, X):
        check_is_fitted(self, "q_")
        X = check_time_state_pairs(X, self.q_.shape[0], self.q_.shape[1])
        return self.policy_[X[:, 0], X[:, 1]]
