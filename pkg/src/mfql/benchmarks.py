"""Reference solutions.

* Trader liquidation with price impact: closed-form MFG and MFC solutions of
  the linear-quadratic problem, plus a Runge-Kutta integrator for their
  Riccati equations used as an independent check.
* HARA accumulation: MFG equilibrium through the fixed point of the
  mean-investment map, plus a brute-force grid search for the same point.
* Exhaustive enumeration of deterministic feedback policies, which gives the
  exact MFC optimum of a tiny finite model.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import cumulative_simpson

from .core import DiscreteSpace
from .deterministic import TabularModel, policy_cost
from .env import HaraParams, TraderParams


class SolverError(RuntimeError):
    pass


class SingularRiccatiError(SolverError):
    pass


class ParameterRegimeError(SolverError):
    pass


def _near_pole(den) -> bool:
    """Denominator close to zero on the grid, or changing sign between points."""
    den = np.atleast_1d(den)
    return bool(np.min(np.abs(den)) < 1e-10 or np.any(np.sign(den[:-1]) != np.sign(den[1:])))


class SearchSpaceTooLarge(SolverError):
    def __init__(self, cardinality: int, limit: int):
        super().__init__(f"{cardinality} policies exceeds the enumeration limit {limit}")
        self.cardinality = cardinality
        self.limit = limit


# -- trader ---------------------------------------------------------------------

def trader_eta(p: TraderParams, t) -> np.ndarray:
    """Slope of the individual feedback, shared by MFG and MFC."""
    t = np.asarray(t, dtype=float)
    k = p.c_alpha * math.sqrt(p.c_x / p.c_alpha)
    e = np.exp(2.0 * math.sqrt(p.c_x / p.c_alpha) * (p.horizon - t))
    return -k * (k - p.c_g - (k + p.c_g) * e) / (k - p.c_g + (k + p.c_g) * e)


def trader_eta_bar(p: TraderParams, t) -> np.ndarray:
    """Slope of the mean adjoint in the MFG."""
    t = np.asarray(t, dtype=float)
    B, C = 1.0 / p.c_alpha, p.c_x
    D = -p.gamma / (2.0 * p.c_alpha)
    R = D * D + B * C
    dp, dm = -D + math.sqrt(R), -D - math.sqrt(R)
    e = np.exp((dp - dm) * (p.horizon - t))
    num = -C * (e - 1.0) - p.c_g * (dp * e - dm)
    den = (dm * e - dp) - p.c_g * B * (e - 1.0)
    if _near_pole(den):
        raise SingularRiccatiError("MFG mean Riccati denominator vanishes on the grid")
    return num / den


def _mfc_roots(p: TraderParams):
    R = 1.0 / p.c_alpha
    a = 2.0 * p.gamma * R
    b = R * (p.gamma ** 2 * R - p.c_x)
    disc = a * a - 4.0 * b
    if disc < 0:
        raise ParameterRegimeError(f"complex roots in the MFC Riccati (discriminant {disc:.3g})")
    return R, (-a + math.sqrt(disc)) / 2.0, (-a - math.sqrt(disc)) / 2.0


def trader_phi_bar(p: TraderParams, t) -> np.ndarray:
    """Slope of the mean adjoint in the MFC."""
    t = np.asarray(t, dtype=float)
    R, c1, c2 = _mfc_roots(p)
    e = np.exp((p.horizon - t) * (c2 - c1))
    num = (c2 + R * p.c_g) * c1 * e - c2 * (c1 + R * p.c_g)
    den = (c2 + R * p.c_g) * e - (c1 + R * p.c_g)
    if _near_pole(den):
        raise ParameterRegimeError("MFC mean Riccati denominator vanishes on the grid")
    return -num / (R * den)


# Riccati right-hand sides, written as d/dt of the coefficient.
def eta_rhs(p: TraderParams):
    return lambda t, y: y * y / p.c_alpha - p.c_x


def eta_bar_rhs(p: TraderParams):
    return lambda t, y: y * y / p.c_alpha - p.gamma * y / p.c_alpha - p.c_x


def phi_bar_rhs(p: TraderParams):
    return lambda t, y: (y * y - 2.0 * p.gamma * y + p.gamma ** 2) / p.c_alpha - p.c_x


def rk4_backward(rhs, terminal: float, horizon: float, n_steps: int) -> tuple[np.ndarray, np.ndarray]:
    """Classical RK4 from ``t = horizon`` down to 0; returns ``(t, y)`` ascending."""
    h = -horizon / n_steps
    t = horizon
    y = terminal
    ys = [y]
    for _ in range(n_steps):
        k1 = rhs(t, y)
        k2 = rhs(t + h / 2, y + h * k1 / 2)
        k3 = rhs(t + h / 2, y + h * k2 / 2)
        k4 = rhs(t + h, y + h * k3)
        y = y + h * (k1 + 2 * k2 + 2 * k3 + k4) / 6
        t += h
        ys.append(y)
    return np.linspace(0.0, horizon, n_steps + 1), np.array(ys[::-1])


def _running_integral(func, t: np.ndarray, refine: int) -> np.ndarray:
    """``int_0^t func`` at each grid point via composite Simpson on a refined grid."""
    if len(t) < 2:
        return np.zeros(len(t))
    fine = np.concatenate([np.linspace(t[i], t[i + 1], refine + 1)[:-1]
                           for i in range(len(t) - 1)] + [t[-1:]])
    return cumulative_simpson(func(fine), x=fine, initial=0.0)[::refine]


@dataclass
class TraderSolution:
    """Closed-form LQ solution on a time grid.

    For the MFG ``slope_bar`` is the mean slope and ``offset`` is
    ``chi_t = (eta_bar - eta) x_bar``. For the MFC they are the corresponding
    ``phi_bar`` and ``psi_t``.
    """

    params: TraderParams
    regime: str
    t: np.ndarray
    eta: np.ndarray
    slope_bar: np.ndarray
    x_bar: np.ndarray
    offset: np.ndarray

    def control(self, i: int, x):
        """Optimal trading rate at grid time ``t[i]`` and inventory ``x``."""
        p = self.params
        shift = -p.gamma * self.x_bar[i] if self.regime == "mfc" else 0.0
        return -(self.eta[i] * np.asarray(x, dtype=float) + self.offset[i] + shift) / p.c_alpha

    def control_table(self, states) -> np.ndarray:
        states = np.asarray(states, dtype=float)
        return np.stack([self.control(i, states) for i in range(len(self.t))])

    def mean_control(self) -> np.ndarray:
        """``E[alpha_t]`` along the optimal mean inventory path."""
        return np.array([float(self.control(i, self.x_bar[i])) for i in range(len(self.t))])


def _mean_slope(params: TraderParams, closed_form):
    # without price impact the mean slope solves the individual Riccati equation;
    # sharing one formula keeps MFG and MFC outputs bit-identical there
    return trader_eta if params.gamma == 0 else closed_form


def trader_mfg_solve(params: TraderParams, x_bar0: float, t, refine: int = 10) -> TraderSolution:
    t = np.asarray(t, dtype=float)
    eta = trader_eta(params, t)
    slope = _mean_slope(params, trader_eta_bar)
    eta_bar = slope(params, t)
    integral = _running_integral(lambda s: slope(params, s), t, refine)
    x_bar = x_bar0 * np.exp(-integral / params.c_alpha)
    return TraderSolution(params, "mfg", t, eta, eta_bar, x_bar, (eta_bar - eta) * x_bar)


def trader_mfc_solve(params: TraderParams, x_bar0: float, t, refine: int = 10) -> TraderSolution:
    t = np.asarray(t, dtype=float)
    eta = trader_eta(params, t)
    slope = _mean_slope(params, trader_phi_bar)
    phi_bar = slope(params, t)
    integral = _running_integral(lambda s: slope(params, s), t, refine)
    x_bar = x_bar0 * np.exp(-(integral - params.gamma * t) / params.c_alpha)
    return TraderSolution(params, "mfc", t, eta, phi_bar, x_bar, (phi_bar - eta) * x_bar)


# -- HARA -------------------------------------------------------------------------

def hara_phi(p: HaraParams, z):
    big_phi = p.discount * p.production(z) ** p.gamma * p.mean_w_gamma
    return big_phi ** (1.0 / (p.gamma - 1.0))


def hara_psi(p: HaraParams, z):
    return p.production(z) * p.mean_w


def hara_lambda(p: HaraParams, z, m0: float) -> np.ndarray:
    """Mean-investment map; its fixed points are MFG equilibria."""
    z = np.asarray(z, dtype=float)
    T = z.shape[0]
    phi = hara_phi(p, z)
    psi = hara_psi(p, z)
    # tails[m] = phi_{T-1} * ... * phi_m, tails[T] = 1
    tails = [np.ones_like(phi[0])]
    for m in range(T - 1, -1, -1):
        tails.append(tails[-1] * phi[m])
    tails = tails[::-1]
    total = sum(tails)
    out = []
    growth = np.ones_like(phi[0]) * m0
    for k in range(T):
        numer = sum(tails[k + 1:])
        out.append(numer / total * growth)
        growth = growth * psi[k]
    return np.stack(out)


@dataclass
class HaraSolution:
    params: HaraParams
    z: np.ndarray
    D: np.ndarray
    converged: bool
    residual: float
    n_iter: int

    @property
    def horizon(self) -> int:
        return len(self.z)

    def control(self, t: int, x):
        x = np.asarray(x, dtype=float)
        if t >= self.horizon:
            return np.zeros_like(x)
        return x / (1.0 + hara_phi(self.params, self.z[t]) * self.D[t + 1])

    def control_table(self, states) -> np.ndarray:
        return np.stack([self.control(t, states) for t in range(self.horizon + 1)])

    def mean_control(self) -> np.ndarray:
        return np.append(self.z, 0.0)


def hara_value_coefficients(p: HaraParams, z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    D = np.ones(len(z) + 1)
    for t in range(len(z) - 1, -1, -1):
        f = hara_phi(p, z[t]) * D[t + 1]
        D[t] = f / (1.0 + f)
    return D


def hara_mfg_solve(params: HaraParams, m0: float, horizon: int, damping: float = 0.5,
                   tol: float = 1e-10, max_iter: int = 10_000) -> HaraSolution:
    """Damped Picard iteration ``z <- (1 - damping) z + damping * Lambda(z)``."""
    if not m0 > 0:
        raise ValueError("initial mean wealth must be positive")
    z = np.full(horizon, float(m0))
    residual = np.inf
    for it in range(1, max_iter + 1):
        lam = hara_lambda(params, z, m0)
        residual = float(np.max(np.abs(lam - z)))
        if residual < tol:
            break
        z = (1.0 - damping) * z + damping * lam
    else:
        it = max_iter
    residual = float(np.max(np.abs(hara_lambda(params, z, m0) - z)))
    return HaraSolution(params, z, hara_value_coefficients(params, z), residual < tol, residual, it)


def hara_grid_search(params: HaraParams, m0: float, lower: float = 0.0, upper: float = 2.0,
                     resolution: float = 1e-4, coarse: float = 1e-2, window: int = 5) -> np.ndarray:
    """Brute-force minimiser of ``|Lambda(z) - z|_inf`` over a square grid for
    horizon 2, searched coarse-to-fine down to ``resolution``."""
    lo = np.array([lower, lower])
    hi = np.array([upper, upper])
    step = coarse
    best = None
    while True:
        g0 = np.arange(lo[0], hi[0] + step / 2, step)
        g1 = np.arange(lo[1], hi[1] + step / 2, step)
        Z0, Z1 = np.meshgrid(g0, g1, indexing="ij")
        lam = hara_lambda(params, np.stack([Z0, Z1]), m0)
        res = np.maximum(np.abs(lam[0] - Z0), np.abs(lam[1] - Z1))
        i, j = np.unravel_index(np.argmin(res), res.shape)
        best = np.array([g0[i], g1[j]])
        if step <= resolution * (1 + 1e-9):
            return best
        lo = np.maximum(best - window * step, lower)
        hi = np.minimum(best + window * step, upper)
        step = step / 10


# -- policy enumeration -----------------------------------------------------------

def mfc_policy_enumeration_oracle(model: TabularModel, limit: int = 10 ** 7,
                                  return_all: bool = False):
    """Exact MFC optimum of a finite model by enumerating every deterministic
    feedback policy ``alpha(n, x)`` for ``n < N_T``.

    The terminal action does not affect the cost and is fixed to the lowest
    admissible index. Returns ``(cost, policy)`` (plus the list of all costs if
    ``return_all``); ties keep the lexicographically smallest policy.
    """
    mask = model.mask()
    nx = model.n_states
    choices = [np.flatnonzero(mask[n, x]) for n in range(model.n_steps) for x in range(nx)]
    cardinality = math.prod(len(c) for c in choices)
    if cardinality > limit:
        raise SearchSpaceTooLarge(cardinality, limit)
    terminal = np.where(mask[-1], np.arange(mask.shape[2]), mask.shape[2]).min(axis=1)
    best_cost, best_policy = np.inf, None
    costs = []
    for combo in itertools.product(*choices):
        policy = np.vstack([np.reshape(combo, (model.n_steps, nx)).astype(np.int64), terminal])
        cost = policy_cost(model, policy)
        if return_all:
            costs.append(cost)
        if cost < best_cost - 1e-12:
            best_cost, best_policy = cost, policy
    if return_all:
        return best_cost, best_policy, np.array(costs)
    return best_cost, best_policy


def project_table(table: np.ndarray, actions: DiscreteSpace) -> np.ndarray:
    """Snap continuous control values onto the action grid."""
    return np.vectorize(actions.project)(table)
