"""Grids, distributions, learning-rate schedules and small helpers shared by
every other module."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

SIMPLEX_TOL = 1e-9


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_n = n * dt`` on ``[0, horizon]``."""

    horizon: float
    n_steps: int

    def __post_init__(self):
        if self.n_steps < 0:
            raise ValueError(f"n_steps must be >= 0, got {self.n_steps}")
        if not self.horizon > 0:
            raise ValueError(f"horizon must be > 0, got {self.horizon}")

    @property
    def dt(self) -> float:
        return self.horizon / max(self.n_steps, 1)

    @property
    def points(self) -> np.ndarray:
        pts = self.dt * np.arange(self.n_steps + 1)
        if self.n_steps:
            pts[-1] = self.horizon
        return pts


@dataclass(frozen=True)
class DiscreteSpace:
    """Truncated uniform grid standing in for a continuous axis.

    ``upper`` must be reachable from ``lower`` in an integer number of
    ``step`` increments (up to floating noise).
    """

    lower: float
    upper: float
    step: float
    values: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.step > 0:
            raise ValueError(f"step must be > 0, got {self.step}")
        if not self.upper > self.lower:
            raise ValueError("upper bound must exceed lower bound")
        ratio = (self.upper - self.lower) / self.step
        count = int(round(ratio))
        if abs(ratio - count) > 1e-9 * max(1.0, ratio):
            raise ValueError(
                f"[{self.lower}, {self.upper}] is not a whole number of steps of {self.step}")
        values = self.lower + self.step * np.arange(count + 1)
        values[-1] = self.upper
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return len(self.values)

    def index(self, value: float) -> int:
        """Index of the grid point nearest to ``value``; see :func:`project`."""
        # same arithmetic as the compiled projection in env.py
        unit = (self.values[-1] - self.values[0]) / (len(self.values) - 1)
        return project_index(self.values[0], unit, len(self.values), value)

    def project(self, value: float) -> float:
        return float(self.values[self.index(value)])


def project_index(lower: float, step: float, size: int, value: float) -> int:
    # exact midpoints go to the lower neighbour
    r = (value - lower) / step
    idx = math.ceil(r - 0.5)
    if idx < 0:
        return 0
    if idx > size - 1:
        return size - 1
    return idx


def project(space: DiscreteSpace, value: float) -> float:
    """Nearest grid point, clamping outside ``[lower, upper]``."""
    return space.project(value)


@dataclass(frozen=True)
class RateSchedule:
    """Exponents of the polynomially decaying learning rates.

    ``omega_q`` drives the Q-table rate and must lie in ``(1/2, 1]``;
    ``omega_nu`` drives the distribution rate. Values of ``omega_nu`` at or
    below 1/2 are allowed since the MFC regime is run with very slow decay.
    """

    omega_q: float
    omega_nu: float

    def __post_init__(self):
        if not 0.5 < self.omega_q <= 1.0:
            raise ValueError(f"omega_q must lie in (1/2, 1], got {self.omega_q}")
        if not 0.0 < self.omega_nu <= 1.0:
            raise ValueError(f"omega_nu must lie in (0, 1], got {self.omega_nu}")


def rho_q(schedule: RateSchedule, n_steps: int, visits: int) -> float:
    """Per-entry Q rate ``1 / (1 + N_T * visits) ** omega_q``."""
    if visits < 0:
        raise ValueError("visits must be >= 0")
    return 1.0 / (1.0 + n_steps * visits) ** schedule.omega_q


def rho_nu(schedule: RateSchedule, k: int) -> float:
    """Distribution rate ``1 / (1 + k) ** omega_nu`` for episode index ``k >= 0``."""
    if k < 0:
        raise ValueError("episode index must be >= 0")
    return 1.0 / (1.0 + k) ** schedule.omega_nu


def check_distribution(weights, tol: float = SIMPLEX_TOL, name: str = "distribution") -> np.ndarray:
    """Validate that ``weights`` is a probability vector/matrix and return it as an array."""
    w = np.asarray(weights, dtype=float)
    if w.size == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(w)):
        raise ValueError(f"{name} has non-finite entries")
    if w.min() < -tol:
        raise ValueError(f"{name} has negative entries (min {w.min():.3g})")
    total = w.sum()
    if abs(total - 1.0) > tol:
        raise ValueError(f"{name} sums to {total!r}, not 1")
    return w


def uniform_flow(n_times: int, *shape: int) -> np.ndarray:
    """``n_times`` uniform slices over a grid of the given shape."""
    size = int(np.prod(shape))
    return np.full((n_times, *shape), 1.0 / size)


def marginals(nu) -> tuple[np.ndarray, np.ndarray]:
    """State and action marginals ``(mu, theta)`` of a state-action distribution."""
    nu = check_distribution(nu, name="nu")
    if nu.ndim != 2:
        raise ValueError(f"nu must be 2-D (states x actions), got shape {nu.shape}")
    return nu.sum(axis=1), nu.sum(axis=0)


def mean_action(theta, space: DiscreteSpace) -> float:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != space.values.shape:
        raise ValueError(
            f"theta has shape {theta.shape} but the action grid has {len(space)} points")
    return float(theta @ space.values)


def onehot_mix(weights: np.ndarray, index, rho: float) -> np.ndarray:
    """In-place ``w <- w + rho * (delta_index - w)`` followed by renormalisation."""
    weights *= 1.0 - rho
    weights[index] += rho
    weights /= weights.sum()
    return weights
