"""Two-timescale Q-learning for finite-horizon mean field games and controls."""

from .core import (DiscreteSpace, RateSchedule, TimeGrid, check_distribution, marginals,
                   mean_action, project, rho_nu, rho_q)
from .env import (HaraEnvironment, HaraParams, TabularEnvironment, TraderEnvironment,
                  TraderParams)
from .deterministic import (DampedFixedPoint, InvalidModelError, TabularModel, backward_bellman,
                            damped_iteration, forward_population, policy_cost)
from .qlearning import (LearnerConfig, LearnerState, MeanFieldQLearner, greedy_policy,
                        run_episode, train)
from .benchmarks import (hara_grid_search, hara_mfg_solve, mfc_policy_enumeration_oracle,
                         trader_mfc_solve, trader_mfg_solve)

__version__ = "0.1.0"

__all__ = [
    "DiscreteSpace", "RateSchedule", "TimeGrid", "check_distribution", "marginals",
    "mean_action", "project", "rho_nu", "rho_q",
    "HaraEnvironment", "HaraParams", "TabularEnvironment", "TraderEnvironment", "TraderParams",
    "DampedFixedPoint", "InvalidModelError", "TabularModel", "backward_bellman",
    "damped_iteration", "forward_population", "policy_cost",
    "LearnerConfig", "LearnerState", "MeanFieldQLearner", "greedy_policy", "run_episode", "train",
    "hara_grid_search", "hara_mfg_solve", "mfc_policy_enumeration_oracle",
    "trader_mfc_solve", "trader_mfg_solve",
]
