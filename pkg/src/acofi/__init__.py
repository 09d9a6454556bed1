"""Adaptive conformal safety filtering for a Dubins car."""

from .conformal import (AciState, StepRecord, coverage_bound, lower_bound, quantile,
                        record_and_update, score)
from .environment import (Action, DubinsState, DynamicsConfig, Scenario, Termination,
                          WorldConfig, dubins_step, failure_margin, pid_task_action, respawn,
                          terminating)
from .harness import ExperimentConfig, aggregate, run_episode, verify_theorems
from .policies import FilterConfig, acofi_episode_step, acofi_select, fixed_threshold_policy
from .safety_bellman import (GridSpec, QTable, bellman_residual, q_value, safest_action,
                             solve_safety_bellman, v_value)

__version__ = "0.1.0"

__all__ = [
    "AciState", "StepRecord", "coverage_bound", "lower_bound", "quantile", "record_and_update",
    "score", "Action", "DubinsState", "DynamicsConfig", "Scenario", "Termination", "WorldConfig",
    "dubins_step", "failure_margin", "pid_task_action", "respawn", "terminating",
    "ExperimentConfig", "aggregate", "run_episode", "verify_theorems", "FilterConfig",
    "acofi_episode_step", "acofi_select", "fixed_threshold_policy", "GridSpec", "QTable",
    "bellman_residual", "q_value", "safest_action", "solve_safety_bellman", "v_value",
]
