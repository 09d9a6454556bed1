"""Switching controllers: raw task policy, fixed-threshold filter and ACoFi.

All three share one closed-loop step (:func:`acofi_episode_step`) which
records the conformal bookkeeping; only the rule choosing the next action
differs. For the task and fixed policies the calibration is passive and
never influences control.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable

from .conformal import AciState, StepRecord, bellman_target, lower_bound
from .environment import (Action, DubinsState, DynamicsConfig, Scenario, WorldConfig,
                          dubins_step, failure_margin)
from .errors import ConfigError
from .safety_bellman import QTable, best_action

POLICIES = ("task", "fixed", "acofi")
TASK = "task"
SAFE = "safe"


@dataclass(frozen=True)
class FilterConfig:
    epsilon: float = 0.1
    alpha_target: float = 0.2
    lam: float = 0.05
    # None means start at alpha_target
    alpha_init: float | None = None
    gamma: float = 0.98

    def __post_init__(self):
        if not (math.isfinite(self.epsilon) and self.epsilon > 0):
            raise ConfigError(f"epsilon must be a positive finite number, got {self.epsilon}")
        if not (math.isfinite(self.lam) and self.lam > 0):
            raise ConfigError(f"lambda must be positive, got {self.lam}")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError(f"gamma must lie in (0, 1), got {self.gamma}")
        if not 0.0 <= self.alpha_target <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha_target}")

    @property
    def alpha_1(self) -> float:
        return self.alpha_target if self.alpha_init is None else self.alpha_init

    def new_aci(self) -> AciState:
        return AciState.start(self.alpha_target, self.lam, self.alpha_1)


def fixed_threshold_policy(state: DubinsState, qtable: QTable, task_action: Action,
                           epsilon: float) -> tuple[Action, str]:
    q = qtable.q_values(state)
    if q[task_action.index] >= epsilon:
        return task_action, TASK
    return best_action(q), SAFE


def adaptive_threshold(aci_quantile: float, l_next: float, cfg: FilterConfig) -> float:
    return aci_quantile + cfg.gamma * cfg.epsilon + (1.0 - cfg.gamma) * l_next


def acofi_select(state_next: DubinsState, qtable: QTable, aci_quantile: float, l_next: float,
                 cfg: FilterConfig, task_action: Action) -> tuple[Action, str]:
    q = qtable.q_values(state_next)
    if q[task_action.index] >= adaptive_threshold(aci_quantile, l_next, cfg):
        return task_action, TASK
    return best_action(q), SAFE


def select_action(policy: str, state: DubinsState, qtable: QTable, task_action: Action,
                  aci_quantile: float, l: float, cfg: FilterConfig) -> tuple[Action, str]:
    if policy == "task":
        return task_action, TASK
    if policy == "fixed":
        return fixed_threshold_policy(state, qtable, task_action, cfg.epsilon)
    if policy == "acofi":
        return acofi_select(state, qtable, aci_quantile, l, cfg, task_action)
    raise ConfigError(f"unknown policy {policy!r}")


@dataclass
class Bundle:
    """Everything carried from one loop iteration to the next."""

    t: int
    state: DubinsState
    action: Action
    policy_used: str
    l: float
    aci: AciState


def start_bundle(policy: str, state: DubinsState, qtable: QTable, world: WorldConfig,
                 cfg: FilterConfig, task_action: Action, aci: AciState | None = None,
                 t: int = 1) -> Bundle:
    """Initial loop state for ``policy`` at ``state``.

    With a fresh calibration (``aci`` is None) ACoFi opens with the safest
    action. With carried-over calibration it applies its usual test.
    """
    l = failure_margin(state, world)
    fresh = aci is None
    if fresh:
        aci = cfg.new_aci()
    if policy == "acofi" and fresh:
        action, used = best_action(qtable.q_values(state)), SAFE
    else:
        action, used = select_action(policy, state, qtable, task_action, aci.q_t, l, cfg)
    return Bundle(t, state, action, used, l, aci)


def acofi_episode_step(bundle: Bundle, qtable: QTable, world: WorldConfig, dyn: DynamicsConfig,
                       scenario: Scenario, noise: tuple[float, float], cfg: FilterConfig,
                       task_policy: Callable[[DubinsState], Action],
                       policy: str = "acofi") -> tuple[StepRecord, Bundle]:
    """One pass of the filtering loop.

    Steps the world with ``bundle.action``, forms the one-step target,
    scores it against the quantile in force, recalibrates, and picks the
    next action with ``policy``'s rule. ``bundle.aci`` is updated in place.
    """
    y, u, l = bundle.state, bundle.action, bundle.l
    aci = bundle.aci
    y_next = dubins_step(y, u, dyn, scenario, noise)
    q_here = float(qtable.q_values(y)[u.index])
    q_next_all = qtable.q_values(y_next)
    v_next = float(q_next_all.max())
    r = bellman_target(l, v_next, cfg.gamma)
    q_in_force = aci.q_t
    b = lower_bound(q_here, q_in_force, l, cfg.gamma)
    err = aci.update(q_here, r)
    record = StepRecord(bundle.t, y, u, bundle.policy_used, l, q_here, r, err,
                        q_in_force, b, v_next)

    l_next = failure_margin(y_next, world)
    task_action = task_policy(y_next)
    action, used = select_action(policy, y_next, qtable, task_action, aci.q_t, l_next, cfg)
    return record, replace(bundle, t=bundle.t + 1, state=y_next, action=action,
                           policy_used=used, l=l_next)
