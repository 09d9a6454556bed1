"""Adaptive conformal calibration of the safety Q-function.

The score of a step is the one-sided over-estimate max{Q - R, 0}. The
threshold q_t is an order statistic of all past scores, at a level steered
by the online miscoverage update alpha_{t+1} = alpha_t + lam * (alpha - err_t).
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field

import numpy as np

from .environment import Action, DubinsState


def score(q_val: float, target: float) -> float:
    return max(q_val - target, 0.0)


def quantile(scores, p: float) -> float:
    """Order-statistic quantile of a sorted multiset.

    0 for ``p <= 0``, ``+inf`` for ``p > n/(n+1)``, otherwise the
    ``ceil(p * (n + 1))``-th smallest element (1-based).
    """
    n = len(scores)
    if p <= 0.0:
        return 0.0
    if p > n / (n + 1):
        return math.inf
    return scores[math.ceil(p * (n + 1)) - 1]


@dataclass
class AciState:
    alpha_target: float
    lam: float
    alpha_t: float
    scores: list[float] = field(default_factory=list)
    q_t: float = 0.0
    t: int = 1

    @classmethod
    def start(cls, alpha_target: float, lam: float, alpha_init: float | None = None) -> AciState:
        if not lam > 0:
            raise ValueError(f"learning rate must be positive, got {lam}")
        a1 = alpha_target if alpha_init is None else alpha_init
        return cls(alpha_target, lam, a1)

    def update(self, q_val: float, target: float) -> int:
        """Score one step against the threshold in force, then recalibrate.

        Returns err_t, computed with the pre-update ``q_t``.
        """
        s = float(score(q_val, target))
        err = int(s > self.q_t)
        self.alpha_t += self.lam * (self.alpha_target - err)
        bisect.insort(self.scores, s)
        self.q_t = quantile(self.scores, 1.0 - self.alpha_t)
        self.t += 1
        return err

    def copy(self) -> AciState:
        return AciState(self.alpha_target, self.lam, self.alpha_t, list(self.scores), self.q_t, self.t)


def record_and_update(aci: AciState, q_val: float, target: float) -> tuple[int, AciState]:
    """Functional form of :meth:`AciState.update`; ``aci`` is left untouched."""
    nxt = aci.copy()
    err = nxt.update(q_val, target)
    return err, nxt


def lower_bound(q_val: float, quantile_val: float, l_t: float, gamma: float) -> float:
    """Certified lower bound on the next state's value: (Q - q - (1 - gamma) l) / gamma."""
    if math.isinf(quantile_val) and quantile_val > 0:
        return -math.inf
    return (q_val - quantile_val - (1.0 - gamma) * l_t) / gamma


def coverage_bound(alpha_1: float, lam: float, T: int) -> float:
    """Deterministic bound on |mean(err_1..err_T) - alpha|."""
    if T < 1 or not lam > 0:
        raise ValueError("need T >= 1 and lam > 0")
    return (max(alpha_1, 1.0 - alpha_1) + lam) / (T * lam)


def bellman_target(l_t: float, v_next: float, gamma: float) -> float:
    return (1.0 - gamma) * l_t + gamma * min(l_t, v_next)


@dataclass(frozen=True)
class StepRecord:
    t: int
    state: DubinsState
    action: Action
    policy_used: str  # "task" or "safe"
    l_t: float
    q_theta: float
    r_t: float
    err_t: int
    quantile_t: float
    b_t: float
    v_next: float

    @property
    def score(self) -> float:
        return score(self.q_theta, self.r_t)


def prefix_error_rates(errs) -> np.ndarray:
    errs = np.asarray(errs, float)
    return np.cumsum(errs) / np.arange(1, len(errs) + 1)
