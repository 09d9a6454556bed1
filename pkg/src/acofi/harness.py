"""Seeded experiment driver, metrics and theorem verification.

A run keeps respawning the car until it reaches the goal ``goals_per_run``
times or hits the step cap. Run i of an experiment uses seed
``base_seed + i``; every policy and scenario sees that seed's disturbance
stream, indexed by step number.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields

import numpy as np

from .conformal import StepRecord, bellman_target, score
from .environment import (Action, DubinsState, DynamicsConfig, PidController, PidGains,
                          Scenario, Termination, WorldConfig, disturbance_stream, respawn,
                          spawn_stream, step_noise, terminating)
from .errors import ConfigError, EmptyInput, MalformedTrace
from .policies import POLICIES, SAFE, FilterConfig, acofi_episode_step, start_bundle
from .safety_bellman import GridSpec, QTable

log = logging.getLogger(__name__)

TRACE_COLUMNS = ("t", "px", "py", "theta", "action", "policy", "l", "Q", "R", "err", "q", "B",
                 "Vnext")


@dataclass(frozen=True)
class SolverConfig:
    gamma: float = 0.98
    tol: float = 1e-6
    max_iters: int = 100_000


@dataclass(frozen=True)
class ExperimentConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    dyn: DynamicsConfig = field(default_factory=DynamicsConfig)
    grid: GridSpec = field(default_factory=GridSpec)
    solver: SolverConfig = field(default_factory=SolverConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    pid: PidGains = field(default_factory=PidGains)
    scenarios: tuple[Scenario, ...] = tuple(Scenario)
    policies: tuple[str, ...] = POLICIES
    n_runs: int = 16
    step_cap: int = 1000
    goals_per_run: int = 5
    base_seed: int = 0
    reset_aci_on_respawn: bool = False
    jobs: int = 1

    def __post_init__(self):
        if self.step_cap < 1 or self.n_runs < 1 or self.goals_per_run < 1:
            raise ConfigError("step_cap, n_runs and goals_per_run must be at least 1")
        if self.jobs < 1:
            raise ConfigError("jobs must be at least 1")
        if self.base_seed < 0:
            raise ConfigError("base_seed must be non-negative")
        for p in self.policies:
            if p not in POLICIES:
                raise ConfigError(f"unknown policy {p!r}")
        if self.filter.gamma != self.solver.gamma:
            raise ConfigError("filter gamma must equal solver gamma")

    def seeds(self) -> list[int]:
        return [self.base_seed + i for i in range(self.n_runs)]


@dataclass(frozen=True)
class RunMetrics:
    goal_reaches: int
    success: bool
    min_v: float
    unsafe_steps: int
    safe_policy_steps: int
    total_steps: int
    penetrations: int = 0
    wall_hits: int = 0


@dataclass
class EpisodeResult:
    policy: str
    scenario: Scenario
    seed: int
    trace: list[StepRecord]
    metrics: RunMetrics
    draws: list | None = None


def run_episode(policy: str, cfg: ExperimentConfig, seed: int, qtable: QTable,
                scenario: Scenario = Scenario.ID, debug_draws: bool = False) -> EpisodeResult:
    world, dyn, fcfg = cfg.world, cfg.dyn, cfg.filter
    draws = [] if debug_draws else None
    noise_stream = disturbance_stream(seed, log=draws)
    spawns = spawn_stream(seed)
    pid = PidController(world, dyn, cfg.pid)
    n_spawn = 0
    y = respawn(spawns, n_spawn, world)
    bundle = start_bundle(policy, y, qtable, world, fcfg, pid(y))
    trace: list[StepRecord] = []
    goals = walls = 0
    for step in range(cfg.step_cap):
        rec, bundle = acofi_episode_step(bundle, qtable, world, dyn, scenario,
                                         step_noise(noise_stream, step), fcfg, pid, policy)
        trace.append(rec)
        outcome = terminating(bundle.state, world)
        if outcome is Termination.NONE:
            continue
        if outcome is Termination.GOAL_REACHED:
            goals += 1
            if goals >= cfg.goals_per_run:
                break
        else:
            walls += 1
        n_spawn += 1
        y = respawn(spawns, n_spawn, world)
        pid.reset()
        if cfg.reset_aci_on_respawn:
            # step numbering restarts with the calibration so traces stay self-describing
            bundle = start_bundle(policy, y, qtable, world, fcfg, pid(y))
        else:
            bundle = start_bundle(policy, y, qtable, world, fcfg, pid(y), aci=bundle.aci,
                                  t=bundle.t)
    metrics = metrics_from_trace(trace, fcfg.epsilon, goals, cfg.goals_per_run, walls)
    return EpisodeResult(policy, scenario, seed, trace, metrics, draws)


def metrics_from_trace(trace: list[StepRecord], epsilon: float, goal_reaches: int = 0,
                       goals_per_run: int = 5, wall_hits: int = 0) -> RunMetrics:
    """Safety metrics over the states reached by each step (``Vnext``)."""
    v = [r.v_next for r in trace]
    return RunMetrics(
        goal_reaches=goal_reaches,
        success=goal_reaches >= goals_per_run,
        min_v=min(v) if v else math.nan,
        unsafe_steps=sum(1 for x in v if x <= epsilon),
        safe_policy_steps=sum(1 for r in trace if r.policy_used == SAFE),
        total_steps=len(trace),
        penetrations=sum(1 for r in trace if r.l_t < 0),
        wall_hits=wall_hits,
    )


SUMMARY_COLUMNS = ("policy", "scenario", "n_runs", "success_rate", "goal_reaches", "min_v",
                   "unsafe_steps", "safe_policy_steps", "total_steps", "p_unsafe", "p_safe",
                   "penetrations", "wall_hits")


def aggregate(metrics: list[RunMetrics]) -> dict:
    """Means over runs; ``p_unsafe`` and ``p_safe`` are written as "mean count/mean total"."""
    if not metrics:
        raise EmptyInput("cannot aggregate zero runs")

    def mean(attr):
        return float(np.mean([float(getattr(m, attr)) for m in metrics]))

    out = {k: mean(k) for k in ("goal_reaches", "min_v", "unsafe_steps", "safe_policy_steps",
                                "total_steps", "penetrations", "wall_hits")}
    out["n_runs"] = len(metrics)
    out["success_rate"] = mean("success")
    out["p_unsafe"] = f"{out['unsafe_steps']:.1f}/{out['total_steps']:.1f}"
    out["p_safe"] = f"{out['safe_policy_steps']:.1f}/{out['total_steps']:.1f}"
    return out


# --- theorem checks ------------------------------------------------------

@dataclass
class VerificationReport:
    thm1_ok: bool
    thm1_upper_ok: bool
    thm2_ok: bool
    pointwise_ok: bool
    worst_slack: float
    thm1_worst_slack: float
    thm2_worst_slack: float
    pointwise_violations: int
    steps: int

    @property
    def ok(self) -> bool:
        return self.thm1_ok and self.thm2_ok and self.pointwise_ok

    def lines(self) -> list[str]:
        return [f"{f.name} = {_fmt(getattr(self, f.name))}" for f in fields(self)]


def _validate_trace(trace: list[StepRecord], gamma: float) -> None:
    if not trace:
        raise MalformedTrace("empty trace")
    if trace[0].t != 1:
        raise MalformedTrace("trace must start at t = 1")
    for i, r in enumerate(trace):
        if i and r.t not in (1, trace[i - 1].t + 1):
            raise MalformedTrace(f"row {i}: step counter {r.t} out of sequence")
        if r.err_t not in (0, 1):
            raise MalformedTrace(f"row {i}: err must be 0 or 1, got {r.err_t}")
        if r.policy_used not in ("task", "safe"):
            raise MalformedTrace(f"row {i}: unknown policy tag {r.policy_used!r}")
        if r.r_t != bellman_target(r.l_t, r.v_next, gamma):
            raise MalformedTrace(f"row {i}: R is not the target of (l, Vnext)")
        if r.err_t != int(score(r.q_theta, r.r_t) > r.quantile_t):
            raise MalformedTrace(f"row {i}: err disagrees with score and q")


def verify_theorems(trace: list[StepRecord], cfg: FilterConfig) -> VerificationReport:
    """Check the long-run coverage guarantees on every prefix of an ACoFi trace.

    Error rate: |mean err - alpha| <= bound(T). Lower bound:
    mean 1[Vnext >= B] >= 1 - alpha - bound(T). Also checks the per-step
    inequality 1[Vnext >= B] >= 1 - err that the second follows from. A row with
    t = 1 marks a calibration restart; prefixes are counted from there.
    """
    _validate_trace(trace, cfg.gamma)
    segments = [i for i, r in enumerate(trace) if r.t == 1]
    bounds = segments[1:] + [len(trace)]
    alpha = cfg.alpha_target
    thm1 = thm2 = math.inf
    thm1_upper_ok = True
    violations = 0
    for lo, hi in zip(segments, bounds):
        part = trace[lo:hi]
        err = np.array([r.err_t for r in part], float)
        covered = np.array([r.v_next >= r.b_t for r in part], float)
        violations += int(np.sum(covered < 1.0 - err))
        T = np.arange(1, len(part) + 1)
        bound = (max(cfg.alpha_1, 1.0 - cfg.alpha_1) + cfg.lam) / (T * cfg.lam)
        dev = np.cumsum(err) / T - alpha
        thm1 = min(thm1, float(np.min(bound - np.abs(dev))))
        thm1_upper_ok &= bool(np.all(dev <= bound))
        thm2 = min(thm2, float(np.min(np.cumsum(covered) / T - (1.0 - alpha - bound))))
    return VerificationReport(
        thm1_ok=thm1 >= 0.0,
        thm1_upper_ok=thm1_upper_ok,
        thm2_ok=thm2 >= 0.0,
        pointwise_ok=violations == 0,
        worst_slack=min(thm1, thm2),
        thm1_worst_slack=thm1,
        thm2_worst_slack=thm2,
        pointwise_violations=violations,
        steps=len(trace),
    )


# --- trace files ---------------------------------------------------------

def _fmt(x) -> str:
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, float):
        return repr(x)
    return str(x)


def trace_to_csv(trace: list[StepRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for r in trace:
        w.writerow([r.t, repr(r.state.px), repr(r.state.py), repr(r.state.theta), int(r.action),
                    r.policy_used, repr(r.l_t), repr(r.q_theta), repr(r.r_t), r.err_t,
                    repr(r.quantile_t), repr(r.b_t), repr(r.v_next)])
    return buf.getvalue()


def read_trace(path: str | os.PathLike) -> list[StepRecord]:
    with open(path, newline="") as fh:
        return parse_trace(fh.read(), str(path))


def parse_trace(text: str, name: str = "<trace>") -> list[StepRecord]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != TRACE_COLUMNS:
        raise MalformedTrace(f"{name}: header must be {','.join(TRACE_COLUMNS)}")
    out = []
    for n, row in enumerate(rows[1:], start=2):
        if len(row) != len(TRACE_COLUMNS):
            raise MalformedTrace(f"{name}:{n}: expected {len(TRACE_COLUMNS)} fields")
        try:
            t, px, py, th, a, pol, l, q, r, err, qt, b, vn = row
            out.append(StepRecord(int(t), DubinsState(float(px), float(py), float(th)),
                                  Action(int(a)), pol, float(l), float(q), float(r), int(err),
                                  float(qt), float(b), float(vn)))
        except ValueError as exc:
            raise MalformedTrace(f"{name}:{n}: {exc}") from None
    return out


# --- experiment matrix ---------------------------------------------------

_WORKER_TABLE: QTable | None = None


def _init_worker(qtable: QTable) -> None:
    global _WORKER_TABLE
    _WORKER_TABLE = qtable


def _run_job(job):
    policy, scenario, seed, cfg = job
    return run_episode(policy, cfg, seed, _WORKER_TABLE, scenario)


def run_matrix(cfg: ExperimentConfig, qtable: QTable) -> list[EpisodeResult]:
    """Every (policy, scenario, seed) run, in that nesting order."""
    jobs = [(p, s, seed, cfg) for p in cfg.policies for s in cfg.scenarios for seed in cfg.seeds()]
    if cfg.jobs == 1:
        _init_worker(qtable)
        return [_run_job(j) for j in jobs]
    with ProcessPoolExecutor(cfg.jobs, initializer=_init_worker, initargs=(qtable,)) as ex:
        return list(ex.map(_run_job, jobs, chunksize=4))


def summarize(results: list[EpisodeResult]) -> list[dict]:
    groups: dict[tuple[str, Scenario], list[RunMetrics]] = {}
    for res in results:
        groups.setdefault((res.policy, res.scenario), []).append(res.metrics)
    rows = []
    for (policy, scenario), ms in groups.items():
        row = aggregate(ms)
        row.update(policy=policy, scenario=scenario.value)
        rows.append(row)
    return rows


def summary_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for row in rows:
        w.writerow([_fmt(row[c]) for c in SUMMARY_COLUMNS])
    return buf.getvalue()


RUN_COLUMNS = ("policy", "scenario", "seed") + tuple(f.name for f in fields(RunMetrics))


def runs_to_csv(results: list[EpisodeResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RUN_COLUMNS)
    for res in results:
        m = res.metrics
        w.writerow([res.policy, res.scenario.value, res.seed]
                   + [_fmt(getattr(m, f.name)) for f in fields(RunMetrics)])
    return buf.getvalue()


def trace_filename(res: EpisodeResult) -> str:
    return f"trace_{res.policy}_{res.scenario.value}_seed{res.seed}.csv"
