"""Sectioned key-value experiment configuration (INI syntax).

One file drives solving, simulation and verification. Every key has a
built-in default, so a file only needs the values it changes. Unknown
sections or keys are rejected.
"""

from __future__ import annotations

import configparser
import os

from .environment import Disc, DynamicsConfig, PidGains, Rect, Scenario, WorldConfig
from .errors import ConfigError
from .harness import ExperimentConfig, SolverConfig
from .policies import FilterConfig
from .safety_bellman import GridSpec

SCHEMA = {
    "world": ("bounds", "goal", "obstacles", "spawn_region", "margin_cap"),
    "dynamics": ("v", "omega"),
    "grid": ("nx", "ny", "ntheta"),
    "solver": ("gamma", "tol", "max_iters"),
    "filter": ("epsilon", "alpha", "lambda", "alpha_init"),
    "pid": ("kp", "ki", "kd", "deadband"),
    "experiment": ("scenarios", "policies", "n_runs", "step_cap", "goals_per_run", "base_seed",
                   "reset_aci_on_respawn", "jobs"),
}


def _floats(text: str, n: int | None, what: str) -> list[float]:
    try:
        vals = [float(x) for x in text.replace(",", " ").split()]
    except ValueError:
        raise ConfigError(f"{what}: expected numbers, got {text!r}") from None
    if n is not None and len(vals) != n:
        raise ConfigError(f"{what}: expected {n} numbers, got {len(vals)}")
    return vals


def _rect(text, what):
    return Rect(*_floats(text, 4, what))


def _disc(text, what):
    return Disc(*_floats(text, 3, what))


def _num(parser, section, key, conv, default):
    if not parser.has_option(section, key):
        return default
    raw = parser.get(section, key).strip()
    if raw == "":
        return default
    try:
        return conv(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from None


def _bool(raw: str) -> bool:
    low = raw.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(raw)


def parse_config(text: str, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    """Build and validate an :class:`ExperimentConfig`.

    ``overrides`` maps ``"section.key"`` to a raw value and wins over the file.
    """
    p = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    try:
        p.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax: {exc}".splitlines()[0]) from None
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if not p.has_section(section):
            p.add_section(section)
        p.set(section, key, str(value))
    for section in p.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key in p.options(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key [{section}] {key}")

    def get(section, key):
        return p.get(section, key).strip() if p.has_option(section, key) else ""

    w = WorldConfig()
    bounds = _rect(get("world", "bounds"), "bounds") if get("world", "bounds") else w.bounds
    goal = _disc(get("world", "goal"), "goal") if get("world", "goal") else w.goal
    if get("world", "obstacles"):
        obstacles = tuple(_disc(chunk, "obstacles") for chunk in get("world", "obstacles").split("|")
                          if chunk.strip())
    else:
        obstacles = w.obstacles
    spawn = (_rect(get("world", "spawn_region"), "spawn_region") if get("world", "spawn_region")
             else w.spawn_region)
    world = WorldConfig(bounds, obstacles, goal, spawn,
                        _num(p, "world", "margin_cap", float, w.margin_cap))

    dyn = DynamicsConfig(_num(p, "dynamics", "v", float, 0.02),
                         _num(p, "dynamics", "omega", float, 0.05))
    grid = GridSpec(_num(p, "grid", "nx", int, 101), _num(p, "grid", "ny", int, 101),
                    _num(p, "grid", "ntheta", int, 64), bounds)
    solver = SolverConfig(_num(p, "solver", "gamma", float, 0.98),
                          _num(p, "solver", "tol", float, 1e-6),
                          _num(p, "solver", "max_iters", int, 100_000))
    if not 0.0 < solver.gamma < 1.0:
        raise ConfigError(f"gamma must lie in (0, 1), got {solver.gamma}")
    if not solver.tol > 0 or solver.max_iters < 1:
        raise ConfigError("solver tol must be positive and max_iters at least 1")
    alpha = _num(p, "filter", "alpha", float, 0.2)
    filt = FilterConfig(epsilon=_num(p, "filter", "epsilon", float, 0.1), alpha_target=alpha,
                        lam=_num(p, "filter", "lambda", float, 0.05),
                        alpha_init=_num(p, "filter", "alpha_init", float, None),
                        gamma=solver.gamma)
    pid = PidGains(_num(p, "pid", "kp", float, 2.0), _num(p, "pid", "ki", float, 0.0),
                   _num(p, "pid", "kd", float, 0.0), _num(p, "pid", "deadband", float, None))

    scen = get("experiment", "scenarios")
    scenarios = tuple(Scenario.parse(s) for s in scen.split()) if scen else tuple(Scenario)
    pols = get("experiment", "policies")
    policies = tuple(pols.split()) if pols else ("task", "fixed", "acofi")
    return ExperimentConfig(
        world=world, dyn=dyn, grid=grid, solver=solver, filter=filt, pid=pid,
        scenarios=scenarios, policies=policies,
        n_runs=_num(p, "experiment", "n_runs", int, 16),
        step_cap=_num(p, "experiment", "step_cap", int, 1000),
        goals_per_run=_num(p, "experiment", "goals_per_run", int, 5),
        base_seed=_num(p, "experiment", "base_seed", int, 0),
        reset_aci_on_respawn=_num(p, "experiment", "reset_aci_on_respawn", _bool, False),
        jobs=_num(p, "experiment", "jobs", int, 1),
    )


def load_config(path: str | os.PathLike, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, overrides)


def _nums(*xs) -> str:
    return " ".join(repr(float(x)) for x in xs)


def dump_config(cfg: ExperimentConfig) -> str:
    """Resolved configuration in the same format :func:`parse_config` reads."""
    w = cfg.world
    b, s, g = w.bounds, w.spawn_region, w.goal
    f = cfg.filter
    lines = [
        "[world]",
        f"bounds = {_nums(b.xmin, b.ymin, b.xmax, b.ymax)}",
        f"goal = {_nums(g.cx, g.cy, g.r)}",
        "obstacles = " + " | ".join(_nums(o.cx, o.cy, o.r) for o in w.obstacles),
        f"spawn_region = {_nums(s.xmin, s.ymin, s.xmax, s.ymax)}",
        f"margin_cap = {w.margin_cap!r}",
        "",
        "[dynamics]",
        f"v = {cfg.dyn.v!r}",
        f"omega = {cfg.dyn.omega!r}",
        "",
        "[grid]",
        f"nx = {cfg.grid.nx}",
        f"ny = {cfg.grid.ny}",
        f"ntheta = {cfg.grid.ntheta}",
        "",
        "[solver]",
        f"gamma = {cfg.solver.gamma!r}",
        f"tol = {cfg.solver.tol!r}",
        f"max_iters = {cfg.solver.max_iters}",
        "",
        "[filter]",
        f"epsilon = {f.epsilon!r}",
        f"alpha = {f.alpha_target!r}",
        f"lambda = {f.lam!r}",
        f"alpha_init = {f.alpha_1!r}",
        "",
        "[pid]",
        f"kp = {cfg.pid.kp!r}",
        f"ki = {cfg.pid.ki!r}",
        f"kd = {cfg.pid.kd!r}",
        f"deadband = {'' if cfg.pid.deadband is None else repr(cfg.pid.deadband)}",
        "",
        "[experiment]",
        "scenarios = " + " ".join(sc.value for sc in cfg.scenarios),
        "policies = " + " ".join(cfg.policies),
        f"n_runs = {cfg.n_runs}",
        f"step_cap = {cfg.step_cap}",
        f"goals_per_run = {cfg.goals_per_run}",
        f"base_seed = {cfg.base_seed}",
        f"reset_aci_on_respawn = {'true' if cfg.reset_aci_on_respawn else 'false'}",
        f"jobs = {cfg.jobs}",
    ]
    return "\n".join(lines) + "\n"

