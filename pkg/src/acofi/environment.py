"""Dubins-car world: kinematics, obstacle margin, termination and spawning.

All randomness enters through :class:`CounterStream`, a counter-based
generator addressed by ``(seed, stream, index)``. A step's disturbance is
read at the step index rather than drawn sequentially, so two controllers
driven with the same seed see the same perturbations no matter how their
trajectories diverge.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

TWO_PI = 2.0 * math.pi

# Philox counter words 2 and 3 select the stream and block; word 0 is
# advanced by the generator itself and never reaches word 2 within a block.
_BLOCK = 256
DISTURBANCE_STREAM = 0
SPAWN_STREAM = 1


def wrap_angle(theta: float) -> float:
    """Wrap into [0, 2*pi)."""
    w = math.fmod(theta, TWO_PI)
    if w < 0.0:
        w += TWO_PI
    # fmod of a tiny negative number can round up to exactly 2*pi
    if w >= TWO_PI:
        w = 0.0
    return w


def wrap_to_pi(angle: float) -> float:
    """Wrap into (-pi, pi]."""
    a = wrap_angle(angle)
    return a - TWO_PI if a > math.pi else a


class Action(enum.IntEnum):
    """Steering command as a sign on the configured turn rate."""

    CW = -1
    STRAIGHT = 0
    CCW = 1

    @property
    def index(self) -> int:
        """Slot in Q-value arrays (ordered -w, 0, +w)."""
        return int(self) + 1

    def omega(self, dyn: DynamicsConfig) -> float:
        return int(self) * dyn.omega

    @classmethod
    def from_index(cls, i: int) -> Action:
        return cls(i - 1)


ACTIONS = (Action.CW, Action.STRAIGHT, Action.CCW)


class Scenario(enum.Enum):
    ID = "id"
    VAR_SPEED = "varspeed"
    VAR_STEER = "varsteer"
    VAR_SPEED_AND_STEER = "varspeedsteer"

    @property
    def perturbs_speed(self) -> bool:
        return self in (Scenario.VAR_SPEED, Scenario.VAR_SPEED_AND_STEER)

    @property
    def perturbs_steer(self) -> bool:
        return self in (Scenario.VAR_STEER, Scenario.VAR_SPEED_AND_STEER)

    @classmethod
    def parse(cls, name: str) -> Scenario:
        key = name.strip().lower().replace("&", "").replace("_", "").replace("-", "")
        aliases = {"varspeedandsteer": "varspeedsteer"}
        key = aliases.get(key, key)
        for s in cls:
            if s.value == key:
                return s
        raise ConfigError(f"unknown scenario {name!r}")


class Termination(enum.Enum):
    NONE = "none"
    GOAL_REACHED = "goal"
    WALL_HIT = "wall"


@dataclass(frozen=True)
class DubinsState:
    px: float
    py: float
    theta: float

    def __post_init__(self):
        if not (math.isfinite(self.px) and math.isfinite(self.py)):
            raise ValueError(f"non-finite position ({self.px}, {self.py})")
        object.__setattr__(self, "theta", wrap_angle(self.theta))


@dataclass(frozen=True)
class DynamicsConfig:
    v: float = 0.02
    omega: float = 0.05

    def __post_init__(self):
        if not (self.v > 0 and self.omega > 0):
            raise ConfigError(f"speed and turn rate must be positive, got v={self.v}, omega={self.omega}")


@dataclass(frozen=True)
class Rect:
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        if not (self.xmin <= self.xmax and self.ymin <= self.ymax):
            raise ConfigError(f"inverted rectangle {self}")

    def contains(self, x: float, y: float) -> bool:
        return self.xmin <= x <= self.xmax and self.ymin <= y <= self.ymax

    def distance_to(self, x: float, y: float) -> float:
        dx = max(self.xmin - x, 0.0, x - self.xmax)
        dy = max(self.ymin - y, 0.0, y - self.ymax)
        return math.hypot(dx, dy)


@dataclass(frozen=True)
class Disc:
    cx: float
    cy: float
    r: float

    def __post_init__(self):
        if not self.r > 0:
            raise ConfigError(f"disc radius must be positive, got {self.r}")


def _default_obstacles():
    return (Disc(0.4, 0.55, 0.10), Disc(0.65, 0.3, 0.10))


@dataclass(frozen=True)
class WorldConfig:
    bounds: Rect = Rect(0.0, 0.0, 1.0, 1.0)
    obstacles: tuple[Disc, ...] = field(default_factory=_default_obstacles)
    goal: Disc = Disc(0.85, 0.85, 0.08)
    spawn_region: Rect = Rect(0.05, 0.05, 0.25, 0.25)
    margin_cap: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "obstacles", tuple(self.obstacles))
        if not self.margin_cap > 0:
            raise ConfigError("margin_cap must be positive")
        b = self.bounds
        for d in (*self.obstacles, self.goal):
            if not (b.xmin <= d.cx - d.r and d.cx + d.r <= b.xmax
                    and b.ymin <= d.cy - d.r and d.cy + d.r <= b.ymax):
                raise ConfigError(f"{d} does not lie inside the world bounds")
        s = self.spawn_region
        if not (b.contains(s.xmin, s.ymin) and b.contains(s.xmax, s.ymax)):
            raise ConfigError("spawn region must lie inside the world bounds")
        for d in self.obstacles:
            if s.distance_to(d.cx, d.cy) <= d.r:
                raise ConfigError(f"spawn region intersects obstacle {d}")


class CounterStream:
    """Uniform draws in [0, 1) addressed by index.

    ``at(k)`` returns ``width`` numbers and depends only on
    ``(seed, stream, k)``. Values are produced by Philox4x64 with the seed as
    key, in blocks of 256 indices that are cached.
    """

    def __init__(self, seed: int, stream: int, width: int, log: list | None = None):
        if seed < 0:
            raise ConfigError(f"seed must be non-negative, got {seed}")
        self.seed = seed
        self.stream = stream
        self.width = width
        self.log = log
        self._blocks: dict[int, np.ndarray] = {}

    def _block(self, b: int) -> np.ndarray:
        blk = self._blocks.get(b)
        if blk is None:
            bitgen = np.random.Philox(key=self.seed, counter=[0, 0, b, self.stream])
            blk = np.random.Generator(bitgen).random((_BLOCK, self.width))
            self._blocks[b] = blk
        return blk

    def at(self, index: int) -> np.ndarray:
        b, k = divmod(index, _BLOCK)
        row = self._block(b)[k]
        if self.log is not None:
            self.log.append((index, *row.tolist()))
        return row


def disturbance_stream(seed: int, log: list | None = None) -> CounterStream:
    """Per-step (speed, steering) draws; index = step number within a run."""
    return CounterStream(seed, DISTURBANCE_STREAM, 2, log)


def spawn_stream(seed: int) -> CounterStream:
    """Per-spawn (x, y, heading) draws; index = spawn number within a run."""
    return CounterStream(seed, SPAWN_STREAM, 3)


def step_noise(stream: CounterStream, step: int) -> tuple[float, float]:
    """Map the two U(0,1) draws of ``step`` to U(-1,1)."""
    u = stream.at(step)
    return 2.0 * float(u[0]) - 1.0, 2.0 * float(u[1]) - 1.0


def dubins_step(state: DubinsState, action: Action, dyn: DynamicsConfig,
                scenario: Scenario = Scenario.ID,
                noise: tuple[float, float] = (0.0, 0.0)) -> DubinsState:
    """Advance one step. Position moves along the pre-step heading, then the heading turns.

    ``noise`` holds the step's (speed, steering) draws in [-1, 1]; each is
    used only if the scenario perturbs that parameter.
    """
    v_eff = dyn.v
    w_eff = action.omega(dyn)
    if scenario.perturbs_speed:
        v_eff += noise[0] * dyn.v
    if scenario.perturbs_steer:
        w_eff += noise[1] * dyn.omega
    return DubinsState(
        state.px + v_eff * math.cos(state.theta),
        state.py + v_eff * math.sin(state.theta),
        state.theta + w_eff,
    )


def failure_margin(state: DubinsState, world: WorldConfig) -> float:
    """Signed distance to the nearest obstacle, capped at ``world.margin_cap``."""
    m = world.margin_cap
    for d in world.obstacles:
        m = min(m, math.hypot(state.px - d.cx, state.py - d.cy) - d.r)
    return m


def margin_field(px: np.ndarray, py: np.ndarray, world: WorldConfig) -> np.ndarray:
    """Vectorised :func:`failure_margin` over broadcastable coordinate arrays."""
    px, py = np.broadcast_arrays(np.asarray(px, float), np.asarray(py, float))
    m = np.full(px.shape, world.margin_cap)
    for d in world.obstacles:
        m = np.minimum(m, np.hypot(px - d.cx, py - d.cy) - d.r)
    return m


def terminating(state: DubinsState, world: WorldConfig) -> Termination:
    g = world.goal
    if math.hypot(state.px - g.cx, state.py - g.cy) <= g.r:
        return Termination.GOAL_REACHED
    if not world.bounds.contains(state.px, state.py):
        return Termination.WALL_HIT
    return Termination.NONE


def respawn(stream: CounterStream, index: int, world: WorldConfig) -> DubinsState:
    """Uniform position in the spawn region and uniform heading, from spawn draw ``index``."""
    u = stream.at(index)
    s = world.spawn_region
    return DubinsState(
        s.xmin + float(u[0]) * (s.xmax - s.xmin),
        s.ymin + float(u[1]) * (s.ymax - s.ymin),
        float(u[2]) * TWO_PI,
    )


@dataclass(frozen=True)
class PidGains:
    kp: float = 2.0
    ki: float = 0.0
    kd: float = 0.0
    # None means half the turn rate
    deadband: float | None = None


class PidController:
    """Goal-seeking heading controller quantised onto the three steering actions.

    Keeps the integral and previous error between calls; :meth:`reset`
    clears them (the harness calls it on respawn).
    """

    def __init__(self, world: WorldConfig, dyn: DynamicsConfig, gains: PidGains = PidGains()):
        self.world = world
        self.dyn = dyn
        self.gains = gains
        self.reset()

    def reset(self) -> None:
        self._integral = 0.0
        self._prev_error: float | None = None

    def heading_error(self, state: DubinsState) -> float:
        g = self.world.goal
        bearing = math.atan2(g.cy - state.py, g.cx - state.px)
        return wrap_to_pi(bearing - state.theta)

    def __call__(self, state: DubinsState) -> Action:
        err = self.heading_error(state)
        self._integral += err
        deriv = 0.0 if self._prev_error is None else wrap_to_pi(err - self._prev_error)
        self._prev_error = err
        k = self.gains
        desired = k.kp * err + k.ki * self._integral + k.kd * deriv
        deadband = self.dyn.omega / 2 if k.deadband is None else k.deadband
        if abs(desired) < deadband:
            return Action.STRAIGHT
        return Action.CCW if desired > 0 else Action.CW


def pid_task_action(state: DubinsState, world: WorldConfig, gains: PidGains = PidGains(),
                    dyn: DynamicsConfig = DynamicsConfig()) -> Action:
    """Memoryless task action (a fresh controller, so no integral or derivative history)."""
    return PidController(world, dyn, gains)(state)
