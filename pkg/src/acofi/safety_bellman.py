"""Discounted safety Q-function on a state grid.

The table is the fixed point of

    Q(y, u) = (1 - gamma) l(y) + gamma * min{ l(y), max_u' Q(f(y, u), u') }

where f is the nominal (unperturbed) Dubins step and the value at the
successor is read by trilinear interpolation, periodic in heading. Sweeps
are synchronous, so the result does not depend on node ordering.
"""

from __future__ import annotations

import logging
import math
import os
import struct
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .environment import (ACTIONS, TWO_PI, Action, DubinsState, DynamicsConfig,
                          Rect, WorldConfig, margin_field)
from .errors import ConfigError, HeaderMismatch, NonConvergence

log = logging.getLogger(__name__)

# fractional grid indices this close to an integer are treated as on-node
_SNAP = 1e-9


@dataclass(frozen=True)
class GridSpec:
    nx: int = 101
    ny: int = 101
    ntheta: int = 64
    bounds: Rect = Rect(0.0, 0.0, 1.0, 1.0)

    def __post_init__(self):
        if min(self.nx, self.ny, self.ntheta) < 2:
            raise ConfigError(f"grid needs at least 2 nodes per axis, got {self.shape}")
        b = self.bounds
        if not (b.xmax > b.xmin and b.ymax > b.ymin):
            raise ConfigError("grid bounds must have positive extent")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.nx, self.ny, self.ntheta)

    @property
    def size(self) -> int:
        return self.nx * self.ny * self.ntheta

    @property
    def dx(self) -> float:
        return (self.bounds.xmax - self.bounds.xmin) / (self.nx - 1)

    @property
    def dy(self) -> float:
        return (self.bounds.ymax - self.bounds.ymin) / (self.ny - 1)

    @property
    def dtheta(self) -> float:
        return TWO_PI / self.ntheta

    def axes(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Node coordinates along (px, py, theta)."""
        b = self.bounds
        return (b.xmin + np.arange(self.nx) * self.dx,
                b.ymin + np.arange(self.ny) * self.dy,
                np.arange(self.ntheta) * self.dtheta)

    def node_state(self, i: int, j: int, k: int) -> DubinsState:
        px, py, th = self.axes()
        return DubinsState(float(px[i]), float(py[j]), float(th[k]))


def _snap(f):
    r = np.rint(f)
    return np.where(np.abs(f - r) < _SNAP, r, f)


def _axis_weights(coord, lo: float, hi: float, step: float, n: int):
    f = _snap((np.clip(coord, lo, hi) - lo) / step)
    i0 = np.clip(np.floor(f), 0, n - 2).astype(np.int64)
    return i0, f - i0


def _theta_weights(theta, step: float, n: int):
    f = _snap(np.asarray(theta, float) / step)
    fl = np.floor(f)
    k0 = np.mod(fl, n).astype(np.int64)
    return k0, np.mod(k0 + 1, n), f - fl


def interpolation_stencil(grid: GridSpec, px, py, theta):
    """Flat node indices and weights of the 8 trilinear corners.

    Returns ``(idx, w)``, each of shape ``broadcast(px, py, theta).shape + (8,)``.
    Positions outside the grid are clamped to the boundary.
    """
    px, py, theta = np.broadcast_arrays(np.asarray(px, float), np.asarray(py, float),
                                        np.asarray(theta, float))
    b = grid.bounds
    i0, tx = _axis_weights(px, b.xmin, b.xmax, grid.dx, grid.nx)
    j0, ty = _axis_weights(py, b.ymin, b.ymax, grid.dy, grid.ny)
    k0, k1, tt = _theta_weights(theta, grid.dtheta, grid.ntheta)
    idx = []
    w = []
    for di, wx in ((0, 1.0 - tx), (1, tx)):
        for dj, wy in ((0, 1.0 - ty), (1, ty)):
            for kk, wt in ((k0, 1.0 - tt), (k1, tt)):
                idx.append(((i0 + di) * grid.ny + (j0 + dj)) * grid.ntheta + kk)
                w.append(wx * wy * wt)
    return np.stack(idx, axis=-1), np.stack(w, axis=-1)


def node_margins(world: WorldConfig, grid: GridSpec) -> np.ndarray:
    """Failure margin at every node, flat in (px, py, theta) row-major order."""
    px, py, _ = grid.axes()
    l2 = margin_field(px[:, None], py[None, :], world)
    return np.repeat(l2[:, :, None], grid.ntheta, axis=2).ravel()


def successor_operator(grid: GridSpec, dyn: DynamicsConfig) -> sp.csr_matrix:
    """Sparse map from node values V (length N) to interpolated successor values.

    Row ``3 * n + a`` holds the stencil of the nominal successor of node n
    under action slot a.
    """
    px, py, th = np.meshgrid(*grid.axes(), indexing="ij")
    px, py, th = px.ravel()[:, None], py.ravel()[:, None], th.ravel()[:, None]
    turns = np.array([a.omega(dyn) for a in ACTIONS])[None, :]
    idx, w = interpolation_stencil(grid, px + dyn.v * np.cos(th), py + dyn.v * np.sin(th),
                                   th + turns)
    n_rows = grid.size * 3
    indptr = np.arange(0, 8 * n_rows + 1, 8, dtype=np.int64)
    return sp.csr_matrix((w.reshape(-1), idx.reshape(-1).astype(np.int32), indptr),
                         shape=(n_rows, grid.size))


class BellmanOperator:
    """One synchronous backup sweep on flat ``(N, 3)`` tables."""

    def __init__(self, world: WorldConfig, grid: GridSpec, dyn: DynamicsConfig, gamma: float):
        if not 0.0 < gamma < 1.0:
            raise ConfigError(f"gamma must lie in (0, 1), got {gamma}")
        self.grid = grid
        self.gamma = gamma
        self.margins = node_margins(world, grid)[:, None]
        self.successors = successor_operator(grid, dyn)

    def __call__(self, q: np.ndarray) -> np.ndarray:
        v_next = (self.successors @ q.max(axis=1)).reshape(-1, 3)
        g = self.gamma
        return (1.0 - g) * self.margins + g * np.minimum(self.margins, v_next)

    def residual(self, q: np.ndarray) -> float:
        return float(np.max(np.abs(q - self(q))))


@dataclass
class QTable:
    values: np.ndarray  # (nx, ny, ntheta, 3), action slots ordered (-w, 0, +w)
    gamma: float
    grid: GridSpec
    dyn: DynamicsConfig
    iterations: int = 0
    residual: float = math.nan
    # max |Q(y,u) - target(y,u)| over random off-node states, measured at solve time
    interp_error: float = math.nan

    @property
    def flat(self) -> np.ndarray:
        return self.values.reshape(-1, 3)

    def q_values(self, state: DubinsState) -> np.ndarray:
        """Interpolated Q at ``state`` for all three actions."""
        g = self.grid
        b = g.bounds
        fx = (min(max(state.px, b.xmin), b.xmax) - b.xmin) / g.dx
        fy = (min(max(state.py, b.ymin), b.ymax) - b.ymin) / g.dy
        ft = state.theta / g.dtheta
        fx, fy, ft = (round(f) if abs(f - round(f)) < _SNAP else f for f in (fx, fy, ft))
        i = min(max(math.floor(fx), 0), g.nx - 2)
        j = min(max(math.floor(fy), 0), g.ny - 2)
        kf = math.floor(ft)
        tx, ty, tt = fx - i, fy - j, ft - kf
        k0 = kf % g.ntheta
        k1 = (k0 + 1) % g.ntheta
        v = self.values
        out = np.zeros(3)
        for ii, wx in ((i, 1.0 - tx), (i + 1, tx)):
            for jj, wy in ((j, 1.0 - ty), (j + 1, ty)):
                for kk, wt in ((k0, 1.0 - tt), (k1, tt)):
                    out += (wx * wy * wt) * v[ii, jj, kk]
        return out

    def header(self) -> dict:
        b = self.grid.bounds
        return {"nx": self.grid.nx, "ny": self.grid.ny, "ntheta": self.grid.ntheta,
                "gamma": self.gamma, "v": self.dyn.v, "omega": self.dyn.omega,
                "xmin": b.xmin, "ymin": b.ymin, "xmax": b.xmax, "ymax": b.ymax}


def q_value(qtable: QTable, state: DubinsState, action: Action) -> float:
    return float(qtable.q_values(state)[action.index])


def v_value(qtable: QTable, state: DubinsState) -> float:
    return float(qtable.q_values(state).max())


# ties go to the smaller turn, then to clockwise
_TIE_ORDER = (Action.STRAIGHT, Action.CW, Action.CCW)


def best_action(q: np.ndarray) -> Action:
    best = _TIE_ORDER[0]
    for a in _TIE_ORDER[1:]:
        if q[a.index] > q[best.index]:
            best = a
    return best


def safest_action(qtable: QTable, state: DubinsState) -> Action:
    return best_action(qtable.q_values(state))


def bellman_residual(qtable: QTable, world: WorldConfig) -> float:
    op = BellmanOperator(world, qtable.grid, qtable.dyn, qtable.gamma)
    return op.residual(qtable.flat)


def measure_interpolation_error(qtable: QTable, world: WorldConfig, n_samples: int = 20000,
                                seed: int = 0) -> float:
    """Largest gap between interpolated Q and the one-step target at random states."""
    rng = np.random.default_rng(seed)
    b = qtable.grid.bounds
    px = rng.uniform(b.xmin, b.xmax, n_samples)
    py = rng.uniform(b.ymin, b.ymax, n_samples)
    th = rng.uniform(0.0, TWO_PI, n_samples)
    grid, dyn, g = qtable.grid, qtable.dyn, qtable.gamma
    idx, w = interpolation_stencil(grid, px, py, th)
    q_here = np.einsum("sk,ska->sa", w, qtable.flat[idx])
    l_here = margin_field(px, py, world)[:, None]
    v_nodes = qtable.flat.max(axis=1)
    turns = np.array([a.omega(dyn) for a in ACTIONS])[None, :]
    c, s = np.cos(th)[:, None], np.sin(th)[:, None]
    idx2, w2 = interpolation_stencil(grid, px[:, None] + dyn.v * c, py[:, None] + dyn.v * s,
                                     th[:, None] + turns)
    v_next = np.einsum("sak,sak->sa", w2, v_nodes[idx2])
    target = (1.0 - g) * l_here + g * np.minimum(l_here, v_next)
    return float(np.max(np.abs(q_here - target)))


def solve_safety_bellman(world: WorldConfig, grid: GridSpec, dyn: DynamicsConfig,
                         gamma: float = 0.98, tol: float = 1e-6,
                         max_iters: int = 100_000) -> QTable:
    """Value iteration from Q_0 = l until the sup-norm Bellman residual is at most ``tol``.

    Raises :class:`NonConvergence` if ``max_iters`` sweeps do not get there.
    """
    if not tol > 0:
        raise ConfigError(f"tol must be positive, got {tol}")
    op = BellmanOperator(world, grid, dyn, gamma)
    q = np.repeat(op.margins, 3, axis=1)
    residual = math.inf
    it = 0
    while it < max_iters:
        q_new = op(q)
        residual = float(np.max(np.abs(q_new - q)))
        q = q_new
        it += 1
        if it % 100 == 0:
            log.debug("sweep %d residual %.3e", it, residual)
        # residual above is that of the previous iterate; stop once the
        # current one is certified
        if residual * gamma <= tol:
            residual = op.residual(q)
            if residual <= tol:
                break
    else:
        residual = op.residual(q)
        if residual > tol:
            raise NonConvergence(residual, it)
    table = QTable(q.reshape(*grid.shape, 3), gamma, grid, dyn, iterations=it, residual=residual)
    table.interp_error = measure_interpolation_error(table, world)
    return table


# --- persistence ---------------------------------------------------------

MAGIC = b"ACOFIQT\x00"
VERSION = 1
_HEADER = struct.Struct("<8sIIII9dQ")


def save_qtable(qtable: QTable, path: str | os.PathLike) -> None:
    """Write the binary table atomically (temp file + rename)."""
    g = qtable.grid
    b = g.bounds
    head = _HEADER.pack(MAGIC, VERSION, g.nx, g.ny, g.ntheta, qtable.gamma,
                        qtable.dyn.v, qtable.dyn.omega, b.xmin, b.ymin, b.xmax, b.ymax,
                        qtable.residual, qtable.interp_error, qtable.iterations)
    body = np.ascontiguousarray(qtable.values, dtype="<f8").tobytes()
    _atomic_write_bytes(path, head + body)


def load_qtable(path: str | os.PathLike) -> QTable:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise HeaderMismatch(f"{path}: truncated header")
    (magic, version, nx, ny, nt, gamma, v, omega, xmin, ymin, xmax, ymax,
     residual, interp_error, iterations) = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise HeaderMismatch(f"{path}: not a Q-table file")
    if version != VERSION:
        raise HeaderMismatch(f"{path}: unsupported version {version}")
    n = nx * ny * nt * 3
    if len(raw) != _HEADER.size + 8 * n:
        raise HeaderMismatch(f"{path}: body size does not match header dims")
    values = np.frombuffer(raw, dtype="<f8", count=n, offset=_HEADER.size)
    grid = GridSpec(nx, ny, nt, Rect(xmin, ymin, xmax, ymax))
    return QTable(values.reshape(nx, ny, nt, 3).astype(float), gamma, grid,
                  DynamicsConfig(v, omega), iterations, residual, interp_error)


def check_header(qtable: QTable, grid: GridSpec, dyn: DynamicsConfig, gamma: float) -> None:
    """Raise :class:`HeaderMismatch` unless the table was built for this configuration."""
    expected = QTable(np.empty(0), gamma, grid, dyn).header()
    got = qtable.header()
    diff = [f"{k}: file {got[k]!r} vs config {expected[k]!r}"
            for k in expected if got[k] != expected[k]]
    if diff:
        raise HeaderMismatch("; ".join(diff))


def export_qtable_csv(qtable: QTable, path: str | os.PathLike) -> None:
    """One ``px,py,theta,a,Q`` row per node and action, ``a`` in {-1, 0, 1}."""
    px, py, th = np.meshgrid(*qtable.grid.axes(), indexing="ij")
    rows = []
    for a in ACTIONS:
        rows.append(np.column_stack([px.ravel(), py.ravel(), th.ravel(),
                                     np.full(px.size, int(a)), qtable.values[..., a.index].ravel()]))
    table = np.vstack(rows)
    lines = ["px,py,theta,a,Q"]
    lines += [f"{r[0]!r},{r[1]!r},{r[2]!r},{int(r[3])},{r[4]!r}" for r in table.tolist()]
    _atomic_write_bytes(path, ("\n".join(lines) + "\n").encode())


def _atomic_write_bytes(path, data: bytes) -> None:
    path = os.fspath(path)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
