"""Finite differences for the semilinear terminal-value problem on one interval.

Solves ``u_t + b u_x + |sigma|^2/2 u_xx + f(t, x, u_x sigma) = 0`` backward in
time with a theta scheme: diffusion and drift implicit (tridiagonal), the
generator by a short fixed-point iteration.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import solve_banded

from .model import Driver, ForwardModel


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class SpaceGrid:
    x_min: float
    x_max: float
    N: int

    def __post_init__(self):
        if self.N < 3 or not self.x_max > self.x_min:
            raise ValueError(f"degenerate space grid [{self.x_min}, {self.x_max}] with {self.N} nodes")

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / (self.N - 1)

    @property
    def x(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.N)

    def contains(self, x0: float) -> bool:
        return self.x_min < x0 < self.x_max

    @classmethod
    def default(cls, model: ForwardModel, T: float, R: Optional[float] = None,
                dx: Optional[float] = None, N: Optional[int] = None) -> "SpaceGrid":
        """Grid ``[x0 - R, x0 + R]``; by default ``R`` covers six standard deviations plus drift."""
        s = 6 * model.M_sigma * math.sqrt(T)
        if R is None:
            R = s + T * model.M_b * (1 + abs(model.x0) + s)
        if N is None:
            if dx is None:
                dx = 0.01 * R / 3
            N = int(round(2 * R / dx)) + 1
        return cls(model.x0 - R, model.x0 + R, int(N))


@dataclass
class SolverLog:
    """Mutable tally of fixed-point warnings for a run.

    The residual is the sup-norm change made by the last sweep.
    """

    tol: float = 1e-5
    steps: int = 0
    warnings: int = 0
    max_residual: float = 0.0

    def record(self, residual: float) -> None:
        self.steps += 1
        self.max_residual = max(self.max_residual, residual)
        if residual > self.tol:
            self.warnings += 1

    def as_dict(self) -> dict:
        return {"steps": self.steps, "fixed_point_warnings": self.warnings,
                "max_fixed_point_residual": self.max_residual, "tolerance": self.tol}


@dataclass(frozen=True)
class ValueSurface:
    """Layers of ``u`` and ``zmag = u_x`` on one interval (row ``k`` is ``times[k]``)."""

    interval: int
    times: np.ndarray
    u: np.ndarray
    zmag: np.ndarray
    reflected: bool = False
    x: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def layers(self) -> int:
        return len(self.times)

    def to_csv(self, fh, header: bool = True) -> None:
        write_surfaces_csv(fh, [self], header=header)


def gradient(u: np.ndarray, dx: float) -> np.ndarray:
    """Central differences inside, one-sided at the two ends; works along the last axis."""
    return np.gradient(u, dx, axis=-1)


def _operator(model: ForwardModel, t: float, grid: SpaceGrid, xs: np.ndarray):
    """Tridiagonal coefficients ``(lower, diag, upper)`` of the generator of X at time t."""
    dx = grid.dx
    a = 0.5 * model.sigma_norm(t) ** 2
    b = model.drift(t, xs)
    lo = a / dx**2 - b / (2 * dx)
    di = np.full(grid.N, -2 * a / dx**2)
    up = a / dx**2 + b / (2 * dx)
    # rows 0 and N-1: u_xx = 0, so only the one-sided drift term survives
    lo[0], di[0], up[0] = 0.0, -b[0] / dx, b[0] / dx
    lo[-1], di[-1], up[-1] = -b[-1] / dx, b[-1] / dx, 0.0
    return lo, di, up


def _apply(op, u):
    lo, di, up = op
    out = di * u
    out[1:] += lo[1:] * u[:-1]
    out[:-1] += up[:-1] * u[1:]
    return out


def _source(driver: Driver, t, xs, u, dx, sig, zcap_mag):
    zmag = gradient(u, dx)
    if np.isfinite(zcap_mag):
        zmag = np.clip(zmag, -zcap_mag, zcap_mag)
    return np.asarray(driver.f(t, xs, zmag[:, None] * sig[None, :]), dtype=float)


def backward_substep(u_next: np.ndarray, t: float, delta: float, model: ForwardModel, driver: Driver,
                     grid: SpaceGrid, z_cap: float = math.inf, theta: float = 0.5, sweeps: int = 2,
                     log: Optional[SolverLog] = None, _op_next=None) -> np.ndarray:
    """One step from ``t + delta`` back to ``t``.

    ``z`` enters the generator clipped to ``|z| <= z_cap``.
    """
    if not delta > 0:
        raise ValueError("delta must be positive")
    if not np.all(np.isfinite(u_next)):
        raise SolverError(f"non-finite terminal layer at t={t + delta:.6g}")
    xs = grid.x
    dx = grid.dx
    t1 = t + delta
    op_now = _operator(model, t, grid, xs)
    op_next = _operator(model, t1, grid, xs) if _op_next is None else _op_next
    lo, di, up = op_now

    ab = np.empty((3, grid.N))
    ab[0, 1:] = -theta * delta * up[:-1]
    ab[0, 0] = 0.0
    ab[1] = 1.0 - theta * delta * di
    ab[2, :-1] = -theta * delta * lo[1:]
    ab[2, -1] = 0.0
    off = np.abs(theta * delta * lo) + np.abs(theta * delta * up)
    if np.any(np.abs(ab[1]) + 1e-12 < off):
        j = int(np.argmax(off - np.abs(ab[1])))
        raise SolverError(
            f"tridiagonal system not diagonally dominant at node {j} (x={xs[j]:.4g}): "
            f"delta={delta:.3g}, dx={dx:.3g}, |sigma|={model.sigma_norm(t):.3g}, "
            f"b={model.drift(t, xs[j:j + 1])[0]:.3g}")

    sig_now = model.sigma_vec(t)
    sig_next = model.sigma_vec(t1)
    cap_now = z_cap / np.linalg.norm(sig_now) if np.linalg.norm(sig_now) > 0 else math.inf
    cap_next = z_cap / np.linalg.norm(sig_next) if np.linalg.norm(sig_next) > 0 else math.inf

    base = u_next + (1 - theta) * delta * _apply(op_next, u_next)
    if theta < 1:
        base = base + (1 - theta) * delta * _source(driver, t1, xs, u_next, dx, sig_next, cap_next)

    u = u_next
    prev = u_next
    for _ in range(max(1, sweeps)):
        rhs = base + theta * delta * _source(driver, t, xs, u, dx, sig_now, cap_now)
        prev, u = u, solve_banded((1, 1), ab, rhs, check_finite=False)
    if not np.all(np.isfinite(u)):
        raise SolverError(f"non-finite layer at t={t:.6g}")
    if log is not None:
        log.record(float(np.max(np.abs(u - prev))) if sweeps > 1 else 0.0)
    return u


def march(terminal: np.ndarray, times: np.ndarray, model: ForwardModel, driver: Driver, grid: SpaceGrid,
          z_cap: float = math.inf, theta: float = 0.5, sweeps: int = 2, log: Optional[SolverLog] = None,
          project: Optional[np.ndarray] = None):
    """Step backward through ``times``; returns ``(u, pre)`` layer stacks.

    With ``project`` given, every new layer is replaced by ``max(layer, project)``
    and ``pre`` holds the layers before that projection.
    """
    L = len(times)
    u = np.empty((L, grid.N))
    pre = np.empty((L, grid.N)) if project is not None else u
    u[-1] = terminal
    if project is not None:
        pre[-1] = terminal
    xs = grid.x
    op_next = _operator(model, times[-1], grid, xs)
    for k in range(L - 2, -1, -1):
        t = times[k]
        layer = backward_substep(u[k + 1], t, times[k + 1] - t, model, driver, grid, z_cap, theta, sweeps,
                                 log, _op_next=op_next)
        op_next = _operator(model, t, grid, xs)
        if project is not None:
            pre[k] = layer
            u[k] = np.maximum(layer, project)
        else:
            u[k] = layer
    return u, pre


def _terminal_values(terminal_fn, grid):
    if callable(terminal_fn):
        return np.asarray(terminal_fn(grid.x), dtype=float) * np.ones(grid.N)
    vals = np.asarray(terminal_fn, dtype=float)
    if vals.shape != (grid.N,):
        raise ValueError(f"terminal layer has shape {vals.shape}, grid has {grid.N} nodes")
    return vals


def solve_interval(terminal_fn, t_lo: float, t_hi: float, model: ForwardModel, driver: Driver,
                   grid: SpaceGrid, substeps: int, z_cap: float = math.inf, theta: float = 0.5,
                   sweeps: int = 2, log: Optional[SolverLog] = None, interval: int = 0,
                   times: Optional[np.ndarray] = None) -> ValueSurface:
    """Solve on ``[t_lo, t_hi]`` with terminal ``terminal_fn`` (callable or grid array)."""
    if times is None:
        if substeps < 1:
            raise ValueError("substeps must be >= 1")
        times = np.linspace(t_lo, t_hi, substeps + 1)
    terminal = _terminal_values(terminal_fn, grid)
    if not np.all(np.isfinite(terminal)):
        raise SolverError("terminal function is not finite on the grid")
    u, _ = march(terminal, times, model, driver, grid, z_cap, theta, sweeps, log)
    return ValueSurface(interval, np.asarray(times), u, gradient(u, grid.dx), False, grid.x)


def extract_z(surface: ValueSurface, layer: int, t: float, model: ForwardModel) -> np.ndarray:
    """``z`` vectors (``N x m``) of one layer: ``u_x`` times ``sigma(t)``."""
    return surface.zmag[layer][:, None] * model.sigma_vec(t)[None, :]


def write_surfaces_csv(fh, surfaces, header: bool = True) -> None:
    w = csv.writer(fh, lineterminator="\n")
    if header:
        w.writerow(["interval", "layer_time", "x", "u", "zmag"])
    for s in surfaces:
        for t, urow, zrow in zip(s.times, s.u, s.zmag):
            for x, uv, zv in zip(s.x, urow, zrow):
                w.writerow([s.interval, repr(float(t)), repr(float(x)), repr(float(uv)), repr(float(zv))])
