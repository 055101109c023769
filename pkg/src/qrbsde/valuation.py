"""Finance layer: value function, exercise region, stopping times and trading strategy."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .forward import PathBatch
from .model import IndeterminateStrategy, MarketSpec, Obstacle, optimal_strategy
from .reflected import ContinuousReference, Interpolator, PathProcesses


def value_function(alpha: float, x, y):
    """Exponential-utility value ``-exp(-alpha (x + y))``; saturates to -0 or -inf without raising."""
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    with np.errstate(over="ignore", under="ignore"):
        v = -np.exp(-alpha * (np.asarray(x, dtype=float) + np.asarray(y, dtype=float)))
    return float(v) if np.ndim(v) == 0 else v


def default_contact_tol(ref: ContinuousReference) -> float:
    dt = float(ref.times[1] - ref.times[0])
    return 10.0 * (ref.grid.dx**2 + dt)


@dataclass(frozen=True)
class ExerciseRegion:
    """Contact set ``{u <= g + tol}`` per layer of the reference."""

    times: np.ndarray
    x: np.ndarray
    gap: np.ndarray
    tol: float

    @property
    def contact(self) -> np.ndarray:
        return self.gap <= self.tol

    def hitting_index(self, states: np.ndarray, interp: Optional[Interpolator] = None) -> np.ndarray:
        """First layer at which each path is in the region (the last layer if never before)."""
        from .pde import SpaceGrid

        grid = SpaceGrid(float(self.x[0]), float(self.x[-1]), len(self.x))
        interp = Interpolator(grid, states) if interp is None else interp
        inside = interp(self.gap) <= self.tol
        inside[:, -1] = True
        return np.argmax(inside, axis=1)

    def stopping_times(self, batch: PathBatch) -> np.ndarray:
        return self.times[self.hitting_index(batch.states)]

    def to_csv(self, fh) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", "x", "contact"])
        c = self.contact
        for k, t in enumerate(self.times):
            for j, x in enumerate(self.x):
                w.writerow([repr(float(t)), repr(float(x)), int(c[k, j])])


def exercise_region(ref: ContinuousReference, obstacle: Obstacle, contact_tol: Optional[float] = None) -> ExerciseRegion:
    tol = default_contact_tol(ref) if contact_tol is None else float(contact_tol)
    gap = ref.u - obstacle(ref.grid.x)[None, :]
    gap[-1] = 0.0
    return ExerciseRegion(ref.times, ref.grid.x, gap, tol)


def stopped_payoff(region: ExerciseRegion, batch: PathBatch, obstacle: Obstacle) -> np.ndarray:
    """``g(X_D)`` per path."""
    k = region.hitting_index(batch.states)
    return obstacle(batch.states[np.arange(batch.M), k])


@dataclass(frozen=True)
class StrategyPaths:
    path_ids: np.ndarray
    times: np.ndarray
    pi: np.ndarray
    stop_index: np.ndarray
    indeterminate: np.ndarray

    def to_csv(self, fh) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path_id", "time", "pi"])
        for r, pid in enumerate(self.path_ids):
            for t, v in zip(self.times, self.pi[r]):
                w.writerow([int(pid), repr(float(t)), repr(float(v))])


def strategy_path(spec: MarketSpec, processes: PathProcesses, sigma, stop_index: Optional[np.ndarray] = None
                  ) -> StrategyPaths:
    """Optimal amount in the stock along each path, zero from the stopping time on.

    ``sigma(t)`` is the forward diffusion row that turns ``zmag`` into ``z``.
    Nodes with an indeterminate optimizer are flagged and set to zero.
    """
    C, L = processes.states.shape
    stop = np.full(C, L - 1) if stop_index is None else np.asarray(stop_index)
    pi = np.zeros((C, L))
    bad = np.zeros((C, L), dtype=bool)
    for k, t in enumerate(processes.times):
        x = processes.states[:, k]
        z = processes.zmag_ref[:, k][:, None] * np.asarray(sigma(t), dtype=float)[None, :]
        try:
            pi[:, k] = optimal_strategy(spec, t, x, z)
        except IndeterminateStrategy:
            s = np.asarray(spec.stock_vol(t, x), dtype=float)
            flat = np.sum(s * s, axis=-1) == 0
            bad[:, k] = flat
            ok = ~flat
            if np.any(ok):
                pi[ok, k] = optimal_strategy(spec, t, x[ok], z[ok])
    pi[np.arange(L)[None, :] >= stop[:, None]] = 0.0
    return StrategyPaths(processes.path_ids, processes.times, pi, stop, bad)
