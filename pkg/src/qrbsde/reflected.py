"""Discretely reflected recursion, the fine-grid reflected reference, and path evaluation."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from .forward import PathBatch
from .model import Driver, ForwardModel, Obstacle, Partition, lipschitz_bound, lipschitz_constants, \
    measured_lipschitz, z_bound
from .pde import SolverError, SolverLog, SpaceGrid, ValueSurface, gradient, march

EXIT_LIMIT = 1e-3


def time_grid(T: float, substeps: int) -> np.ndarray:
    """Internal grid ``k T / K``; every solver and path batch uses exactly these floats."""
    return T * np.arange(substeps + 1) / substeps


def snap_partition(partition: Partition, substeps: int):
    """Indices of the partition dates on the internal grid, plus the snapped partition."""
    T = partition.T
    idx = np.rint(np.asarray(partition.times) / T * substeps).astype(int)
    if len(np.unique(idx)) != len(idx):
        raise ValueError(f"partition with n={partition.n} is finer than the internal grid ({substeps} substeps)")
    grid = time_grid(T, substeps)
    return idx, Partition(tuple(grid[idx]))


@dataclass(frozen=True)
class DiscreteSolution:
    """Pre-reflection surfaces per interval and the reflected functions ``u_i`` at each date."""

    partition: Partition
    times: np.ndarray
    date_index: np.ndarray
    surfaces: List[ValueSurface]
    post: np.ndarray
    lipschitz: np.ndarray
    grid: SpaceGrid
    log: SolverLog = field(default_factory=SolverLog, repr=False)

    @property
    def n(self) -> int:
        return self.partition.n

    def pre_at_dates(self) -> np.ndarray:
        """Continuation values ``Y~_{t_i}`` at each date (row n is the terminal g)."""
        rows = [s.u[0] for s in self.surfaces] + [self.post[-1]]
        return np.array(rows)

    def jumps(self) -> np.ndarray:
        """Reflection increments ``u_i - Y~_{t_i}`` for ``i = 0..n-1`` (nonnegative)."""
        return self.post[:-1] - self.pre_at_dates()[:-1]

    def layers(self):
        """Global ``(y, zmag)`` stacks on the internal grid.

        ``y`` holds pre-reflection values inside intervals and reflected values
        at dates; ``zmag`` at ``t`` comes from the interval ``[t_{i-1}, t_i)``
        containing ``t``.
        """
        K = len(self.times) - 1
        y = np.empty((K + 1, self.grid.N))
        z = np.empty((K + 1, self.grid.N))
        for i, s in enumerate(self.surfaces, start=1):
            a, b = self.date_index[i - 1], self.date_index[i]
            y[a:b] = s.u[:-1]
            z[a:b] = s.zmag[:-1]
        y[self.date_index] = self.post
        z[K] = self.surfaces[-1].zmag[-1]
        return y, z

    def max_abs(self) -> float:
        return max(float(np.max(np.abs(s.u))) for s in self.surfaces)


@dataclass(frozen=True)
class ContinuousReference:
    """Projection at every internal step; ``k_density[k]`` is the projection increment at ``times[k]``."""

    times: np.ndarray
    u: np.ndarray
    zmag: np.ndarray
    k_density: np.ndarray
    grid: SpaceGrid
    log: SolverLog = field(default_factory=SolverLog, repr=False)

    @property
    def pre(self) -> np.ndarray:
        return self.u - self.k_density

    def surface(self) -> ValueSurface:
        return ValueSurface(0, self.times, self.u, self.zmag, True, self.grid.x)


def _z_cap(model, driver, L, T, factor):
    return factor * z_bound(model, driver, L, T)


def solve_discrete(partition: Partition, model: ForwardModel, driver: Driver, obstacle: Obstacle,
                   grid: SpaceGrid, substeps: int = 4096, theta: float = 0.5, sweeps: int = 2,
                   z_cap_factor: float = 1.5, log: Optional[SolverLog] = None,
                   terminal: Optional[Callable] = None) -> DiscreteSolution:
    """Backward recursion ``u_n = g``, ``u_{i-1} = max(Y~_{t_{i-1}}, g)``.

    The partition is snapped to the internal grid of ``substeps`` steps on ``[0, T]``.
    ``terminal`` replaces ``g`` as the terminal function only (the obstacle is unchanged).
    """
    log = SolverLog() if log is None else log
    idx, snapped = snap_partition(partition, substeps)
    times = time_grid(partition.T, substeps)
    g = obstacle(grid.x)
    n = snapped.n
    post = np.empty((n + 1, grid.N))
    post[n] = g if terminal is None else np.asarray(terminal(grid.x), dtype=float)
    lips = np.empty(n + 1)
    lips[n] = measured_lipschitz(post[n], grid.dx)
    surfaces: List[Optional[ValueSurface]] = [None] * n
    for i in range(n, 0, -1):
        a, b = idx[i - 1], idx[i]
        seg = times[a:b + 1]
        cap = _z_cap(model, driver, lips[i], seg[-1] - seg[0], z_cap_factor)
        try:
            u, _ = march(post[i], seg, model, driver, grid, cap, theta, sweeps, log)
        except SolverError as exc:
            raise SolverError(f"interval {i} [{seg[0]:.6g}, {seg[-1]:.6g}]: {exc}") from exc
        surfaces[i - 1] = ValueSurface(i, seg, u, gradient(u, grid.dx), False, grid.x)
        post[i - 1] = np.maximum(u[0], g)
        lips[i - 1] = measured_lipschitz(post[i - 1], grid.dx)
    return DiscreteSolution(snapped, times, idx, surfaces, post, lips, grid, log)


def solve_continuous_reference(model: ForwardModel, driver: Driver, obstacle: Obstacle, grid: SpaceGrid,
                               T: float, substeps: int = 4096, theta: float = 0.5, sweeps: int = 2,
                               z_cap_factor: float = 1.5, proof_constant: float = 1.0,
                               log: Optional[SolverLog] = None, terminal: Optional[Callable] = None
                               ) -> ContinuousReference:
    """Reflected reference: every internal step is followed by ``u <- max(u, g)``."""
    log = SolverLog() if log is None else log
    times = time_grid(T, substeps)
    g = obstacle(grid.x)
    end = g if terminal is None else np.asarray(terminal(grid.x), dtype=float)
    K1, K2 = lipschitz_constants(model, T, proof_constant)
    L = lipschitz_bound(K1, K2, max(obstacle.K_g, measured_lipschitz(end, grid.dx)), T)
    cap = _z_cap(model, driver, L, T, z_cap_factor)
    u, pre = march(end, times, model, driver, grid, cap, theta, sweeps, log, project=g)
    # Z on [t_k, t_{k+1}) belongs to the unreflected step ending at t_{k+1}
    return ContinuousReference(times, u, gradient(pre, grid.dx), u - pre, grid, log)


# ---------------------------------------------------------------------------
# Path evaluation


@dataclass(frozen=True)
class PathProcesses:
    """Discrete and reference processes along a batch of paths, on the internal grid."""

    path_ids: np.ndarray
    times: np.ndarray
    states: np.ndarray
    valid: np.ndarray
    date_index: np.ndarray
    sigma_norm: np.ndarray
    y_disc: np.ndarray
    zmag_disc: np.ndarray
    k_disc: np.ndarray
    y_ref: np.ndarray
    zmag_ref: np.ndarray
    k_ref: np.ndarray

    @property
    def exit_fraction(self) -> float:
        return 1.0 - float(np.mean(self.valid))

    def to_csv(self, fh, header: bool = True) -> None:
        write_processes_csv(fh, self, header=header)


class Interpolator:
    """Linear interpolation of layer stacks at path states (one layer per time column)."""

    def __init__(self, grid: SpaceGrid, states: np.ndarray):
        pos = (states - grid.x_min) / grid.dx
        self.valid = np.all((pos >= 0) & (pos <= grid.N - 1), axis=1)
        pos = np.clip(pos, 0, grid.N - 1)
        j = np.minimum(np.floor(pos).astype(np.intp), grid.N - 2)
        self.j = j
        self.w = pos - j
        self.k = np.arange(states.shape[1])[None, :]

    def __call__(self, layers: np.ndarray, columns=None) -> np.ndarray:
        if columns is None:
            j, w, k = self.j, self.w, self.k
        else:
            j, w, k = self.j[:, columns], self.w[:, columns], np.arange(layers.shape[0])[None, :]
        return layers[k, j] * (1 - w) + layers[k, j + 1] * w


def _accumulate_before(inc: np.ndarray) -> np.ndarray:
    """``out[:, k] = sum_{l < k} inc[:, l]``."""
    out = np.zeros_like(inc)
    np.cumsum(inc[:, :-1], axis=1, out=out[:, 1:])
    return out


def reference_along_paths(ref: ContinuousReference, batch: PathBatch, interp: Optional[Interpolator] = None):
    interp = Interpolator(ref.grid, batch.states) if interp is None else interp
    y = interp(ref.u)
    z = interp(ref.zmag)
    k = _accumulate_before(interp(ref.k_density))
    return y, z, k


def evaluate_along_paths(disc: DiscreteSolution, ref: ContinuousReference, batch: PathBatch,
                         model: ForwardModel, ref_values=None, interp: Optional[Interpolator] = None,
                         exit_limit: float = EXIT_LIMIT) -> PathProcesses:
    """Sample ``(Y^, Z^, K^)`` and ``(Y, Z, K)`` along each path.

    Paths leaving the space grid are flagged invalid; use ``valid`` to mask them.
    """
    if len(batch.times) != len(disc.times) or not np.array_equal(batch.times, disc.times):
        raise ValueError("path batch and solver must share the internal time grid")
    interp = Interpolator(disc.grid, batch.states) if interp is None else interp
    y, z = disc.layers()
    y_disc = interp(y)
    z_disc = interp(z)
    inc = np.zeros_like(y_disc)
    jumps = disc.jumps()
    cols = disc.date_index[:-1]
    inc[:, cols] = interp(jumps, columns=cols)
    k_disc = _accumulate_before(inc)
    if ref_values is None:
        ref_values = reference_along_paths(ref, batch, interp)
    y_ref, z_ref, k_ref = ref_values
    valid = interp.valid
    frac = 1.0 - float(np.mean(valid))
    if frac > exit_limit:
        warnings.warn(f"{frac:.3%} of paths left the space grid (limit {exit_limit:.1%})")
    sig = np.array([model.sigma_norm(t) for t in batch.times])
    return PathProcesses(batch.path_ids, batch.times, batch.states, valid, disc.date_index, sig,
                         y_disc, z_disc, k_disc, y_ref, z_ref, k_ref)


def flatoff_terms(processes: PathProcesses, obstacle: Obstacle) -> np.ndarray:
    """Per-path ``sum_t (Y_t - g(X_t))^+ dK_t`` over valid paths."""
    st = processes.states[processes.valid]
    gap = np.maximum(processes.y_ref[processes.valid] - obstacle(st), 0.0)
    dk = np.diff(processes.k_ref[processes.valid], axis=1)
    return np.sum(gap[:, :-1] * dk, axis=1)


def flatoff_residual(processes: PathProcesses, obstacle: Obstacle) -> float:
    terms = flatoff_terms(processes, obstacle)
    return float(np.mean(terms)) if len(terms) else 0.0


def write_processes_csv(fh, p: PathProcesses, header: bool = True) -> None:
    w = csv.writer(fh, lineterminator="\n")
    if header:
        w.writerow(["path_id", "time", "y_disc", "z_disc_mag", "k_disc", "y_ref", "z_ref_mag", "k_ref"])
    for r, pid in enumerate(p.path_ids):
        if not p.valid[r]:
            continue
        for k, t in enumerate(p.times):
            w.writerow([int(pid), repr(float(t)), repr(float(p.y_disc[r, k])), repr(float(p.zmag_disc[r, k])),
                        repr(float(p.k_disc[r, k])), repr(float(p.y_ref[r, k])), repr(float(p.zmag_ref[r, k])),
                        repr(float(p.k_ref[r, k]))])
