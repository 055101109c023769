"""Error functionals between the discretely reflected solution and the reference, and rate fits."""

from __future__ import annotations

import csv
import json
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .forward import CHUNK, simulate, thread_count
from .model import Partition, z_bound
from .pde import SolverLog, SpaceGrid
from .presets import Problem
from .reflected import (EXIT_LIMIT, ContinuousReference, DiscreteSolution, Interpolator, PathProcesses,
                        evaluate_along_paths, flatoff_terms, reference_along_paths, solve_continuous_reference,
                        solve_discrete)

MIN_PATHS = 100
THEORY = {"lipschitz": {"y": 0.5, "z": 0.5, "k": 0.25}, "c2b": {"y": 1.0, "z": 1.0, "k": 0.5}}


@dataclass(frozen=True)
class ErrorRecord:
    err_y_sup_sq: float
    err_y_pathsup_sq: float
    err_z_l2_sq: float
    err_k_sup: float
    err_k_pointwise_sup: float
    paths: int


class ErrorAccumulator:
    """Additive per-path sums so that chunks combine in a fixed order."""

    def __init__(self, times: np.ndarray, date_index: np.ndarray):
        self.times = np.asarray(times)
        self.date_index = np.asarray(date_index)
        n = len(date_index) - 1
        self.y_sq = np.zeros(len(times))
        self.y_path = np.zeros(n)
        self.k_path = np.zeros(n)
        self.k_abs = np.zeros(len(times))
        self.z_int = 0.0
        self.count = 0

    def add(self, p: PathProcesses) -> None:
        v = p.valid
        dy2 = (p.y_disc[v] - p.y_ref[v]) ** 2
        dk = np.abs(p.k_disc[v] - p.k_ref[v])
        dz2 = (p.zmag_disc[v] - p.zmag_ref[v]) ** 2 * p.sigma_norm[None, :] ** 2
        dt = np.diff(self.times)
        self.y_sq += dy2.sum(axis=0)
        self.k_abs += dk.sum(axis=0)
        self.z_int += float(np.sum(dz2[:, :-1] @ dt))
        for i in range(len(self.date_index) - 1):
            a, b = self.date_index[i], self.date_index[i + 1]
            self.y_path[i] += dy2[:, a:b + 1].max(axis=1).sum()
            self.k_path[i] += dk[:, a:b + 1].max(axis=1).sum()
        self.count += int(v.sum())

    def result(self) -> ErrorRecord:
        if self.count < MIN_PATHS:
            raise ValueError(f"only {self.count} valid paths; need at least {MIN_PATHS}")
        c = self.count
        return ErrorRecord(float(self.y_sq.max() / c), float(self.y_path.max() / c), self.z_int / c,
                           float(self.k_path.max() / c), float(self.k_abs.max() / c), c)


def error_metrics(processes: PathProcesses, partition: Optional[Partition] = None) -> ErrorRecord:
    """Monte-Carlo estimates of the Y, Z and K error functionals on the internal grid."""
    acc = ErrorAccumulator(processes.times, processes.date_index)
    acc.add(processes)
    return acc.result()


def fit_rate(meshes: Sequence[float], errors: Sequence[float], min_points: int = 4) -> float:
    """Least-squares slope of ``log(error)`` against ``log(mesh)``."""
    h = np.asarray(meshes, dtype=float)
    e = np.asarray(errors, dtype=float)
    keep = e > 0
    if not np.all(keep):
        warnings.warn(f"dropping {int((~keep).sum())} nonpositive error values from the rate fit")
    h, e = h[keep], e[keep]
    if len(h) < min_points:
        raise ValueError(f"need at least {min_points} positive points for a rate fit, have {len(h)}")
    slope, _ = np.polyfit(np.log(h), np.log(e), 1)
    return float(slope)


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepConfig:
    ns: tuple = (2, 4, 8, 16, 32, 64)
    substeps: int = 4096
    M: int = 10_000
    seed: int = 2024
    theta: float = 0.5
    sweeps: int = 2
    z_cap_factor: float = 1.5
    proof_constant: float = 1.0
    R: Optional[float] = None
    dx: Optional[float] = None
    Nx: Optional[int] = None
    eps: float = 1e-6
    z_eps: float = 1e-3

    def __post_init__(self):
        ns = tuple(sorted(int(n) for n in self.ns))
        object.__setattr__(self, "ns", ns)
        if any(n < 1 for n in ns):
            raise ValueError("sweep entries must be positive")
        if self.substeps < 16 * ns[-1]:
            raise ValueError(f"reference needs >= 16x the largest n ({16 * ns[-1]} substeps), got {self.substeps}")
        if self.substeps % ns[-1]:
            warnings.warn("largest n does not divide the substep count; partitions are snapped")


@dataclass
class SweepRow:
    n: int
    mesh: float
    err_y_sup_sq: float
    err_y_pathsup_sq: float
    err_z_l2_sq: float
    err_k_sup: float
    seconds: float
    err_k_normalized: float = 0.0
    checks: Dict[str, object] = field(default_factory=dict)


@dataclass
class ConvergenceReport:
    problem: str
    regularity: str
    rows: List[SweepRow]
    slopes: Dict[str, float]
    theory: Dict[str, float]
    reference: Dict[str, object]
    config: Dict[str, object]

    COLUMNS = ("n", "mesh", "err_y_sup_sq", "err_y_pathsup_sq", "err_z_l2_sq", "err_k_sup", "seconds")

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows])

    def to_csv(self, fh) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for r in self.rows:
            w.writerow([r.n] + [repr(float(getattr(r, c))) for c in self.COLUMNS[1:]])

    def summary(self) -> dict:
        return {
            "problem": self.problem,
            "regularity": self.regularity,
            "slopes": self.slopes,
            "theoretical_exponents": self.theory,
            "k_normalized": {str(r.n): r.err_k_normalized for r in self.rows},
            "checks": {str(r.n): r.checks for r in self.rows},
            "reference": self.reference,
            "config": self.config,
        }

    def summary_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True, default=float)


def _bound_checks(problem: Problem, disc: DiscreteSolution, ref: ContinuousReference, cfg: SweepConfig) -> dict:
    """Bound and ordering invariants measured on the solved surfaces."""
    model, driver, obs = problem.model, problem.driver, problem.obstacle
    y_bound = obs.M_g + driver.M_f * problem.T
    max_abs = disc.max_abs()
    y, _ = disc.layers()
    pre = y.copy()
    pre[disc.date_index] = disc.pre_at_dates()
    order_pre_post = float(np.max(pre - y))
    order_post_ref = float(np.max(y - ref.u))
    z_excess = []
    for s in disc.surfaces:
        L = disc.lipschitz[s.interval]
        span = s.times[-1] - s.times[0]
        bound = z_bound(model, driver, L, span)
        zmax = max(float(np.max(np.abs(zrow))) * model.sigma_norm(t) for t, zrow in zip(s.times, s.zmag))
        z_excess.append(zmax - bound)
    return {
        "max_abs_u": max_abs,
        "y_bound": y_bound,
        "y_bound_ok": bool(max_abs <= y_bound + cfg.eps),
        "pre_minus_post_max": order_pre_post,
        "post_minus_ref_max": order_post_ref,
        "ordering_ok": bool(order_pre_post <= cfg.eps and order_post_ref <= cfg.eps),
        "z_bound_excess_max": float(max(z_excess)),
        "z_bound_ok": bool(max(z_excess) <= cfg.z_eps),
        "lipschitz": [float(v) for v in disc.lipschitz],
    }


def _chunks(M):
    return [(lo, min(lo + CHUNK, M)) for lo in range(0, M, CHUNK)]


def path_errors(problem: Problem, disc: DiscreteSolution, ref: ContinuousReference, M: int, seed: int,
                threads: Optional[int] = None):
    """Accumulate the error record and flat-off sums chunk by chunk over ``M`` shared paths."""
    threads = thread_count() if threads is None else threads
    times = disc.times

    def work(bnd):
        lo, hi = bnd
        batch = simulate(problem.model, times, hi - lo, seed, start=lo, threads=1)
        interp = Interpolator(disc.grid, batch.states)
        refv = reference_along_paths(ref, batch, interp)
        p = evaluate_along_paths(disc, ref, batch, problem.model, refv, interp, exit_limit=1.0)
        acc = ErrorAccumulator(times, disc.date_index)
        acc.add(p)
        return acc, flatoff_terms(p, problem.obstacle), int((~p.valid).sum())

    bounds = _chunks(M)
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            parts = list(ex.map(work, bounds))
    else:
        parts = [work(b) for b in bounds]
    total = ErrorAccumulator(times, disc.date_index)
    flat = []
    exits = 0
    for acc, fo, ex_ in parts:
        total.y_sq += acc.y_sq
        total.y_path += acc.y_path
        total.k_path += acc.k_path
        total.k_abs += acc.k_abs
        total.z_int += acc.z_int
        total.count += acc.count
        flat.append(fo)
        exits += ex_
    if exits / M > EXIT_LIMIT:
        raise RuntimeError(f"{exits / M:.3%} of paths left the space grid (limit {EXIT_LIMIT:.1%})")
    return total.result(), float(np.mean(np.concatenate(flat))), exits / M


def run_sweep(problem: Problem, cfg: SweepConfig = SweepConfig(), grid: Optional[SpaceGrid] = None,
              ref: Optional[ContinuousReference] = None, progress=None) -> ConvergenceReport:
    """Solve the reference once, then every partition in the sweep on shared paths and grid."""
    grid = SpaceGrid.default(problem.model, problem.T, cfg.R, cfg.dx, cfg.Nx) if grid is None else grid
    t0 = time.perf_counter()
    ref_log = SolverLog()
    if ref is None:
        ref = solve_continuous_reference(problem.model, problem.driver, problem.obstacle, grid, problem.T,
                                         cfg.substeps, cfg.theta, cfg.sweeps, cfg.z_cap_factor,
                                         cfg.proof_constant, ref_log)
    ref_seconds = time.perf_counter() - t0
    x0 = problem.model.x0
    y0_ref = float(np.interp(x0, grid.x, ref.u[0]))
    rows = []
    q = 1.0 if problem.obstacle.regularity == "c2b" else 0.5
    for n in cfg.ns:
        start = time.perf_counter()
        part = Partition.uniform(problem.T, n)
        log = SolverLog()
        disc = solve_discrete(part, problem.model, problem.driver, problem.obstacle, grid, cfg.substeps,
                              cfg.theta, cfg.sweeps, cfg.z_cap_factor, log)
        rec, flat, exit_frac = path_errors(problem, disc, ref, cfg.M, cfg.seed)
        checks = _bound_checks(problem, disc, ref, cfg)
        checks.update({"y0_disc": float(np.interp(x0, grid.x, disc.post[0])), "exit_fraction": exit_frac,
                       "fixed_point": log.as_dict()})
        row = SweepRow(n, disc.partition.mesh, rec.err_y_sup_sq, rec.err_y_pathsup_sq, rec.err_z_l2_sq,
                       rec.err_k_sup, time.perf_counter() - start, checks=checks)
        row.err_k_normalized = rec.err_k_sup / disc.partition.mesh ** (q / 2)
        rows.append(row)
        if progress is not None:
            progress(row)
    slopes = {}
    if len(rows) >= 4:
        mesh = [r.mesh for r in rows]
        for key, col in (("y_sup", "err_y_sup_sq"), ("y_pathsup", "err_y_pathsup_sq"), ("z", "err_z_l2_sq"),
                         ("k", "err_k_sup")):
            try:
                slopes[key] = fit_rate(mesh, [getattr(r, col) for r in rows])
            except ValueError as exc:
                warnings.warn(f"no {key} slope: {exc}")
                slopes[key] = None
    reference = {"y0": y0_ref, "seconds": ref_seconds, "substeps": cfg.substeps, "grid": asdict(grid),
                 "fixed_point": ref_log.as_dict(),
                 "min_gap_to_obstacle": float(np.min(ref.u - problem.obstacle(grid.x)[None, :]))}
    theory = THEORY[problem.obstacle.regularity]
    return ConvergenceReport(problem.name, problem.obstacle.regularity, rows, slopes,
                             {"y": theory["y"], "z": theory["z"], "k": theory["k"]}, reference,
                             {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(cfg).items()})
