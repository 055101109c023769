"""Closed-form and independent reference values, and the built-in oracle table."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .forward import gauss_hermite_expectation, gaussian_terminal_law, simulate
from .model import Partition, admissible_sequence, gronwall_bound, lipschitz_bound, lipschitz_recursion_step
from .pde import SpaceGrid, solve_interval
from .presets import american_oracle, colehopf_oracle, heat_oracle
from .reflected import evaluate_along_paths, flatoff_residual, solve_continuous_reference, solve_discrete


def heat_value(t: float, x, T: float = 1.0):
    """``E[cos(x + B_{T-t})] = exp(-(T-t)/2) cos(x)``."""
    return math.exp(-(T - t) / 2) * np.cos(x)


def colehopf_value(g, x: float, var: float, alpha: float = 1.0, nodes: int = 200) -> float:
    """``-(1/alpha) log E[exp(-alpha g(x + N(0, var)))]``."""
    return -math.log(gauss_hermite_expectation(lambda y: np.exp(-alpha * g(y)), x, var, nodes)) / alpha


def binomial_american(g, x0: float, T: float, sigma: float, steps: int = 2000) -> float:
    """American value ``sup_tau E[g(x0 + sigma B_tau)]`` on a symmetric random-walk tree."""
    h = sigma * math.sqrt(T / steps)
    v = g(x0 + h * np.arange(-steps, steps + 1, 2))
    for k in range(steps - 1, -1, -1):
        v = np.maximum(0.5 * (v[1:] + v[:-1]), g(x0 + h * np.arange(-k, k + 1, 2)))
    return float(v[0])


@dataclass
class OracleRow:
    name: str
    value: float
    target: float
    tol: float
    passed: bool
    seconds: float


def _row(name, value, target, tol, start, ok=None):
    passed = abs(value - target) <= tol if ok is None else ok
    return OracleRow(name, float(value), float(target), float(tol), bool(passed), time.perf_counter() - start)


def oracle_table(substeps: int = 4096, seed: int = 7) -> list:
    rows = []

    s = time.perf_counter()
    p = heat_oracle()
    grid = SpaceGrid.default(p.model, p.T)
    surf = solve_interval(p.obstacle, 0.0, p.T, p.model, p.driver, grid, substeps)
    rows.append(_row("O-heat Y0", np.interp(0.0, grid.x, surf.u[0]), heat_value(0, 0.0), 1e-3, s))

    s = time.perf_counter()
    p = colehopf_oracle()
    surf = solve_interval(p.obstacle, 0.0, p.T, p.model, p.driver, grid, substeps)
    mean, var = gaussian_terminal_law(p.model, 0.0, 0.0, p.T)
    rows.append(_row("O-colehopf Y0", np.interp(0.0, grid.x, surf.u[0]), colehopf_value(np.cos, mean, var),
                     1e-3, s))

    s = time.perf_counter()
    p = american_oracle()
    grid = SpaceGrid.default(p.model, p.T)
    ref = solve_continuous_reference(p.model, p.driver, p.obstacle, grid, p.T, substeps)
    x0 = p.model.x0
    rows.append(_row("O-american Y0", np.interp(x0, grid.x, ref.u[0]),
                     binomial_american(p.obstacle, x0, p.T, 1.0), 5e-3, s))

    s = time.perf_counter()
    one = solve_discrete(Partition.uniform(p.T, 1), p.model, p.driver, p.obstacle, grid, substeps)
    plain = solve_interval(p.obstacle, 0.0, p.T, p.model, p.driver, grid, substeps, times=one.times,
                           z_cap=one_cap(p, grid))
    expect = np.maximum(plain.u[0], p.obstacle(grid.x))
    rows.append(_row("n=1 identity", float(np.max(np.abs(one.post[0] - expect))), 0.0, 1e-12, s))

    s = time.perf_counter()
    worst_order, worst_bound = -math.inf, -math.inf
    for n in (1, 4, 16):
        d = solve_discrete(Partition.uniform(p.T, n), p.model, p.driver, p.obstacle, grid, substeps)
        y, _ = d.layers()
        worst_order = max(worst_order, float(np.max(y - ref.u)))
        worst_bound = max(worst_bound, d.max_abs() - (p.obstacle.M_g + p.driver.M_f * p.T))
    rows.append(_row("ordering disc <= ref", worst_order, 0.0, 1e-6, s, ok=worst_order <= 1e-6))
    rows.append(_row("|u| <= M_g + M_f T", worst_bound, 0.0, 1e-6, s, ok=worst_bound <= 1e-6))

    s = time.perf_counter()
    batch = simulate(p.model, ref.times, 2000, seed)
    proc = evaluate_along_paths(d, ref, batch, p.model)
    fo = flatoff_residual(proc, p.obstacle)
    rows.append(_row("flat-off residual", fo, 0.0, 1e-3, s, ok=fo <= 1e-3))

    s = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = -math.inf
    for _ in range(1000):
        n = int(rng.integers(1, 40))
        gaps = rng.dirichlet(np.ones(n)) * rng.uniform(0.1, 3.0)
        C = rng.uniform(0, 3)
        b = rng.uniform(0, 1, n)
        a = admissible_sequence(rng, gaps, C, rng.uniform(0, 2), b)
        worst = max(worst, float(np.max(a) - gronwall_bound(C, gaps.sum(), a[-1], b.sum())))
    rows.append(_row("Gronwall dominance (1000 draws)", worst, 0.0, 0.0, s, ok=worst <= 1e-12))

    s = time.perf_counter()
    worst = -math.inf
    for n in (1, 4, 16, 64, 256):
        L = Kg = 1.0
        for _ in range(n):
            L = lipschitz_recursion_step(L, 1.0 / n, 1.0, 1.0, Kg)
        worst = max(worst, L - lipschitz_bound(1.0, 1.0, Kg, 1.0))
    rows.append(_row("Lipschitz recursion <= bound", worst, 0.0, 0.0, s, ok=worst <= 1e-12))
    return rows


def one_cap(problem, grid):
    from .model import measured_lipschitz, z_bound

    return 1.5 * z_bound(problem.model, problem.driver, measured_lipschitz(problem.obstacle(grid.x), grid.dx),
                         problem.T)


def format_table(rows) -> str:
    lines = [f"{'check':34s} {'value':>14s} {'target':>14s} {'tol':>9s} {'sec':>6s}  verdict"]
    for r in rows:
        lines.append(f"{r.name:34s} {r.value:14.8g} {r.target:14.8g} {r.tol:9.2g} {r.seconds:6.1f}  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
