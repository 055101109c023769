"""Command line entry point: ``qrbsde {solve,converge,oracle,simulate}``.

Exit codes: 0 ok, 1 numerical failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .convergence import SweepConfig, _bound_checks, run_sweep
from .forward import SimulationError, simulate, thread_count, write_paths_csv
from .model import ModelError, Partition, lipschitz_bound, lipschitz_constants, optimal_strategy, \
    theoretical_bounds, z_bound
from .oracles import format_table, oracle_table
from .pde import SolverError, SolverLog, SpaceGrid, ValueSurface, solve_interval, write_surfaces_csv
from .presets import PRESETS, ConfigError, Problem, load_config, problem_from_dict
from .reflected import evaluate_along_paths, flatoff_residual, solve_continuous_reference, solve_discrete, \
    time_grid, write_processes_csv
from .valuation import exercise_region, stopped_payoff, strategy_path, value_function

COMMANDS = ("solve", "converge", "oracle", "simulate")
_POSITIVE = ("n", "M", "substeps", "delta", "dx", "R", "Nx", "sweeps", "z_cap_factor", "eps", "z_eps",
             "contact_tol", "fp_tol", "stride", "proof_constant")


@dataclass(frozen=True)
class RunConfig:
    preset: str = "sf-example"
    obstacle: Optional[str] = None
    n: Optional[int] = None
    sweep: tuple = (2, 4, 8, 16, 32, 64)
    M: Optional[int] = None
    seed: int = 2024
    substeps: int = 4096
    delta: Optional[float] = None
    dx: Optional[float] = None
    R: Optional[float] = None
    Nx: Optional[int] = None
    theta: float = 0.5
    sweeps: int = 2
    z_cap_factor: float = 1.5
    proof_constant: float = 1.0
    eps: float = 1e-6
    z_eps: float = 1e-3
    contact_tol: Optional[float] = None
    fp_tol: float = 1e-5
    stride: int = 64
    wealth: float = 0.0

    def __post_init__(self):
        for key in _POSITIVE:
            v = getattr(self, key)
            if v is not None and not (isinstance(v, (int, float)) and v > 0 and math.isfinite(v)):
                raise ConfigError(key, f"must be positive, got {v!r}")
        if not 0.5 <= self.theta <= 1.0:
            raise ConfigError("theta", f"must lie in [0.5, 1], got {self.theta!r}")
        try:
            sweep = tuple(int(v) for v in self.sweep)
        except (TypeError, ValueError):
            raise ConfigError("sweep", f"expected a list of integers, got {self.sweep!r}") from None
        if not sweep or any(v < 1 for v in sweep) or len(set(sweep)) != len(sweep):
            raise ConfigError("sweep", f"entries must be distinct positive integers, got {list(sweep)}")
        object.__setattr__(self, "sweep", tuple(sorted(sweep)))

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        extra = set(data) - known
        if extra:
            raise ConfigError(sorted(extra)[0], f"unknown run setting; known: {', '.join(sorted(known))}")
        data = dict(data)
        if "sweep" in data and isinstance(data["sweep"], str):
            data["sweep"] = _int_list(data["sweep"])
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError("run", str(exc)) from None

    def as_dict(self) -> dict:
        d = asdict(self)
        d["sweep"] = list(self.sweep)
        return d

    def steps(self, T: float) -> int:
        if self.delta is None:
            return self.substeps
        k = T / self.delta
        if abs(k - round(k)) > 1e-9 * k:
            raise ConfigError("delta", f"T/delta = {k:.6g} is not an integer")
        return int(round(k))


def _int_list(text: str):
    try:
        return [int(v) for v in text.replace(" ", "").split(",") if v]
    except ValueError:
        raise ConfigError("sweep", f"expected comma-separated integers, got {text!r}") from None


# ---------------------------------------------------------------------------
# argument handling


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="qrbsde", description="Discretely reflected quadratic BSDE solver.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--out", type=Path, help="output directory")
        if name == "oracle":
            p.add_argument("--substeps", type=int)
            p.add_argument("--seed", type=int)
            continue
        p.add_argument("--preset", help=f"built-in problem ({', '.join(sorted(PRESETS))})")
        p.add_argument("--config", type=Path, help="YAML or JSON problem file")
        p.add_argument("--manifest", type=Path, help="rerun the settings recorded in a manifest")
        p.add_argument("--obstacle", help="obstacle kind (lipschitz, c2b, tent, bump, cos, constant)")
        p.add_argument("--seed", type=int)
        p.add_argument("--substeps", type=int, help="internal time steps on [0, T]")
        p.add_argument("--delta", type=float, help="internal time step (sets substeps = T/delta)")
        p.add_argument("--dx", type=float)
        p.add_argument("--R", type=float, help="half-width of the space grid")
        p.add_argument("--Nx", type=int, help="number of space nodes")
        p.add_argument("--theta", type=float)
        p.add_argument("--sweeps", type=int, help="fixed-point sweeps per step")
        p.add_argument("--fp-tol", dest="fp_tol", type=float)
        p.add_argument("--eps", type=float, help="tolerance of the ordering and y-bound checks")
        p.add_argument("--z-eps", dest="z_eps", type=float, help="tolerance of the z-bound check")
        if name in ("solve", "simulate"):
            p.add_argument("--n", type=int, help="number of exercise intervals")
        if name in ("converge", "simulate"):
            p.add_argument("--M", type=int, help="number of paths")
        if name == "converge":
            p.add_argument("--sweep", help="comma-separated list of n")
        if name == "solve":
            p.add_argument("--stride", type=int, help="write every stride-th time layer")
            p.add_argument("--contact-tol", dest="contact_tol", type=float)
            p.add_argument("--wealth", type=float, help="initial wealth for the value function")
    return ap


def resolve(args) -> tuple:
    """Merge defaults, manifest, config file and flags (flags win); returns ``(run, problem, cfg)``."""
    settings, cfg = {}, {}
    if getattr(args, "manifest", None) is not None:
        try:
            man = json.loads(Path(args.manifest).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError("manifest", f"cannot read {args.manifest}: {exc}") from None
        if man.get("command") != args.command:
            raise ConfigError("manifest", f"recorded command is {man.get('command')!r}, not {args.command!r}")
        settings.update(man.get("run") or {})
        cfg = dict(man.get("config") or {})
    if getattr(args, "config", None) is not None:
        try:
            cfg = load_config(args.config)
        except OSError as exc:
            raise ConfigError("config", str(exc)) from None
        settings.update(cfg.pop("run", None) or {})
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            settings[f.name] = _int_list(v) if f.name == "sweep" else v
    if args.command == "simulate":
        settings.setdefault("n", 8)
        settings.setdefault("M", 10)
    if args.command == "converge":
        settings.setdefault("M", 10_000)
    run = RunConfig.from_dict(settings)
    if getattr(args, "preset", None) is not None:
        cfg["preset"] = args.preset
    elif "preset" not in cfg and not {"forward", "driver", "obstacle"} <= set(cfg):
        cfg["preset"] = run.preset
    if run.obstacle is not None:
        cfg["obstacle"] = {"kind": run.obstacle}
    if "preset" in cfg:
        run = replace(run, preset=cfg["preset"])
    problem = problem_from_dict(cfg)
    return run, problem, cfg


def config_hash(command: str, run: RunConfig, cfg: dict) -> str:
    blob = json.dumps({"command": command, "run": run.as_dict(), "config": cfg}, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def _grid(run: RunConfig, problem: Problem) -> SpaceGrid:
    grid = SpaceGrid.default(problem.model, problem.T, run.R, run.dx, run.Nx)
    if not grid.contains(problem.model.x0):
        raise ConfigError("R", "space grid does not contain x0")
    return grid


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, run: RunConfig, cfg: dict, problem: Optional[Problem],
                   extra: dict, files) -> Path:
    man = {
        "command": command,
        "version": __version__,
        "config_hash": config_hash(command, run, cfg),
        "seed": run.seed,
        "run": run.as_dict(),
        "config": cfg,
        "problem": problem.describe() if problem is not None else None,
        "threads": thread_count(),
        "files": {name: _file_digest(out / name) for name in files},
    }
    man.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(man, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.bool_,)):
        return bool(v)
    return str(v)


def _strided(surface: ValueSurface, stride: int, keep=()) -> ValueSurface:
    L = surface.layers
    rows = sorted(set(range(0, L, stride)) | {L - 1} | {k for k in keep if 0 <= k < L})
    return replace(surface, times=surface.times[rows], u=surface.u[rows], zmag=surface.zmag[rows])


def _progress(row):
    print(f"  n={row.n:4d}  errY={row.err_y_pathsup_sq:.3e}  errZ={row.err_z_l2_sq:.3e}  "
          f"errK={row.err_k_sup:.3e}  ({row.seconds:.1f}s)", file=sys.stderr)


def _reference_checks(problem: Problem, ref, run: RunConfig, grid: SpaceGrid) -> dict:
    K1, K2 = lipschitz_constants(problem.model, problem.T, run.proof_constant)
    L = lipschitz_bound(K1, K2, problem.obstacle.K_g, problem.T)
    zb = z_bound(problem.model, problem.driver, L, problem.T)
    zmax = max(float(np.max(np.abs(z))) * problem.model.sigma_norm(t) for t, z in zip(ref.times, ref.zmag))
    y_bound = problem.obstacle.M_g + problem.driver.M_f * problem.T
    max_abs = float(np.max(np.abs(ref.u)))
    return {"max_abs_u": max_abs, "y_bound": y_bound, "y_bound_ok": bool(max_abs <= y_bound + run.eps),
            "z_max": zmax, "z_bound": zb, "z_bound_ok": bool(zmax <= zb + run.z_eps)}


def _check_n(n: int, K: int) -> None:
    if n > K:
        raise ConfigError("n", f"n={n} exceeds the internal grid ({K} steps)")


# ---------------------------------------------------------------------------
# commands


def cmd_solve(run: RunConfig, problem: Problem, cfg: dict, out: Path) -> dict:
    grid = _grid(run, problem)
    K = run.steps(problem.T)
    x0 = problem.model.x0
    files = []
    ref_log, plain_log = SolverLog(run.fp_tol), SolverLog(run.fp_tol)
    plain = solve_interval(problem.obstacle, 0.0, problem.T, problem.model, problem.driver, grid, K,
                           z_cap=run.z_cap_factor * z_bound(problem.model, problem.driver,
                                                            problem.obstacle.K_g, problem.T),
                           theta=run.theta, sweeps=run.sweeps, log=plain_log, times=time_grid(problem.T, K))
    y0_plain = float(np.interp(x0, grid.x, plain.u[0]))
    results = {"x0": x0, "y0_plain": y0_plain, "grid": asdict(grid), "substeps": K}
    extra = {"grid": asdict(grid), "substeps": K,
             "theoretical_bounds": theoretical_bounds(problem.model, problem.driver, problem.obstacle, problem.T,
                                                      run.proof_constant).as_dict()}
    zmag0 = float(np.interp(x0, grid.x, plain.zmag[0]))
    if problem.reflected:
        ref = solve_continuous_reference(problem.model, problem.driver, problem.obstacle, grid, problem.T, K,
                                         run.theta, run.sweeps, run.z_cap_factor, run.proof_constant, ref_log)
        y0 = float(np.interp(x0, grid.x, ref.u[0]))
        zmag0 = float(np.interp(x0, grid.x, ref.zmag[0]))
        region = exercise_region(ref, problem.obstacle, run.contact_tol)
        with open(out / "reference_surface.csv", "w") as fh:
            write_surfaces_csv(fh, [_strided(ref.surface(), run.stride)])
        stride_rows = sorted(set(range(0, K + 1, run.stride)) | {K})
        with open(out / "exercise_region.csv", "w") as fh:
            replace(region, times=region.times[stride_rows], gap=region.gap[stride_rows]).to_csv(fh)
        files += ["reference_surface.csv", "exercise_region.csv"]
        contact0 = bool(np.interp(x0, grid.x, region.gap[0]) <= region.tol)
        results.update({"y0_reference": y0, "contact_tol": region.tol, "x0_in_exercise_region": contact0})
        extra["reference_checks"] = _reference_checks(problem, ref, run, grid)
        extra["reference_solver"] = ref_log.as_dict()
    else:
        y0, contact0 = y0_plain, False
        with open(out / "surface.csv", "w") as fh:
            write_surfaces_csv(fh, [_strided(plain, run.stride)])
        files.append("surface.csv")
    extra["plain_solver"] = plain_log.as_dict()

    if run.n is not None:
        _check_n(run.n, K)
        log = SolverLog(run.fp_tol)
        disc = solve_discrete(Partition.uniform(problem.T, run.n), problem.model, problem.driver,
                              problem.obstacle, grid, K, run.theta, run.sweeps, run.z_cap_factor, log)
        with open(out / "discrete_surfaces.csv", "w") as fh:
            write_surfaces_csv(fh, [_strided(s, run.stride) for s in disc.surfaces])
        files.append("discrete_surfaces.csv")
        y0_disc = float(np.interp(x0, grid.x, disc.post[0]))
        results["y0_discrete"] = y0_disc
        if not problem.reflected:
            ref = solve_continuous_reference(problem.model, problem.driver, problem.obstacle, grid, problem.T,
                                             K, run.theta, run.sweeps, run.z_cap_factor, run.proof_constant,
                                             ref_log)
        checks = _bound_checks(problem, disc, ref, SweepConfig(ns=(run.n,), substeps=max(K, 16 * run.n),
                                                                eps=run.eps, z_eps=run.z_eps))
        extra["lipschitz_sequence"] = checks["lipschitz"]
        extra["bound_checks"] = checks
        extra["z_bound_check"] = {"verdict": "pass" if checks["z_bound_ok"] else "fail",
                                  "excess_max": checks["z_bound_excess_max"], "tolerance": run.z_eps}
        extra["discrete_solver"] = log.as_dict()

    results["y0"] = y0
    results["value"] = value_function(problem.driver.alpha, run.wealth, y0)
    results["wealth"] = run.wealth
    pi0 = None
    if problem.market is not None:
        z0 = zmag0 * problem.model.sigma_vec(0.0)
        try:
            pi0 = 0.0 if contact0 else float(np.ravel(optimal_strategy(problem.market, 0.0, np.array([x0]),
                                                                        z0[None, :]))[0])
        except ValueError:
            pi0 = None
    results["pi0"] = pi0
    (out / "y0.txt").write_text(repr(y0) + "\n")
    (out / "results.json").write_text(json.dumps(results, indent=2, sort_keys=True, default=_json_default) + "\n")
    files += ["y0.txt", "results.json"]
    extra["results"] = results
    write_manifest(out, "solve", run, cfg, problem, extra, files)
    print(f"Y0 = {y0!r}")
    return results


def cmd_converge(run: RunConfig, problem: Problem, cfg: dict, out: Path) -> dict:
    if not problem.reflected:
        problem = replace(problem, reflected=True)
    K = run.steps(problem.T)
    try:
        scfg = SweepConfig(ns=run.sweep, substeps=K, M=run.M, seed=run.seed, theta=run.theta, sweeps=run.sweeps,
                           z_cap_factor=run.z_cap_factor, proof_constant=run.proof_constant, R=run.R, dx=run.dx,
                           Nx=run.Nx, eps=run.eps, z_eps=run.z_eps)
    except ValueError as exc:
        raise ConfigError("sweep", str(exc)) from None
    report = run_sweep(problem, scfg, _grid(run, problem), progress=_progress)
    with open(out / "report.csv", "w") as fh:
        report.to_csv(fh)
    (out / "summary.json").write_text(report.summary_json() + "\n")
    verdict = all(r.checks["z_bound_ok"] and r.checks["ordering_ok"] and r.checks["y_bound_ok"]
                  for r in report.rows)
    extra = {"slopes": report.slopes, "theoretical_exponents": report.theory,
             "bound_checks_verdict": "pass" if verdict else "fail",
             "lipschitz_sequences": {str(r.n): r.checks["lipschitz"] for r in report.rows}}
    write_manifest(out, "converge", run, cfg, problem, extra, ["report.csv", "summary.json"])
    for k, v in report.slopes.items():
        print(f"slope {k:10s} {v:.4f}")
    return report.summary()


def cmd_simulate(run: RunConfig, problem: Problem, cfg: dict, out: Path) -> dict:
    grid = _grid(run, problem)
    K = run.steps(problem.T)
    _check_n(run.n, K)
    ref = solve_continuous_reference(problem.model, problem.driver, problem.obstacle, grid, problem.T, K,
                                     run.theta, run.sweeps, run.z_cap_factor, run.proof_constant,
                                     SolverLog(run.fp_tol))
    disc = solve_discrete(Partition.uniform(problem.T, run.n), problem.model, problem.driver, problem.obstacle,
                          grid, K, run.theta, run.sweeps, run.z_cap_factor, SolverLog(run.fp_tol))
    batch = simulate(problem.model, ref.times, run.M, run.seed)
    proc = evaluate_along_paths(disc, ref, batch, problem.model)
    with open(out / "paths.csv", "w") as fh:
        write_paths_csv(fh, batch)
    with open(out / "processes.csv", "w") as fh:
        write_processes_csv(fh, proc)
    files = ["paths.csv", "processes.csv"]
    region = exercise_region(ref, problem.obstacle, run.contact_tol)
    stop = region.hitting_index(batch.states)
    payoff = stopped_payoff(region, batch, problem.obstacle)
    with open(out / "stopping.csv", "w") as fh:
        fh.write("path_id,stop_time,payoff\n")
        for pid, k, v in zip(batch.path_ids, stop, payoff):
            fh.write(f"{int(pid)},{float(ref.times[k])!r},{float(v)!r}\n")
    files.append("stopping.csv")
    if problem.market is not None:
        strat = strategy_path(problem.market, proc, problem.model.sigma_vec, stop)
        with open(out / "strategy.csv", "w") as fh:
            strat.to_csv(fh)
        files.append("strategy.csv")
    extra = {"grid": asdict(grid), "substeps": K, "exit_fraction": proc.exit_fraction,
             "flatoff_residual": flatoff_residual(proc, problem.obstacle),
             "lipschitz_sequence": [float(v) for v in disc.lipschitz]}
    write_manifest(out, "simulate", run, cfg, problem, extra, files)
    print(f"wrote {run.M} paths to {out}")
    return extra


def cmd_oracle(args, out: Optional[Path]) -> int:
    rows = oracle_table(substeps=args.substeps or 4096, seed=7 if args.seed is None else args.seed)
    print(format_table(rows))
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "oracle.csv", "w") as fh:
            fh.write("check,value,target,tol,passed\n")
            for r in rows:
                fh.write(f"{r.name},{r.value!r},{r.target!r},{r.tol!r},{int(r.passed)}\n")
        run = RunConfig(substeps=args.substeps or 4096, seed=7 if args.seed is None else args.seed)
        write_manifest(out, "oracle", run, {}, None, {}, ["oracle.csv"])
    return 0 if all(r.passed for r in rows) else 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = args.out
    try:
        if args.command == "oracle":
            return cmd_oracle(args, out)
        run, problem, cfg = resolve(args)
        out = Path("out") / args.command if out is None else out
        out.mkdir(parents=True, exist_ok=True)
        {"solve": cmd_solve, "converge": cmd_converge, "simulate": cmd_simulate}[args.command](
            run, problem, cfg, out)
        return 0
    except (ConfigError, ModelError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (SolverError, SimulationError, ArithmeticError, RuntimeError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
