"""Euler simulation of the forward state with per-path counter-based streams."""

from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .model import ForwardModel

CHUNK = 256


class SimulationError(RuntimeError):
    pass


def thread_count() -> int:
    """Parallelism cap from ``QRBSDE_THREADS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("QRBSDE_THREADS", "1")))
    except ValueError:
        return 1


def path_stream(seed: int, path_index: int) -> np.random.Generator:
    """Independent Philox stream keyed by ``(seed, path_index)``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(path_index),))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class PathBatch:
    """Paths ``start, ..., start + M - 1`` of the stream family ``seed``."""

    seed: int
    times: np.ndarray
    states: np.ndarray
    increments: np.ndarray
    start: int = 0

    @property
    def M(self) -> int:
        return self.states.shape[0]

    @property
    def path_ids(self) -> np.ndarray:
        return np.arange(self.start, self.start + self.M)

    def to_csv(self, fh) -> None:
        write_paths_csv(fh, self)


def _increments(seed, first, count, substeps, dts, m):
    out = np.empty((count, substeps, m))
    sq = np.sqrt(dts)[:, None]
    for k in range(count):
        out[k] = path_stream(seed, first + k).standard_normal((substeps, m)) * sq
    return out


def _euler(model: ForwardModel, times, dB):
    M, K, _ = dB.shape
    states = np.empty((M, K + 1))
    states[:, 0] = model.x0
    dts = np.diff(times)
    for k in range(K):
        t = times[k]
        x = states[:, k]
        b = model.drift(t, x)
        step = x + b * dts[k] + dB[:, k, :] @ model.sigma_vec(t)
        if not np.all(np.isfinite(step)):
            bad = int(np.flatnonzero(~np.isfinite(step))[0])
            raise SimulationError(f"non-finite state at t={t:.6g}, path offset {bad}, x={x[bad]!r}, b={b[bad]!r}")
        states[:, k + 1] = step
    return states


def simulate(model: ForwardModel, grid, M: int, seed: int, start: int = 0, threads: int | None = None) -> PathBatch:
    """Simulate ``M`` Euler paths on the time grid ``grid``.

    Path ``i`` depends only on ``(seed, start + i)``, so any chunking or
    thread count gives bit-identical output.
    """
    times = np.asarray(grid, dtype=float)
    if M < 1:
        raise ValueError("M must be >= 1")
    if times.ndim != 1 or len(times) < 2 or np.any(np.diff(times) <= 0):
        raise ValueError("time grid must be strictly increasing")
    K = len(times) - 1
    dts = np.diff(times)
    m = model.m
    threads = thread_count() if threads is None else threads

    bounds = [(lo, min(lo + CHUNK, M)) for lo in range(0, M, CHUNK)]

    def work(bnd):
        lo, hi = bnd
        dB = _increments(seed, start + lo, hi - lo, K, dts, m)
        return _euler(model, times, dB), dB

    if threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(threads) as ex:
            parts = list(ex.map(work, bounds))
    else:
        parts = [work(b) for b in bounds]
    states = np.concatenate([p[0] for p in parts])
    dB = np.concatenate([p[1] for p in parts])
    return PathBatch(int(seed), times, states, dB, start)


def gaussian_terminal_law(model: ForwardModel, t: float, x: float, T: float):
    """Exact ``(mean, variance)`` of ``X_T`` given ``X_t = x`` when b == 0 and sigma is constant."""
    if not model.is_driftless_constant:
        raise ValueError("gaussian_terminal_law needs b == 0 and a constant diffusion row")
    return float(x), model.sigma_norm(t) ** 2 * (T - t)


def gauss_hermite_expectation(fn, mean: float, var: float, nodes: int = 200) -> float:
    """``E[fn(N(mean, var))]`` by probabilists' Gauss-Hermite quadrature."""
    xs, ws = np.polynomial.hermite_e.hermegauss(nodes)
    return float(np.sum(ws * fn(mean + np.sqrt(var) * xs)) / np.sqrt(2 * np.pi))


def write_paths_csv(fh, batch: PathBatch) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["path_id", "time", "state"])
    for pid, row in zip(batch.path_ids, batch.states):
        for t, x in zip(batch.times, row):
            w.writerow([int(pid), repr(float(t)), repr(float(x))])


def paths_csv_text(batch: PathBatch) -> str:
    buf = io.StringIO()
    write_paths_csv(buf, batch)
    return buf.getvalue()
