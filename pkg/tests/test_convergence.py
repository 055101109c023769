import io
import json
import warnings

import numpy as np
import pytest

from qrbsde.convergence import (MIN_PATHS, ConvergenceReport, ErrorAccumulator, SweepConfig, error_metrics,
                                fit_rate, path_errors, run_sweep)
from qrbsde.model import Partition
from qrbsde.pde import SpaceGrid
from qrbsde.presets import american_oracle, constant_obstacle, sf_example
from qrbsde.reflected import PathProcesses, solve_continuous_reference, solve_discrete


def processes(times, date_index, yd, zd, kd, yr, zr, kr, sig=None):
    C, L = yd.shape
    sig = np.ones(L) if sig is None else sig
    return PathProcesses(np.arange(C), np.asarray(times), np.zeros((C, L)), np.ones(C, dtype=bool),
                         np.asarray(date_index), sig, yd, zd, kd, yr, zr, kr)


def test_identical_inputs_zero(rng):
    y, z, k = rng.normal(size=(3, 150, 5))
    p = processes(np.linspace(0, 1, 5), [0, 2, 4], y, z, k, y, z, k)
    rec = error_metrics(p)
    assert (rec.err_y_sup_sq, rec.err_y_pathsup_sq, rec.err_z_l2_sq, rec.err_k_sup) == (0, 0, 0, 0)


def test_hand_made_record():
    # two paths on times (0, 0.5, 1), one interval; replicated to satisfy the path minimum
    times, idx = [0.0, 0.5, 1.0], [0, 2]
    yd = np.array([[1.0, 2.0, 0.0], [0.0, 1.0, 3.0]])
    yr = np.zeros((2, 3))
    zd = np.array([[1.0, 1.0, 5.0], [3.0, 0.0, 0.0]])
    zr = np.zeros((2, 3))
    kd = np.array([[0.0, 0.5, 0.5], [0.0, 0.0, 0.0]])
    kr = np.array([[0.0, 0.0, 1.0], [0.0, 0.2, 0.2]])
    sig = np.array([2.0, 2.0, 2.0])
    rep = MIN_PATHS // 2
    p = processes(times, idx, *(np.repeat(a, rep, axis=0) for a in (yd, zd, kd, yr, zr, kr)), sig=sig)
    rec = error_metrics(p, Partition.uniform(1.0, 1))
    # E|dY_t|^2 per time: (0.5, 2.5, 4.5) -> sup 4.5; E sup_t |dY|^2 = (4 + 9)/2
    assert rec.err_y_sup_sq == pytest.approx(4.5)
    assert rec.err_y_pathsup_sq == pytest.approx(6.5)
    # left endpoints only, |sigma|^2 = 4, dt = 0.5: path 1 -> 4*0.5*(1+1) = 4, path 2 -> 4*0.5*9 = 18
    assert rec.err_z_l2_sq == pytest.approx(11.0)
    # sup_t |dK|: path 1 -> 0.5, path 2 -> 0.2
    assert rec.err_k_sup == pytest.approx(0.35)
    assert rec.err_k_pointwise_sup == pytest.approx(0.35)


def test_too_few_paths():
    y = np.zeros((MIN_PATHS - 1, 3))
    with pytest.raises(ValueError, match="valid paths"):
        error_metrics(processes([0, 0.5, 1], [0, 2], y, y, y, y, y, y))


def test_sup_below_pathsup(rng):
    y = rng.normal(size=(200, 9))
    yr = rng.normal(size=(200, 9))
    zero = np.zeros_like(y)
    rec = error_metrics(processes(np.linspace(0, 1, 9), [0, 4, 8], y, zero, zero, yr, zero, zero))
    assert rec.err_y_sup_sq <= rec.err_y_pathsup_sq + 1e-12


def test_accumulator_chunks_add_up(rng):
    y, yr, z, k = rng.normal(size=(4, 300, 5))
    t, idx = np.linspace(0, 1, 5), [0, 2, 4]
    whole = error_metrics(processes(t, idx, y, z, k, yr, 0 * z, 0 * k))
    acc = ErrorAccumulator(t, np.array(idx))
    for lo in range(0, 300, 128):
        sl = slice(lo, lo + 128)
        acc.add(processes(t, idx, y[sl], z[sl], k[sl], yr[sl], 0 * z[sl], 0 * k[sl]))
    part = acc.result()
    assert part.err_y_sup_sq == pytest.approx(whole.err_y_sup_sq, rel=1e-14)
    assert part.err_z_l2_sq == pytest.approx(whole.err_z_l2_sq, rel=1e-14)


def test_fit_rate_synthetic():
    h = 1.0 / np.array([2, 4, 8, 16, 32, 64])
    assert abs(fit_rate(h, h**0.5) - 0.5) < 1e-12
    assert fit_rate(h, 3.0 * h) == pytest.approx(1.0, abs=1e-12)


def test_fit_rate_drops_nonpositive():
    h = 1.0 / np.array([2, 4, 8, 16, 32])
    e = h.copy()
    e[2] = 0.0
    with pytest.warns(UserWarning, match="dropping 1"):
        assert fit_rate(h, e) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            fit_rate(h[:4], np.array([1.0, 0.0, 0.0, 1.0]))


def test_sweep_config_validation():
    assert SweepConfig(ns=(8, 2, 4)).ns == (2, 4, 8)
    with pytest.raises(ValueError, match="16x"):
        SweepConfig(ns=(64,), substeps=512)
    with pytest.raises(ValueError):
        SweepConfig(ns=(0, 2))


def test_discrete_at_reference_resolution():
    p = american_oracle()
    grid = SpaceGrid.default(p.model, p.T)
    K = 256
    ref = solve_continuous_reference(p.model, p.driver, p.obstacle, grid, p.T, K)
    disc = solve_discrete(Partition.uniform(p.T, K), p.model, p.driver, p.obstacle, grid, K)
    coarse = solve_discrete(Partition.uniform(p.T, 2), p.model, p.driver, p.obstacle, grid, K)
    rec, _, _ = path_errors(p, disc, ref, 400, seed=1)
    floor, _, _ = path_errors(p, coarse, ref, 400, seed=1)
    for a, b in ((rec.err_y_sup_sq, floor.err_y_sup_sq), (rec.err_z_l2_sq, floor.err_z_l2_sq),
                 (rec.err_k_sup, floor.err_k_sup)):
        assert a <= 1e-20 and b > 1e-6


def test_single_point_sweep():
    p = american_oracle()
    rep = run_sweep(p, SweepConfig(ns=(4,), substeps=256, M=300, seed=3))
    assert rep.slopes == {}
    assert len(rep.rows) == 1 and rep.rows[0].err_y_sup_sq > 0
    assert rep.rows[0].checks["ordering_ok"] and rep.rows[0].checks["y_bound_ok"]
    assert rep.rows[0].checks["z_bound_ok"]
    buf = io.StringIO()
    rep.to_csv(buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == ",".join(ConvergenceReport.COLUMNS)
    assert lines[1].startswith("4,0.0625,")
    summary = json.loads(rep.summary_json())
    assert summary["theoretical_exponents"] == {"y": 0.5, "z": 0.5, "k": 0.25}


def test_inactive_obstacle_sweep_at_floor():
    # the market generator is positive at z = 0, so Y rises above a constant obstacle away from T
    base = sf_example()
    p = type(base)("inactive", base.model, base.driver, constant_obstacle(0.3), base.T, base.market)
    with pytest.warns(UserWarning):
        rep = run_sweep(p, SweepConfig(ns=(2, 4, 8, 16), substeps=256, M=200, seed=5))
    for r in rep.rows:
        assert r.err_y_pathsup_sq < 1e-20 and r.err_z_l2_sq < 1e-20 and r.err_k_sup < 1e-12
    assert rep.reference["min_gap_to_obstacle"] >= -1e-12


def test_sweep_decreases_and_is_deterministic():
    p = sf_example()
    grid = SpaceGrid.default(p.model, p.T)
    cfg = SweepConfig(ns=(2, 4, 8, 16), substeps=256, M=256, seed=11)
    a = run_sweep(p, cfg, grid)
    b = run_sweep(p, cfg, grid)
    assert set(a.slopes) == {"y_sup", "y_pathsup", "z", "k"}
    ya = a.column("err_y_pathsup_sq")
    assert np.all(ya[1:] <= 1.2 * ya[:-1])
    assert np.array_equal(ya, b.column("err_y_pathsup_sq"))
    assert a.slopes == b.slopes
