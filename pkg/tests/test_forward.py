import io
import math

import numpy as np
import pytest

from qrbsde.forward import (CHUNK, gauss_hermite_expectation, gaussian_terminal_law, paths_csv_text, simulate,
                            write_paths_csv)
from qrbsde.model import ForwardModel
from qrbsde.presets import brownian, stochastic_factor
from qrbsde.reflected import time_grid


def two_dim():
    return ForwardModel(lambda t, x: np.zeros(np.shape(x)), lambda t: np.array([1.0, 0.0]), 0.0, 0.0, 1.0)


def test_brownian_moments():
    M, T = 20000, 1.0
    b = simulate(two_dim(), time_grid(T, 16), M, seed=3)
    xt = b.states[:, -1]
    assert abs(xt.mean()) < 4 / math.sqrt(M)
    assert abs(xt.var() - T) < 4 / math.sqrt(M) * math.sqrt(2)
    np.testing.assert_allclose(xt, b.increments[:, :, 0].sum(axis=1), atol=1e-12)


def test_ou_mean():
    # b(x) = -x truncated at |x| <= 5 keeps the coefficients bounded by (1 + |x|)
    model = ForwardModel(lambda t, x: -np.clip(x, -5, 5), lambda t: np.array([0.3]), 1.0, 1.0, 0.3, x0=1.0)
    M, T = 20000, 1.0
    b = simulate(model, time_grid(T, 256), M, seed=5)
    xt = b.states[:, -1]
    var = 0.09 * (1 - math.exp(-2 * T)) / 2
    assert abs(xt.mean() - math.exp(-T)) < 4 * math.sqrt(var / M) + 2e-3


def test_thread_and_chunk_invariance():
    model = stochastic_factor()
    grid = time_grid(1.0, 64)
    a = simulate(model, grid, 3 * CHUNK + 7, seed=9, threads=1)
    b = simulate(model, grid, 3 * CHUNK + 7, seed=9, threads=4)
    assert np.array_equal(a.states, b.states)
    tail = simulate(model, grid, 10, seed=9, start=CHUNK + 3)
    assert np.array_equal(tail.states, a.states[CHUNK + 3:CHUNK + 13])
    one1 = simulate(model, grid, 1, seed=9, threads=1)
    one2 = simulate(model, grid, 1, seed=9, threads=8)
    assert paths_csv_text(one1) == paths_csv_text(one2)


def test_env_threads(monkeypatch):
    grid = time_grid(1.0, 32)
    base = simulate(brownian(), grid, 700, seed=1)
    monkeypatch.setenv("QRBSDE_THREADS", "3")
    assert np.array_equal(simulate(brownian(), grid, 700, seed=1).states, base.states)


def test_seed_changes_paths():
    grid = time_grid(1.0, 8)
    assert not np.array_equal(simulate(brownian(), grid, 5, 1).states, simulate(brownian(), grid, 5, 2).states)


def test_rejects_bad_input():
    with pytest.raises(ValueError):
        simulate(brownian(), time_grid(1.0, 4), 0, 1)
    with pytest.raises(ValueError):
        simulate(brownian(), np.array([0.0, 0.5, 0.5, 1.0]), 3, 1)


def test_gaussian_law():
    assert gaussian_terminal_law(brownian(), 0.0, 0.0, 1.0) == (0.0, 1.0)
    assert gaussian_terminal_law(brownian(scale=0.5), 0.0, 2.0, 4.0) == (2.0, 1.0)
    with pytest.raises(ValueError):
        gaussian_terminal_law(stochastic_factor(), 0.0, 0.0, 1.0)


def test_quadrature_vs_monte_carlo():
    M = 20000
    b = simulate(brownian(), time_grid(1.0, 4), M, seed=4)
    mc = np.cos(b.states[:, -1])
    q = gauss_hermite_expectation(np.cos, *gaussian_terminal_law(brownian(), 0, 0, 1.0))
    assert q == pytest.approx(math.exp(-0.5), abs=1e-12)
    assert abs(mc.mean() - q) < 4 * mc.std() / math.sqrt(M)


def test_csv_schema():
    b = simulate(brownian(), time_grid(1.0, 2), 2, seed=0)
    buf = io.StringIO()
    write_paths_csv(buf, b)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "path_id,time,state"
    assert len(lines) == 1 + 2 * 3
    assert lines[1] == "0,0.0,0.0"
    assert float(lines[3].split(",")[2]) == b.states[0, 2]
