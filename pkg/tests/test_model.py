import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qrbsde.model import (Driver, ForwardModel, IndeterminateStrategy, MarketSpec, ModelError, Obstacle, Partition,
                          admissible_sequence, build_driver_from_market, gronwall_bound, lipschitz_bound,
                          lipschitz_recursion_step, market_generator, optimal_strategy, quadratic_driver,
                          theoretical_bounds, z_bound, zero_driver)
from qrbsde.presets import brownian, factor_market, sf_example, stochastic_factor, tent


def const_market(theta=(0.3, 0.0), s=(0.2, 0.0), alpha=2.0, lo=-math.inf, hi=math.inf):
    th, sv = np.asarray(theta, float), np.asarray(s, float)
    return MarketSpec(lambda t, x: np.broadcast_to(th, np.shape(x) + th.shape),
                      lambda t, x: np.broadcast_to(sv, np.shape(x) + sv.shape), alpha, lo, hi)


def grid_search(spec, t, x, z, lo=-10.0, hi=10.0, step=1e-4):
    pis = np.arange(lo, hi + step / 2, step)
    pis = pis[(pis >= spec.pi_lo) & (pis <= spec.pi_hi)]
    th = np.asarray(spec.theta(t, x))
    s = np.asarray(spec.stock_vol(t, x))
    v = th / spec.alpha - np.asarray(z)
    d2 = np.sum((pis[:, None] * s[None, :] - v[None, :]) ** 2, axis=1)
    k = int(np.argmin(d2))
    return pis[k], -0.5 * spec.alpha * d2[k] - float(np.dot(z, th)) + float(th @ th) / (2 * spec.alpha)


class TestPartition:
    def test_uniform(self):
        p = Partition.uniform(1.0, 4)
        assert p.n == 4 and p.T == 1.0 and p.mesh == pytest.approx(0.25)
        assert Partition.uniform(1.0, 8).refines(p)
        assert not p.refines(Partition.uniform(1.0, 8))

    @pytest.mark.parametrize("times", [(0.0,), (0.1, 1.0), (0.0, 0.5, 0.5, 1.0), (0.0, 0.7, 0.3)])
    def test_rejects(self, times):
        with pytest.raises(ModelError):
            Partition(times)


class TestGenerator:
    def test_zero_residual(self):
        spec = const_market()
        f = market_generator(spec)
        z = np.array([0.3, 0.0]) / 2.0
        assert f(0.0, 0.0, z) == pytest.approx(-0.09 / 4, abs=1e-15)

    def test_hand_projection(self):
        spec = const_market()
        z = np.array([0.1, 0.05])
        f = market_generator(spec)(0.0, 0.0, z)
        assert f == pytest.approx(-0.0025 - 0.03 + 0.0225, abs=1e-14)
        assert grid_search(spec, 0.0, 0.0, z)[1] == pytest.approx(f, abs=1e-9)

    def test_factor_preset_form(self, rng):
        spec = factor_market()
        f = market_generator(spec)
        x = rng.uniform(-5, 5, 200)
        z = rng.uniform(-3, 3, (200, 2))
        th = 0.1 + 0.2 * np.tanh(x)
        expect = -0.5 * z[:, 1] ** 2 - z[:, 0] * th + th**2 / 2
        np.testing.assert_allclose(f(0.3, x, z), expect, atol=1e-13)

    @settings(max_examples=40, deadline=None)
    @given(st.floats(-1, 1), st.floats(0.05, 1), st.floats(-1, 1), st.floats(-1, 1), st.floats(0.5, 3))
    def test_argmin_matches_grid_search(self, th, s, z1, z2, alpha):
        spec = const_market((th, 0.1), (s, 0.05), alpha, -2.0, 3.0)
        z = np.array([z1, z2])
        pi = optimal_strategy(spec, 0.0, 0.0, z)
        pi_g, f_g = grid_search(spec, 0.0, 0.0, z, -2.0, 3.0, 1e-3)
        assert market_generator(spec)(0.0, 0.0, z) >= f_g - 1e-12
        assert market_generator(spec)(0.0, 0.0, z) == pytest.approx(f_g, abs=1e-5)
        assert -2.0 <= pi <= 3.0

    def test_bounds_of_market_driver(self):
        p = sf_example()
        p.driver.validate(2)
        assert p.driver.M_f == pytest.approx(0.09)


class TestStrategy:
    def test_zero_when_v_vanishes(self):
        spec = const_market()
        assert optimal_strategy(spec, 0.0, 0.0, np.array([0.15, 0.0])) == 0.0

    def test_hand_value(self):
        assert optimal_strategy(const_market(), 0.0, 0.0, np.zeros(2)) == pytest.approx(0.75)
        assert grid_search(const_market(), 0.0, 0.0, np.zeros(2))[0] == pytest.approx(0.75, abs=1e-4)

    def test_clamped(self):
        assert optimal_strategy(const_market(lo=0.0, hi=0.5), 0.0, 0.0, np.zeros(2)) == pytest.approx(0.5)

    def test_indeterminate(self):
        spec = const_market(s=(0.0, 0.0))
        with pytest.raises(IndeterminateStrategy):
            optimal_strategy(spec, 0.0, 0.0, np.zeros(2))
        assert optimal_strategy(const_market(s=(0.0, 0.0), lo=-1, hi=1), 0.0, 0.0, np.zeros(2)) == 0.0

    def test_constraint_must_hold_zero(self):
        with pytest.raises(ModelError):
            const_market(lo=0.1, hi=1.0)


def flat_model(M_sigma=1.0, K_b=0.0):
    return ForwardModel(lambda t, x: np.zeros(np.shape(x)), lambda t: np.array([M_sigma]), 0.0, K_b, M_sigma)


def driver_with(K_x):
    return Driver(lambda t, x, z: np.zeros(np.shape(x)), 1.0, 0.0, K_x, 0.0)


class TestBounds:
    def test_z_bound_examples(self):
        assert z_bound(flat_model(), driver_with(0.0), 2.0, 1.0) == pytest.approx(3.0)
        assert z_bound(flat_model(), driver_with(1.0), 2.0, 1.0) == pytest.approx(3 * math.e)
        assert z_bound(flat_model(), driver_with(0.0), 0.0, 1.0) == pytest.approx(1.0)

    def test_gronwall_examples(self):
        assert gronwall_bound(0.0, 1.0, 1.0, 0.0) == 1.0
        assert gronwall_bound(1.0, 1.0, 0.0, 0.5) == pytest.approx(0.5 * math.e)
        with pytest.raises(ValueError):
            gronwall_bound(-1.0, 1.0, 1.0, 0.0)

    def test_gronwall_dominates_random_sequences(self, rng):
        for _ in range(1000):
            n = int(rng.integers(1, 30))
            gaps = rng.dirichlet(np.ones(n)) * rng.uniform(0.1, 2.0)
            C = rng.uniform(0, 3)
            b = rng.uniform(0, 1, n)
            a = admissible_sequence(rng, gaps, C, rng.uniform(0, 2), b)
            assert np.all(a >= 0)
            assert np.max(a) <= gronwall_bound(C, gaps.sum(), a[-1], b.sum()) + 1e-12

    def test_lipschitz_trivial(self):
        L = 1.7
        for _ in range(8):
            L = lipschitz_recursion_step(L, 0.125, 0.0, 0.0, 1.7)
            assert L == 1.7
        assert lipschitz_bound(0.0, 0.0, 1.7, 1.0) == 1.7

    def test_lipschitz_recursion_below_bound(self):
        L = 1.0
        for _ in range(4):
            L = lipschitz_recursion_step(L, 0.25, 1.0, 1.0, 1.0)
        assert L <= 2 * math.e
        assert lipschitz_bound(1.0, 1.0, 1.0, 1.0) == pytest.approx(2 * math.e)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0, 2), st.floats(0, 2), st.floats(0, 2), st.floats(0.01, 2), st.floats(0, 0.5))
    def test_lipschitz_bound_monotone(self, K1, K2, Kg, T, h):
        b = lipschitz_bound(K1, K2, Kg, T)
        assert lipschitz_bound(K1 + h, K2, Kg, T) >= b
        assert lipschitz_bound(K1, K2 + h, Kg, T) >= b
        assert lipschitz_bound(K1, K2, Kg + h, T) >= b
        assert lipschitz_bound(K1, K2, Kg, T + h) >= b

    def test_theoretical_bounds_record(self):
        p = sf_example()
        tb = theoretical_bounds(p.model, p.driver, p.obstacle, p.T)
        d = tb.as_dict()
        assert d["y_bound"] == pytest.approx(1.0 + p.driver.M_f)
        assert d["K1"] == pytest.approx(1.5) and d["K2"] == pytest.approx(math.exp(0.5))


class TestValidation:
    def test_presets_validate(self):
        stochastic_factor().validate()
        brownian().validate()
        tent().validate()
        zero_driver().validate(1)
        quadratic_driver(2.0).validate(2)

    def test_bad_obstacle(self):
        with pytest.raises(ModelError):
            Obstacle(np.sin, 0.5, 1.0).validate()
        with pytest.raises(ModelError):
            Obstacle(np.sin, 1.0, 1.0, "c2b")

    def test_bad_forward(self):
        with pytest.raises(ModelError):
            ForwardModel(lambda t, x: 2 * x, lambda t: np.array([1.0]), 1.0, 1.0, 1.0).validate()
        with pytest.raises(ModelError):
            stochastic_factor(kappa=(1.0, 1.0))

    def test_market_driver_constants(self):
        d = build_driver_from_market(factor_market(), samples=4000)
        assert d.K_z > 0 and d.K_x > 0
        d.validate(2)
