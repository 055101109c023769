"""Problem data for the reflected quadratic BSDE and its closed-form constants.

Everything here is immutable.  Coefficient regularity is spot-checked by
random sampling since the callables are black boxes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np


class ModelError(ValueError):
    """Invalid problem data (bad partition, violated growth bound, ...)."""


class IndeterminateStrategy(ValueError):
    """The stock volatility row vanishes and the constraint set is unbounded."""


# ---------------------------------------------------------------------------
# Partition


@dataclass(frozen=True)
class Partition:
    """Exercise dates ``0 = t_0 < t_1 < ... < t_n = T``."""

    times: tuple

    def __post_init__(self):
        times = tuple(float(t) for t in self.times)
        object.__setattr__(self, "times", times)
        if len(times) < 2:
            raise ModelError("partition needs n >= 1 intervals")
        if times[0] != 0.0:
            raise ModelError(f"partition must start at 0, got {times[0]}")
        gaps = np.diff(times)
        if np.any(gaps <= 0):
            raise ModelError("partition times must be strictly increasing")

    @classmethod
    def uniform(cls, T: float, n: int) -> "Partition":
        return cls(tuple(np.linspace(0.0, T, n + 1)))

    @property
    def n(self) -> int:
        return len(self.times) - 1

    @property
    def T(self) -> float:
        return self.times[-1]

    @property
    def gaps(self) -> np.ndarray:
        return np.diff(self.times)

    @property
    def mesh(self) -> float:
        return float(np.max(self.gaps))

    def refines(self, other: "Partition") -> bool:
        """True when every date of ``other`` is also a date of ``self``."""
        mine = np.asarray(self.times)
        return all(np.any(np.isclose(mine, t, rtol=0, atol=1e-12)) for t in other.times)


# ---------------------------------------------------------------------------
# Coefficients


def _sample_points(rng, n, x_range=10.0, T=1.0):
    t = rng.uniform(0.0, T, n)
    x = rng.uniform(-x_range, x_range, n)
    return t, x


@dataclass(frozen=True)
class ForwardModel:
    """Forward SDE ``dX = b(t, X) dt + sigma(t) . dB`` with scalar state.

    ``b`` must accept numpy arrays for ``x``; ``sigma(t)`` returns a length-m
    vector.
    """

    b: Callable
    sigma: Callable
    M_b: float
    K_b: float
    M_sigma: float
    x0: float = 0.0
    name: str = "forward"

    @property
    def m(self) -> int:
        return len(np.atleast_1d(self.sigma(0.0)))

    def sigma_vec(self, t: float) -> np.ndarray:
        return np.atleast_1d(np.asarray(self.sigma(t), dtype=float))

    def sigma_norm(self, t: float) -> float:
        return float(np.linalg.norm(self.sigma_vec(t)))

    def drift(self, t: float, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.asarray(self.b(t, x), dtype=float), x.shape)

    @property
    def is_driftless_constant(self) -> bool:
        """Heuristic check used by the Gaussian oracle: b == 0 and constant sigma."""
        xs = np.linspace(-5, 5, 11)
        ts = np.linspace(0, 1, 5)
        s0 = self.sigma_vec(0.0)
        return all(np.allclose(self.drift(t, xs), 0.0) and np.allclose(self.sigma_vec(t), s0) for t in ts)

    def validate(self, T: float = 1.0, samples: int = 2000, seed: int = 0, rtol: float = 1e-9) -> None:
        rng = np.random.default_rng(seed)
        t, x = _sample_points(rng, samples, T=T)
        _, x2 = _sample_points(rng, samples, T=T)
        bx = np.array([self.drift(ti, xi) for ti, xi in zip(t, x)], dtype=float)
        bx2 = np.array([self.drift(ti, xi) for ti, xi in zip(t, x2)], dtype=float)
        if not np.all(np.isfinite(bx)):
            raise ModelError("drift returned non-finite values")
        slack = rtol * (1 + np.abs(bx))
        if np.any(np.abs(bx) > self.M_b * (1 + np.abs(x)) + slack):
            raise ModelError("drift violates |b(t,x)| <= M_b (1 + |x|)")
        if np.any(np.abs(bx - bx2) > self.K_b * np.abs(x - x2) + slack):
            raise ModelError("drift violates the K_b Lipschitz bound")
        norms = np.array([self.sigma_norm(ti) for ti in t])
        if np.any(norms > self.M_sigma * (1 + rtol)):
            raise ModelError("diffusion violates |sigma(t)| <= M_sigma")


@dataclass(frozen=True)
class Driver:
    """Generator ``f(t, x, z)``; ``z`` has shape ``(..., m)``, ``x`` shape ``(...)``."""

    f: Callable
    alpha: float
    M_f: float
    K_x: float
    K_z: float
    name: str = "driver"
    market: Optional["MarketSpec"] = None

    def __post_init__(self):
        if not self.alpha > 0:
            raise ModelError("alpha must be positive")
        for key in ("M_f", "K_x", "K_z"):
            if getattr(self, key) < 0:
                raise ModelError(f"{key} must be nonnegative")

    def __call__(self, t, x, z):
        return self.f(t, x, z)

    def validate(self, m: int, T: float = 1.0, samples: int = 2000, seed: int = 0,
                 z_range: float = 5.0, rtol: float = 1e-9) -> None:
        rng = np.random.default_rng(seed)
        t, x = _sample_points(rng, samples, T=T)
        _, x2 = _sample_points(rng, samples, T=T)
        z = rng.uniform(-z_range, z_range, (samples, m))
        z2 = rng.uniform(-z_range, z_range, (samples, m))
        fz = np.array([self.f(ti, xi, zi) for ti, xi, zi in zip(t, x, z)], dtype=float)
        fx2 = np.array([self.f(ti, xi, zi) for ti, xi, zi in zip(t, x2, z)], dtype=float)
        fz2 = np.array([self.f(ti, xi, zi) for ti, xi, zi in zip(t, x, z2)], dtype=float)
        nz = np.linalg.norm(z, axis=1)
        nz2 = np.linalg.norm(z2, axis=1)
        slack = rtol * (1 + np.abs(fz))
        if np.any(np.abs(fz) > self.M_f + 0.5 * self.alpha * nz**2 + slack):
            raise ModelError("driver violates |f| <= M_f + alpha/2 |z|^2")
        if np.any(np.abs(fz - fx2) > self.K_x * (1 + nz) * np.abs(x - x2) + slack):
            raise ModelError("driver violates the K_x local Lipschitz bound")
        dz = np.linalg.norm(z - z2, axis=1)
        if np.any(np.abs(fz - fz2) > self.K_z * (1 + nz + nz2) * dz + slack):
            raise ModelError("driver violates the K_z local Lipschitz bound")


@dataclass(frozen=True)
class Obstacle:
    """Bounded Lipschitz payoff ``g``.  ``regularity`` is ``"lipschitz"`` or ``"c2b"``."""

    g: Callable
    K_g: float
    M_g: float
    regularity: str = "lipschitz"
    d1_bound: Optional[float] = None
    d2_bound: Optional[float] = None
    name: str = "obstacle"

    def __post_init__(self):
        if self.regularity not in ("lipschitz", "c2b"):
            raise ModelError(f"unknown regularity tag {self.regularity!r}")
        if self.regularity == "c2b" and (self.d1_bound is None or self.d2_bound is None):
            raise ModelError("a C2b obstacle needs bounds for |g'| and |g''|")

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.asarray(self.g(x), dtype=float), x.shape).copy()

    def shifted(self, c: float) -> "Obstacle":
        g = self.g
        return Obstacle(lambda x: g(x) + c, self.K_g, self.M_g + abs(c), self.regularity,
                        self.d1_bound, self.d2_bound, name=f"{self.name}{c:+g}")

    def validate(self, samples: int = 4000, seed: int = 0, x_range: float = 10.0, rtol: float = 1e-9) -> None:
        rng = np.random.default_rng(seed)
        x = rng.uniform(-x_range, x_range, samples)
        x2 = rng.uniform(-x_range, x_range, samples)
        gx, gx2 = self(x), self(x2)
        slack = rtol * (1 + np.abs(gx))
        if np.any(np.abs(gx) > self.M_g + slack):
            raise ModelError("obstacle violates |g| <= M_g")
        if np.any(np.abs(gx - gx2) > self.K_g * np.abs(x - x2) + slack):
            raise ModelError("obstacle violates the K_g Lipschitz bound")


# ---------------------------------------------------------------------------
# Market data and the utility-maximization generator


@dataclass(frozen=True)
class MarketSpec:
    """One stock (d = 1) driven by an m-dimensional Brownian motion.

    ``theta(t, x)`` and ``stock_vol(t, x)`` return length-m vectors; for array
    ``x`` of shape ``(k,)`` they return shape ``(k, m)``.
    """

    theta: Callable
    stock_vol: Callable
    alpha: float
    pi_lo: float = -math.inf
    pi_hi: float = math.inf

    def __post_init__(self):
        if not self.alpha > 0:
            raise ModelError("alpha must be positive")
        if self.pi_lo > self.pi_hi:
            raise ModelError(f"empty constraint interval [{self.pi_lo}, {self.pi_hi}]")
        if not (self.pi_lo <= 0.0 <= self.pi_hi):
            raise ModelError("the constraint interval must contain 0")

    @property
    def bounded(self) -> bool:
        return math.isfinite(self.pi_lo) and math.isfinite(self.pi_hi)

    def clamp(self, pi):
        return np.clip(pi, self.pi_lo, self.pi_hi)


def _market_terms(spec: MarketSpec, t, x, z):
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    theta = np.asarray(spec.theta(t, x), dtype=float)
    s = np.asarray(spec.stock_vol(t, x), dtype=float)
    v = theta / spec.alpha - z
    ss = np.sum(s * s, axis=-1)
    return theta, s, v, ss


def _argmin(spec, s, v, ss):
    with np.errstate(divide="ignore", invalid="ignore"):
        raw = np.sum(s * v, axis=-1) / ss
    # a zero row makes the objective constant in pi; any point of C is optimal
    raw = np.where(ss > 0, raw, 0.0)
    return spec.clamp(raw)


def optimal_strategy(spec: MarketSpec, t, x, z):
    """Minimizer over ``C`` of ``|s pi - (theta/alpha - z)|^2``.

    Raises :class:`IndeterminateStrategy` where the volatility row vanishes
    and ``C`` is unbounded.
    """
    theta, s, v, ss = _market_terms(spec, t, x, z)
    if np.any(ss == 0) and not spec.bounded:
        raise IndeterminateStrategy("zero stock volatility with an unbounded constraint set")
    pi = _argmin(spec, s, v, ss)
    return float(pi) if np.ndim(pi) == 0 else pi


def market_generator(spec: MarketSpec):
    """Return the vectorized generator ``f(t, x, z)`` for exponential utility."""

    def f(t, x, z):
        theta, s, v, ss = _market_terms(spec, t, x, z)
        pi = _argmin(spec, s, v, ss)
        resid = np.asarray(pi)[..., None] * s - v
        dist2 = np.sum(resid * resid, axis=-1)
        zt = np.sum(np.asarray(z, dtype=float) * theta, axis=-1)
        return -0.5 * spec.alpha * dist2 - zt + np.sum(theta * theta, axis=-1) / (2 * spec.alpha)

    return f


def build_driver_from_market(spec: MarketSpec, m: int = 2, T: float = 1.0, samples: int = 20000,
                             seed: int = 0, x_range: float = 10.0, z_range: float = 5.0,
                             name: str = "market") -> Driver:
    """Build the utility generator and estimate its constants by sampling.

    ``M_f`` uses the sharp bound ``|f| <= alpha/2 |z|^2 + |theta|^2 / alpha``
    with the sampled sup of ``|theta|``; ``K_x`` and ``K_z`` are sup of the
    corresponding difference quotients over the sample.
    """
    rng = np.random.default_rng(seed)
    f = market_generator(spec)
    t = rng.uniform(0, T, samples)
    x = rng.uniform(-x_range, x_range, samples)
    x2 = x + rng.normal(0, 0.05, samples)
    z = rng.uniform(-z_range, z_range, (samples, m))
    z2 = z + rng.normal(0, 0.05, (samples, m))

    def ev(xx, zz):
        return np.array([f(ti, xi, zi) for ti, xi, zi in zip(t, xx, zz)], dtype=float)

    theta = np.array([spec.theta(ti, xi) for ti, xi in zip(t, x)], dtype=float)
    theta_sup = float(np.max(np.linalg.norm(theta, axis=-1)))
    fz = ev(x, z)
    nz = np.linalg.norm(z, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        qx = np.abs(fz - ev(x2, z)) / ((1 + nz) * np.abs(x - x2))
        nz2 = np.linalg.norm(z2, axis=1)
        qz = np.abs(fz - ev(x, z2)) / ((1 + nz + nz2) * np.linalg.norm(z - z2, axis=1))
    K_x = float(np.nanmax(np.where(np.isfinite(qx), qx, np.nan)))
    K_z = float(np.nanmax(np.where(np.isfinite(qz), qz, np.nan)))
    return Driver(f, spec.alpha, theta_sup**2 / spec.alpha, K_x, K_z, name=name, market=spec)


def zero_driver(alpha: float = 1.0) -> Driver:
    return Driver(lambda t, x, z: np.zeros(np.shape(x)), alpha, 0.0, 0.0, 0.0, name="zero")


def quadratic_driver(alpha: float = 1.0) -> Driver:
    """``f = -(alpha/2)|z|^2``; solvable in closed form by the Cole-Hopf transform."""
    return Driver(lambda t, x, z: -0.5 * alpha * np.sum(np.asarray(z) ** 2, axis=-1),
                  alpha, 0.0, 0.0, 0.5 * alpha, name="quadratic")


def constant_driver(c: float, alpha: float = 1.0) -> Driver:
    return Driver(lambda t, x, z: np.full(np.shape(x), float(c)), alpha, abs(c), 0.0, 0.0,
                  name=f"constant({c:g})")


# ---------------------------------------------------------------------------
# Closed-form constants


def z_bound(model: ForwardModel, driver: Driver, obstacle_or_lipschitz, T: float) -> float:
    """Uniform bound on ``|Z|`` for a Markovian quadratic BSDE with Lipschitz terminal.

    ``obstacle_or_lipschitz`` is either an :class:`Obstacle` or a bare
    Lipschitz constant for the terminal function.
    """
    K_g = getattr(obstacle_or_lipschitz, "K_g", obstacle_or_lipschitz)
    growth = math.exp(2 * model.K_b * T)
    K = model.M_sigma * driver.K_x * growth
    return math.exp(K * T) * (model.M_sigma * growth * float(K_g) + 1.0)


def gronwall_bound(C: float, T: float, a_n: float, b_sum: float) -> float:
    """Bound ``e^{CT}(a_n + sum b_i)`` for backward sequences ``a_{i-1} <= e^{C dt_i} a_i + b_i``."""
    if min(C, T, a_n, b_sum) < 0:
        raise ValueError("gronwall_bound takes nonnegative inputs")
    return math.exp(C * T) * (a_n + b_sum)


def lipschitz_recursion_step(L_i: float, dt: float, K1: float, K2: float, L_n: float) -> float:
    return max(L_i * math.exp(K1 * dt) + K2 * dt, L_n)


def lipschitz_bound(K1: float, K2: float, K_g: float, T: float) -> float:
    return math.exp(K1 * T) * (K_g + K2 * T)


def lipschitz_constants(model: ForwardModel, T: float, C: float = 1.0):
    """``(K1, K2) = (C + K_b, C e^{K_b T})`` with the unnamed proof constant ``C`` exposed."""
    return C + model.K_b, C * math.exp(model.K_b * T)


@dataclass(frozen=True)
class TheoreticalBounds:
    y_bound: float
    z_exponent: float
    z_bound: float
    K_g: float
    T: float
    proof_constant: float = 1.0
    K1: float = field(default=0.0)
    K2: float = field(default=0.0)

    def lipschitz_bound(self, K1: Optional[float] = None, K2: Optional[float] = None) -> float:
        return lipschitz_bound(self.K1 if K1 is None else K1, self.K2 if K2 is None else K2, self.K_g, self.T)

    def as_dict(self) -> dict:
        return {
            "y_bound": self.y_bound,
            "z_exponent": self.z_exponent,
            "z_bound": self.z_bound,
            "K1": self.K1,
            "K2": self.K2,
            "proof_constant": self.proof_constant,
            "lipschitz_bound": self.lipschitz_bound(),
        }


def theoretical_bounds(model: ForwardModel, driver: Driver, obstacle: Obstacle, T: float,
                       proof_constant: float = 1.0) -> TheoreticalBounds:
    K = model.M_sigma * driver.K_x * math.exp(2 * model.K_b * T)
    K1, K2 = lipschitz_constants(model, T, proof_constant)
    return TheoreticalBounds(
        y_bound=obstacle.M_g + driver.M_f * T,
        z_exponent=K,
        z_bound=z_bound(model, driver, obstacle, T),
        K_g=obstacle.K_g,
        T=T,
        proof_constant=proof_constant,
        K1=K1,
        K2=K2,
    )


def measured_lipschitz(values: np.ndarray, dx: float) -> float:
    """Largest absolute slope between neighbouring grid nodes."""
    return float(np.max(np.abs(np.diff(values))) / dx) if len(values) > 1 else 0.0


def admissible_sequence(rng, gaps: Sequence[float], C: float, a_n: float, b: Sequence[float]) -> np.ndarray:
    """Random sequence with ``0 <= a_{i-1} <= e^{C dt_i} a_i + b_i`` (index 1..n)."""
    n = len(gaps)
    a = np.empty(n + 1)
    a[n] = a_n
    for i in range(n, 1, -1):
        w = 1.0 if rng.random() < 0.5 else rng.random()
        a[i - 1] = w * (math.exp(C * gaps[i - 1]) * a[i] + b[i - 1])
    a[0] = np.nan
    return a[1:]
