"""Built-in problems and the structured configuration format.

Config files are YAML or JSON with the sections ``forward``, ``driver``,
``market``, ``obstacle`` and ``horizon``; ``preset: <name>`` starts from a
built-in problem and the remaining keys override it.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .model import Driver, ForwardModel, MarketSpec, ModelError, Obstacle, build_driver_from_market, \
    constant_driver, quadratic_driver, zero_driver


class ConfigError(ValueError):
    """Bad configuration; ``key`` names the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class Problem:
    name: str
    model: ForwardModel
    driver: Driver
    obstacle: Obstacle
    T: float
    market: Optional[MarketSpec] = None
    settings: Optional[dict] = None
    reflected: bool = True

    def describe(self) -> dict:
        return {
            "name": self.name,
            "T": self.T,
            "reflected": self.reflected,
            "x0": self.model.x0,
            "forward": {"name": self.model.name, "M_b": self.model.M_b, "K_b": self.model.K_b,
                        "M_sigma": self.model.M_sigma, "m": self.model.m},
            "driver": {"name": self.driver.name, "alpha": self.driver.alpha, "M_f": self.driver.M_f,
                       "K_x": self.driver.K_x, "K_z": self.driver.K_z},
            "obstacle": {"name": self.obstacle.name, "K_g": self.obstacle.K_g, "M_g": self.obstacle.M_g,
                         "regularity": self.obstacle.regularity},
            "settings": self.settings or {},
        }


# ---------------------------------------------------------------------------
# obstacles


def tent(height: float = 1.0, width: float = 1.0) -> Obstacle:
    """``height * (1 - |x|/width)^+``."""
    return Obstacle(lambda x: height * np.maximum(1.0 - np.abs(x) / width, 0.0), height / width, height,
                    "lipschitz", name="tent")


def bump(height: float = 1.0, scale: float = 0.5) -> Obstacle:
    """Gaussian bump ``height * exp(-x^2 / (2 scale^2))``; C2b."""
    d1 = height / (scale * math.sqrt(math.e))
    d2 = height / scale**2
    return Obstacle(lambda x: height * np.exp(-np.asarray(x) ** 2 / (2 * scale**2)), d1, height, "c2b",
                    d1, d2, name="bump")


def cosine() -> Obstacle:
    return Obstacle(np.cos, 1.0, 1.0, "c2b", 1.0, 1.0, name="cos")


def constant_obstacle(c: float) -> Obstacle:
    return Obstacle(lambda x: np.full(np.shape(x), float(c)), 0.0, abs(c), "c2b", 0.0, 0.0, name=f"const({c:g})")


OBSTACLES = {
    "tent": tent, "lipschitz": tent,
    "bump": bump, "c2b": bump,
    "cos": lambda **kw: cosine(),
    "constant": lambda level=0.0, **kw: constant_obstacle(level),
}


# ---------------------------------------------------------------------------
# built-in problems


def brownian(m: int = 1, x0: float = 0.0, scale: float = 1.0) -> ForwardModel:
    sig = np.zeros(m)
    sig[0] = scale
    return ForwardModel(lambda t, x: np.zeros(np.shape(x)), lambda t: sig.copy(), 0.0, 0.0, abs(scale), x0,
                        name="brownian")


def heat_oracle() -> Problem:
    return Problem("heat-oracle", brownian(), zero_driver(), cosine(), 1.0, reflected=False)


def colehopf_oracle(alpha: float = 1.0) -> Problem:
    return Problem("colehopf-oracle", brownian(), quadratic_driver(alpha), cosine(), 1.0, reflected=False)


def american_oracle(x0: float = 0.8) -> Problem:
    return Problem("american-oracle", brownian(x0=x0), zero_driver(), tent(), 0.25)


def stochastic_factor(beta: float = 0.5, mbar: float = 0.0, kappa=(0.6, 0.8), x0: float = 0.0) -> ForwardModel:
    """``dV = beta tanh(mbar - V) dt + kappa . dB`` with ``|kappa| = 1``."""
    k = np.asarray(kappa, dtype=float)
    if not math.isclose(float(k @ k), 1.0, rel_tol=1e-12):
        raise ModelError("kappa must have unit norm")
    return ForwardModel(lambda t, x: beta * np.tanh(mbar - np.asarray(x)), lambda t: k.copy(),
                        abs(beta), abs(beta), 1.0, x0, name="stochastic-factor")


def factor_market(theta0=0.1, theta1=0.2, vol0=0.25, vol1=0.05, alpha=1.0, pi_lo=-math.inf,
                  pi_hi=math.inf) -> MarketSpec:
    """Risk premium ``theta0 + theta1 tanh(v)`` on the first Brownian component only."""

    def theta(t, x):
        x = np.asarray(x, dtype=float)
        th = theta0 + theta1 * np.tanh(x)
        return np.stack([th, np.zeros_like(th)], axis=-1)

    def stock_vol(t, x):
        x = np.asarray(x, dtype=float)
        s = vol0 + vol1 * np.tanh(x)
        return np.stack([s, np.zeros_like(s)], axis=-1)

    return MarketSpec(theta, stock_vol, alpha, pi_lo, pi_hi)


def sf_example(obstacle: str = "lipschitz", **market) -> Problem:
    spec = factor_market(**market)
    model = stochastic_factor()
    driver = build_driver_from_market(spec, m=2, T=1.0, name="sf-market")
    obs = tent() if obstacle in ("lipschitz", "tent") else bump()
    return Problem(f"sf-example/{obs.name}", model, driver, obs, 1.0, market=spec)


PRESETS = {
    "sf-example": sf_example,
    "heat-oracle": heat_oracle,
    "colehopf-oracle": colehopf_oracle,
    "american-oracle": american_oracle,
}


def preset(name: str, obstacle: Optional[str] = None) -> Problem:
    if name not in PRESETS:
        raise ConfigError("preset", f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}")
    if obstacle is None:
        return PRESETS[name]()
    if name == "sf-example":
        return sf_example(obstacle)
    base = PRESETS[name]()
    return replace(base, obstacle=_obstacle({"kind": obstacle}, "obstacle"))


# ---------------------------------------------------------------------------
# config files

_NS = {name: getattr(np, name) for name in ("sin", "cos", "tan", "tanh", "sinh", "cosh", "exp", "log", "sqrt",
                                            "abs", "minimum", "maximum", "clip", "arctan", "pi", "where")}


def expression(src: str, args=("t", "x"), key: str = "expression"):
    """Compile a numpy expression in ``t`` and ``x`` into a vectorized callable."""
    try:
        code = compile(str(src), f"<{key}>", "eval")
    except SyntaxError as exc:
        raise ConfigError(key, f"invalid expression {src!r}: {exc.msg}") from None
    for name in code.co_names:
        if name not in _NS and name not in args:
            raise ConfigError(key, f"unknown name {name!r} in {src!r}")

    def fn(*vals):
        ns = dict(_NS)
        ns.update(zip(args, vals))
        return eval(code, {"__builtins__": {}}, ns)

    return fn


def _num(section: dict, key: str, prefix: str, default=None, positive=False):
    if key not in section:
        if default is None:
            raise ConfigError(f"{prefix}.{key}", "missing")
        return default
    try:
        v = float(section[key])
    except (TypeError, ValueError):
        raise ConfigError(f"{prefix}.{key}", f"expected a number, got {section[key]!r}") from None
    if positive and not v > 0:
        raise ConfigError(f"{prefix}.{key}", "must be positive")
    if not positive and v < 0 and key not in ("x0", "theta0", "theta1", "vol1", "pi_lo", "level", "height"):
        raise ConfigError(f"{prefix}.{key}", "must be nonnegative")
    return v


def _forward(sec: dict, base: Optional[ForwardModel]) -> ForwardModel:
    if base is not None and not ({"b", "sigma"} & set(sec)):
        return replace(base, x0=_num(sec, "x0", "forward", base.x0))
    if "b" not in sec or "sigma" not in sec:
        raise ConfigError("forward.b" if "b" not in sec else "forward.sigma", "missing")
    bfun = expression(sec["b"], key="forward.b")
    comps = sec["sigma"] if isinstance(sec["sigma"], (list, tuple)) else [sec["sigma"]]
    sfun = [expression(c, args=("t",), key="forward.sigma") for c in comps]

    def b(t, x):
        return np.asarray(bfun(t, np.asarray(x, dtype=float)), dtype=float) + 0 * np.asarray(x, dtype=float)

    def sigma(t):
        return np.array([float(f(t)) for f in sfun])

    return ForwardModel(b, sigma, _num(sec, "Mb", "forward"), _num(sec, "Kb", "forward"),
                        _num(sec, "Msigma", "forward"), _num(sec, "x0", "forward", 0.0), name="config")


def _market(sec: dict, alpha: float) -> MarketSpec:
    return factor_market(theta0=_num(sec, "theta0", "market", 0.1), theta1=_num(sec, "theta1", "market", 0.2),
                         vol0=_num(sec, "vol0", "market", 0.25), vol1=_num(sec, "vol1", "market", 0.05),
                         alpha=alpha, pi_lo=float(sec.get("pi_lo", -math.inf)),
                         pi_hi=float(sec.get("pi_hi", math.inf)))


def _driver(sec: dict, market_sec: Optional[dict], m: int, T: float, base: Optional[Driver]):
    kind = sec.get("kind")
    if kind is None:
        if base is None:
            raise ConfigError("driver.kind", "missing")
        return base, base.market
    alpha = _num(sec, "alpha", "driver", 1.0, positive=True)
    if kind == "zero":
        return zero_driver(alpha), None
    if kind == "quadratic":
        return quadratic_driver(alpha), None
    if kind == "constant":
        return constant_driver(_num(sec, "level", "driver", 0.0), alpha), None
    if kind == "market":
        if m != 2:
            raise ConfigError("driver.kind", "the market driver needs a 2-dimensional Brownian motion")
        spec = _market(market_sec or {}, alpha)
        d = build_driver_from_market(spec, m=m, T=T, name="market")
        overrides = {k: _num(sec, key, "driver") for k, key in (("M_f", "Mf"), ("K_x", "Kx"), ("K_z", "Kz"))
                     if key in sec}
        return replace(d, **overrides), spec
    raise ConfigError("driver.kind", f"unknown driver kind {kind!r} (zero, quadratic, constant, market)")


def _obstacle(sec: dict, prefix: str) -> Obstacle:
    kind = sec.get("kind")
    if kind not in OBSTACLES:
        raise ConfigError(f"{prefix}.kind", f"unknown obstacle kind {kind!r}; available: {', '.join(OBSTACLES)}")
    kw = {k: float(v) for k, v in sec.items() if k in ("height", "width", "scale", "level")}
    obs = OBSTACLES[kind](**kw)
    if "Kg" in sec or "Mg" in sec:
        obs = replace(obs, K_g=_num(sec, "Kg", prefix, obs.K_g), M_g=_num(sec, "Mg", prefix, obs.M_g))
    return obs


def problem_from_dict(cfg: dict) -> Problem:
    base = None
    if "preset" in cfg:
        base = preset(cfg["preset"], (cfg.get("obstacle") or {}).get("kind"))
    horizon = cfg.get("horizon") or {}
    T = _num(horizon, "T", "horizon", base.T if base else None, positive=True)
    model = _forward(cfg.get("forward") or {}, base.model if base else None)
    driver, spec = _driver(cfg.get("driver") or {}, cfg.get("market"), model.m, T, base.driver if base else None)
    if spec is None and base is not None and "kind" not in (cfg.get("driver") or {}):
        spec = base.market
    if "obstacle" in cfg:
        obstacle = _obstacle(cfg["obstacle"], "obstacle")
    elif base is not None:
        obstacle = base.obstacle
    else:
        raise ConfigError("obstacle", "missing")
    name = cfg.get("name", base.name if base else "config")
    reflect = cfg.get("reflect", base.reflected if base else True)
    if not isinstance(reflect, bool):
        raise ConfigError("reflect", f"expected true or false, got {reflect!r}")
    return Problem(name, model, driver, obstacle, T, spec, reflected=reflect)


def load_config(path) -> dict:
    path = Path(path)
    text = path.read_text()
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(str(path), f"cannot parse: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(str(path), "top level must be a mapping")
    return data
