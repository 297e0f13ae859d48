"""Correlated GBM asset universe: risk scenarios, exact and Milstein terminal values."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np


class Measure(str, Enum):
    PHYSICAL = "physical"
    RISK_NEUTRAL = "risk_neutral"


class InvalidContractError(ValueError):
    pass


@dataclass(frozen=True)
class AssetParams:
    initial_price: float
    drift: float
    volatility: float

    def __post_init__(self):
        if not self.initial_price > 0:
            raise ValueError(f"initial_price must be positive, got {self.initial_price}")
        if self.volatility < 0:
            raise ValueError(f"volatility must be non-negative, got {self.volatility}")


@dataclass(frozen=True)
class MarketModel:
    assets: tuple[AssetParams, ...]
    correlation: float = 0.2
    risk_free_rate: float = 0.05
    risk_horizon: float = 0.02

    def __post_init__(self):
        object.__setattr__(self, "assets", tuple(self.assets))
        if len(self.assets) < 1:
            raise ValueError("need at least one asset")
        if not 0 < self.correlation < 1:
            raise ValueError(f"correlation must lie in (0, 1), got {self.correlation}")
        if not self.risk_horizon > 0:
            raise ValueError(f"risk_horizon must be positive, got {self.risk_horizon}")

    @property
    def n_assets(self) -> int:
        return len(self.assets)

    @property
    def initial_prices(self) -> np.ndarray:
        return np.array([a.initial_price for a in self.assets])

    @property
    def drifts(self) -> np.ndarray:
        return np.array([a.drift for a in self.assets])

    @property
    def volatilities(self) -> np.ndarray:
        return np.array([a.volatility for a in self.assets])

    def drift_for(self, asset_index: int, measure: Measure) -> float:
        if Measure(measure) is Measure.RISK_NEUTRAL:
            return self.risk_free_rate
        return self.assets[asset_index].drift

    def with_horizon(self, risk_horizon: float) -> "MarketModel":
        return MarketModel(self.assets, self.correlation, self.risk_free_rate, risk_horizon)


@dataclass(frozen=True)
class RiskScenario:
    """Asset values at the risk horizon, drawn under the physical measure."""

    asset_values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.asset_values, dtype=float)
        if np.any(values <= 0):
            raise ValueError("scenario asset values must be positive")
        object.__setattr__(self, "asset_values", values)


class NoiseHandle:
    """Replayable random stream keyed by ``(seed, *key)``.

    Built on a counter-based Philox generator so that any scenario or
    sample stream can be regenerated from its key alone. ``flipped()``
    returns a view of the same stream whose Gaussian draws are negated,
    which is what the antithetic legs consume.
    """

    def __init__(self, seed: int, *key: int, sign: float = 1.0):
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        self.sign = sign
        ss = np.random.SeedSequence([self.seed, *self.key])
        self._gen = np.random.Generator(np.random.Philox(ss))

    def __repr__(self):
        flip = ", flipped" if self.sign < 0 else ""
        return f"NoiseHandle(seed={self.seed}, key={self.key}{flip})"

    def spawn(self, *key: int) -> "NoiseHandle":
        return NoiseHandle(self.seed, *self.key, *key)

    def replay(self) -> "NoiseHandle":
        return NoiseHandle(self.seed, *self.key, sign=self.sign)

    def flipped(self) -> "NoiseHandle":
        """Fresh view of this stream from its start, with negated normals."""
        return NoiseHandle(self.seed, *self.key, sign=-self.sign)

    def normal(self, size=None):
        z = self._gen.standard_normal(size)
        return -z if self.sign < 0 else z

    def uniform(self, size=None):
        return self._gen.random(size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def kernel_seed(self) -> int:
        """A 32-bit seed for the compiled samplers, advancing this stream."""
        return int(self._gen.integers(0, 2**32 - 1))

    def kernel_generator(self) -> np.random.Generator:
        """A PCG64 generator for the compiled samplers, advancing this stream."""
        return np.random.Generator(np.random.PCG64(self._gen.integers(0, 2**63 - 1)))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen


def random_market(
    n_assets: int = 16,
    noise: NoiseHandle | None = None,
    *,
    price_range=(90.0, 110.0),
    drift_range=(0.05, 0.15),
    vol_range=(0.01, 0.4),
    correlation: float = 0.2,
    risk_free_rate: float = 0.05,
    risk_horizon: float = 0.02,
) -> MarketModel:
    """Draw asset parameters independently and uniformly in the given ranges."""
    noise = noise or NoiseHandle(0)
    u = noise.uniform((n_assets, 3))
    lo = np.array([price_range[0], drift_range[0], vol_range[0]])
    hi = np.array([price_range[1], drift_range[1], vol_range[1]])
    params = lo + (hi - lo) * u
    assets = tuple(AssetParams(float(s), float(m), float(v)) for s, m, v in params)
    return MarketModel(assets, correlation, risk_free_rate, risk_horizon)


def sample_risk_scenarios(model: MarketModel, noise: NoiseHandle, size: int) -> np.ndarray:
    """Draw ``size`` scenarios of S(tau) under the physical measure, shape (size, Q).

    One systemic Gaussian per scenario is shared by all assets, so the
    Brownian drivers of two distinct assets have correlation rho**2.
    """
    q = model.n_assets
    rho = model.correlation
    z = noise.normal((size, q + 1))
    b = rho * z[:, :1] + np.sqrt(1.0 - rho * rho) * z[:, 1:]
    tau = model.risk_horizon
    sig = model.volatilities
    log_growth = (model.drifts - 0.5 * sig * sig) * tau + sig * np.sqrt(tau) * b
    return model.initial_prices * np.exp(log_growth)


def sample_risk_scenario(model: MarketModel, noise: NoiseHandle) -> RiskScenario:
    return RiskScenario(sample_risk_scenarios(model, noise, 1)[0])


def exact_terminal(
    model: MarketModel,
    asset_index: int,
    start_value,
    horizon: float,
    measure: Measure = Measure.RISK_NEUTRAL,
    noise: NoiseHandle | None = None,
    size=None,
):
    """Closed-form GBM value after ``horizon`` years from ``start_value``."""
    if horizon < 0:
        raise ValueError("horizon must be non-negative")
    if horizon == 0:
        return start_value if size is None else np.full(size, start_value, dtype=float)
    sig = model.assets[asset_index].volatility
    drift = model.drift_for(asset_index, measure)
    z = noise.normal(size)
    return start_value * np.exp((drift - 0.5 * sig * sig) * horizon + sig * np.sqrt(horizon) * z)


@dataclass
class BridgePair:
    s_plus: np.ndarray
    s_minus: np.ndarray
    s_cond: np.ndarray
    delta_plus: np.ndarray
    delta_minus: np.ndarray

    def __iter__(self):
        return iter((self.s_plus, self.s_minus, self.s_cond, self.delta_plus, self.delta_minus))


def antithetic_bridge_pair(
    model: MarketModel,
    asset_index: int,
    scenario: RiskScenario,
    scenario_noise: NoiseHandle,
    tail_noise: NoiseHandle,
    maturity: float,
    size=None,
) -> BridgePair:
    """Risk-neutral terminal values for the antithetic loss construction.

    ``s_plus``/``s_minus`` start at S(0) and use the [0, tau] increments
    of ``scenario_noise`` and their negation; ``s_cond`` starts at the
    scenario value at tau. All three share the tail increments.
    """
    tau = model.risk_horizon
    if maturity <= tau:
        raise InvalidContractError(f"maturity {maturity} does not exceed the risk horizon {tau}")
    asset = model.assets[asset_index]
    sig = asset.volatility
    s0 = asset.initial_price
    r_tau = scenario.asset_values[asset_index]
    drift = model.risk_free_rate - 0.5 * sig * sig
    head = sig * np.sqrt(tau) * scenario_noise.normal(size)
    tail = drift * (maturity - tau) + sig * np.sqrt(maturity - tau) * tail_noise.normal(size)
    s_plus = s0 * np.exp(drift * tau + head + tail)
    s_minus = s0 * np.exp(drift * tau - head + tail)
    s_cond = r_tau * np.exp(tail)
    return BridgePair(s_plus, s_minus, s_cond, s_plus / s0, s_minus / s0)


def coarse_increments(dw_fine: np.ndarray, ratio: int = 4) -> np.ndarray:
    """Sum consecutive groups of ``ratio`` fine Brownian increments (last axis)."""
    n = dw_fine.shape[-1]
    return dw_fine.reshape(*dw_fine.shape[:-1], n // ratio, ratio).sum(axis=-1)


def milstein_path(start_value, rate: float, vol: float, dt: float, dw: np.ndarray):
    """Milstein scheme for GBM, applied to the discounted price.

    Discounting removes the drift, so the scheme is exact when vol = 0 and
    stays linear in ``start_value`` (pathwise sensitivity = S(T)/S(0)).
    ``dw`` has shape (..., n_steps).
    """
    x = np.asarray(start_value, dtype=float) * np.ones(dw.shape[:-1])
    half_v2 = 0.5 * vol * vol
    for k in range(dw.shape[-1]):
        d = dw[..., k]
        x = x * (1.0 + vol * d + half_v2 * (d * d - dt))
    return x * np.exp(rate * dt * dw.shape[-1])


def milstein_terminal_pair(
    model: MarketModel,
    asset_index: int,
    start_value,
    maturity: float,
    level: int,
    noise: NoiseHandle,
    measure: Measure = Measure.RISK_NEUTRAL,
    size=None,
):
    """Coupled (fine, coarse) Milstein terminal values with 4**level and 4**(level-1) steps.

    At level 0 the coarse value is ``None``.
    """
    if level < 0:
        raise ValueError("level must be non-negative")
    if maturity <= 0 or np.any(np.asarray(start_value) <= 0):
        raise ValueError("need positive start value and maturity")
    n_fine = 4**level
    dt = maturity / n_fine
    shape = (() if size is None else (size,) if np.isscalar(size) else tuple(size)) + (n_fine,)
    dw = np.sqrt(dt) * noise.normal(shape)
    vol = model.assets[asset_index].volatility
    drift = model.drift_for(asset_index, measure)
    fine = milstein_path(start_value, drift, vol, dt, dw)
    if level == 0:
        return fine, None
    coarse = milstein_path(start_value, drift, vol, 4 * dt, coarse_increments(dw))
    return fine, coarse
