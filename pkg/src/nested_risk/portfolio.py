"""Fictitious option portfolios: generation, delta-neutral balancing, thresholds, manifests."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .market_model import AssetParams, MarketModel, NoiseHandle, RiskScenario
from .pricing import OptionKind, VanillaOption, black_scholes


class ComputationModel(str, Enum):
    EXACT_EVAL = "exact_eval"
    EXACT_SIM = "exact_sim"
    APPROX_SIM = "approx_sim"

    @property
    def code(self) -> int:
        return _MODEL_CODES[self]


_MODEL_CODES = {ComputationModel.EXACT_EVAL: 0, ComputationModel.EXACT_SIM: 1, ComputationModel.APPROX_SIM: 2}


class PortfolioGenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class PortfolioEntry:
    option: VanillaOption
    weight: float
    importance: float
    comp_model: ComputationModel

    def __post_init__(self):
        object.__setattr__(self, "comp_model", ComputationModel(self.comp_model))
        if not self.importance > 0:
            raise ValueError(f"importance must be positive, got {self.importance}")


@dataclass(frozen=True)
class Portfolio:
    entries: tuple[PortfolioEntry, ...]
    delta0: np.ndarray
    threshold: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        object.__setattr__(self, "delta0", np.asarray(self.delta0, dtype=float))

    def __len__(self):
        return len(self.entries)

    @property
    def size(self) -> int:
        return len(self.entries)

    @property
    def weights(self) -> np.ndarray:
        return np.array([e.weight for e in self.entries])

    @property
    def importances(self) -> np.ndarray:
        return np.array([e.importance for e in self.entries])

    def models(self) -> list[ComputationModel]:
        return [e.comp_model for e in self.entries]

    def with_threshold(self, threshold: float) -> "Portfolio":
        return replace(self, threshold=float(threshold))

    def with_importance(self, importance) -> "Portfolio":
        imp = np.broadcast_to(np.asarray(importance, dtype=float), (self.size,))
        entries = tuple(replace(e, importance=float(g)) for e, g in zip(self.entries, imp))
        return replace(self, entries=entries)

    def with_models(self, models) -> "Portfolio":
        entries = tuple(replace(e, comp_model=ComputationModel(m)) for e, m in zip(self.entries, models))
        return replace(self, entries=entries)

    @classmethod
    def from_options(cls, options, weights, models, market: MarketModel, *, threshold=0.0, importance=None):
        """Build a portfolio from explicit contracts; delta0 is computed analytically."""
        weights = np.asarray(weights, dtype=float)
        if importance is None:
            importance = np.abs(weights)
        importance = np.broadcast_to(np.asarray(importance, dtype=float), weights.shape)
        models = [ComputationModel(m) for m in np.broadcast_to(np.asarray(models, dtype=object), weights.shape)]
        entries = tuple(
            PortfolioEntry(o, float(w), float(g), m) for o, w, g, m in zip(options, weights, importance, models)
        )
        deltas = option_deltas(options, market)
        return cls(entries, portfolio_delta(options, weights, deltas, market.n_assets), threshold)


def option_deltas(options, market: MarketModel) -> np.ndarray:
    """Analytic time-0 deltas of each contract."""
    if len(options) == 0:
        return np.zeros(0)
    idx = np.array([o.asset_index for o in options])
    _, delta = black_scholes(
        np.array([o.kind.sign for o in options]),
        market.initial_prices[idx],
        np.array([o.strike for o in options]),
        np.array([o.maturity for o in options]),
        0.0,
        market.volatilities[idx],
        market.risk_free_rate,
    )
    return np.atleast_1d(delta)


def portfolio_delta(options, weights, deltas, n_assets: int) -> np.ndarray:
    """(1/P) sum_i w_i dV_i/dR_0, per asset."""
    out = np.zeros(n_assets)
    idx = np.array([o.asset_index for o in options], dtype=int)
    np.add.at(out, idx, np.asarray(weights) * np.asarray(deltas))
    return out / max(len(options), 1)


def balancing_constants(options, raw_weights, deltas, n_assets: int, rel_tol: float = 1e-12) -> np.ndarray:
    """b_k = -(sum_put w~ delta) / (sum_call w~ delta) per asset; 1 for unused assets."""
    put_sum = np.zeros(n_assets)
    call_sum = np.zeros(n_assets)
    gross = np.zeros(n_assets)
    for o, w, d in zip(options, raw_weights, deltas):
        k = o.asset_index
        gross[k] += abs(w * d)
        if o.kind is OptionKind.CALL:
            call_sum[k] += w * d
        else:
            put_sum[k] += w * d
    b = np.ones(n_assets)
    used = gross > 0
    bad = used & (np.abs(call_sum) <= rel_tol * gross)
    if np.any(bad):
        raise PortfolioGenerationError(f"no call delta to balance assets {np.flatnonzero(bad).tolist()}")
    b[used] = -put_sum[used] / call_sum[used]
    return b


@dataclass(frozen=True)
class GenConfig:
    count: int = 1000
    weight_log_sd: float = 3.0
    model_mix: dict = field(default_factory=lambda: {"exact_eval": 0.3, "exact_sim": 0.7})
    maturity_range: tuple = (0.0, 5.0)
    strike_range: tuple = (80.0, 120.0)
    importance: str = "weight"
    threshold: float = 0.0
    seed: int = 0

    def __post_init__(self):
        mix = {ComputationModel(k): float(v) for k, v in dict(self.model_mix).items()}
        object.__setattr__(self, "model_mix", mix)
        if self.count < 2:
            raise ValueError("a balanced portfolio needs at least two options")
        if any(v < 0 for v in mix.values()) or not math.isclose(sum(mix.values()), 1.0, abs_tol=1e-9):
            raise ValueError(f"model mix must be a probability vector, got {mix}")
        if self.weight_log_sd < 0:
            raise ValueError("weight_log_sd must be non-negative")
        lo, hi = self.maturity_range
        if not 0 <= lo < hi:
            raise ValueError("bad maturity range")
        if not 0 < self.strike_range[0] <= self.strike_range[1]:
            raise ValueError("bad strike range")
        if self.importance not in ("weight", "uniform"):
            raise ValueError("importance must be 'weight' or 'uniform'")


def generate(config: GenConfig, model: MarketModel, noise: NoiseHandle | None = None) -> Portfolio:
    """Random delta-neutral portfolio.

    Every asset that carries options gets at least one put and one call.
    When there are fewer than 2Q options only P // 2 assets are used.
    Maturities are drawn uniformly in the configured range but strictly
    beyond the risk horizon.
    """
    noise = noise or NoiseHandle(config.seed, 0x504F5254)
    p = config.count
    q = model.n_assets
    n_used = min(q, p // 2)
    used = np.sort(noise.generator.permutation(q)[:n_used])

    kinds = np.empty(p, dtype=int)
    assets = np.empty(p, dtype=int)
    kinds[: 2 * n_used] = np.tile([-1, 1], n_used)
    assets[: 2 * n_used] = np.repeat(used, 2)
    rest = p - 2 * n_used
    kinds[2 * n_used :] = np.where(noise.uniform(rest) < 0.5, -1, 1)
    assets[2 * n_used :] = used[noise.integers(0, n_used, rest)]

    lo, hi = config.maturity_range
    maturities = lo + (hi - lo) * noise.uniform(p)
    tau = model.risk_horizon
    while np.any(short := maturities <= tau):
        maturities[short] = lo + (hi - lo) * noise.uniform(int(short.sum()))
    k_lo, k_hi = config.strike_range
    strikes = k_lo + (k_hi - k_lo) * noise.uniform(p)
    raw_weights = np.exp(config.weight_log_sd * noise.normal(p))

    names = list(config.model_mix)
    probs = np.array([config.model_mix[n] for n in names])
    choice = np.searchsorted(np.cumsum(probs), noise.uniform(p), side="right")
    models = [names[min(c, len(names) - 1)] for c in choice]

    options = [
        VanillaOption(OptionKind.CALL if s > 0 else OptionKind.PUT, float(k), float(t), int(a))
        for s, k, t, a in zip(kinds, strikes, maturities, assets)
    ]
    deltas = option_deltas(options, model)
    b = balancing_constants(options, raw_weights, deltas, q)
    weights = np.where(kinds > 0, raw_weights * b[assets], raw_weights)
    weights = weights * p / weights.sum()
    if not np.all(np.abs(weights) > 0):
        raise PortfolioGenerationError("balancing produced a zero weight")

    importance = np.abs(weights) if config.importance == "weight" else np.ones(p)
    entries = tuple(
        PortfolioEntry(o, float(w), float(g), m) for o, w, g, m in zip(options, weights, importance, models)
    )
    return Portfolio(entries, portfolio_delta(options, weights, deltas, q), config.threshold)


def generate_with_retry(config: GenConfig, model: MarketModel, attempts: int = 20) -> Portfolio:
    """Retry generation with successive seeds when balancing is degenerate."""
    for k in range(attempts):
        try:
            return generate(replace(config, seed=config.seed + k), model)
        except PortfolioGenerationError:
            continue
    raise PortfolioGenerationError(f"no balanced portfolio after {attempts} seeds")


def adjusted_threshold(portfolio: Portfolio, scenario, r0) -> float:
    """K_eta + (R_tau - R_0) . grad V_0.

    This is the threshold that keeps E[mean of delta-corrected losses - threshold]
    equal to E[mean of raw losses - K_eta] in every scenario.
    """
    r_tau = scenario.asset_values if isinstance(scenario, RiskScenario) else np.asarray(scenario)
    return float(portfolio.threshold + (r_tau - np.asarray(r0)) @ portfolio.delta0)


def level0_adjusted_threshold(portfolio: Portfolio, scenario, r0, level0_delta_estimate) -> float:
    """Threshold when the delta control variate is applied at level 0 only.

    ``level0_delta_estimate`` is the per-asset portfolio average of
    E[D_{i,0}], the sum of both antithetic pathwise deltas at level 0.
    With the exact value E[D] = 2 grad V_0 this coincides with
    ``adjusted_threshold``.
    """
    r_tau = scenario.asset_values if isinstance(scenario, RiskScenario) else np.asarray(scenario)
    return float(portfolio.threshold + 0.5 * (r_tau - np.asarray(r0)) @ np.asarray(level0_delta_estimate))


# --- manifests ---------------------------------------------------------------

_MANIFEST_HEADER = "# nested-risk portfolio manifest v1"


def write_manifest(path, portfolio: Portfolio, market: MarketModel) -> None:
    lines = [
        _MANIFEST_HEADER,
        f"market correlation={market.correlation!r} rate={market.risk_free_rate!r} horizon={market.risk_horizon!r}",
    ]
    for k, a in enumerate(market.assets):
        lines.append(f"asset {k} {a.initial_price!r} {a.drift!r} {a.volatility!r}")
    lines.append(f"threshold {portfolio.threshold!r}")
    lines.append("# option kind asset maturity strike weight importance model")
    for e in portfolio.entries:
        o = e.option
        lines.append(
            f"option {o.kind.value} {o.asset_index} {o.maturity!r} {o.strike!r} "
            f"{e.weight!r} {e.importance!r} {e.comp_model.value}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> tuple[Portfolio, MarketModel]:
    text = Path(path).read_text()
    market_kw = {}
    assets = []
    threshold = 0.0
    options, weights, importance, models = [], [], [], []
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        tag, *rest = line.split()
        try:
            if tag == "market":
                for item in rest:
                    key, val = item.split("=")
                    market_kw[key] = float(val)
            elif tag == "asset":
                assets.append(AssetParams(float(rest[1]), float(rest[2]), float(rest[3])))
            elif tag == "threshold":
                threshold = float(rest[0])
            elif tag == "option":
                kind, asset, mat, strike, w, g, m = rest
                options.append(VanillaOption(OptionKind(kind), float(strike), float(mat), int(asset)))
                weights.append(float(w))
                importance.append(float(g))
                models.append(ComputationModel(m))
            else:
                raise ValueError(f"unknown record {tag!r}")
        except (ValueError, IndexError) as exc:
            raise ValueError(f"{path}:{n}: {exc}") from exc
    market = MarketModel(
        tuple(assets),
        market_kw.get("correlation", 0.2),
        market_kw.get("rate", 0.05),
        market_kw.get("horizon", 0.02),
    )
    portfolio = Portfolio.from_options(
        options, weights, models, market, threshold=threshold, importance=np.array(importance)
    )
    return portfolio, market
