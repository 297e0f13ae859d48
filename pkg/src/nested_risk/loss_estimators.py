"""Per-option inner terms f_i for the three computation models.

These are vectorised numpy implementations working on one portfolio entry
at a time. The compiled kernels used by the MLMC driver implement the same
constructions and are cross-checked against these in the tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import integrate
from scipy.special import ndtr

from .market_model import (
    InvalidContractError,
    MarketModel,
    NoiseHandle,
    RiskScenario,
    coarse_increments,
    milstein_path,
)
from .portfolio import ComputationModel, PortfolioEntry
from .pricing import bs_price_delta, pathwise_delta, payoff

MAX_RANDOM_LEVEL = 20


class DeltaCvMode(str, Enum):
    ALL_LEVELS = "all_levels"
    LEVEL0_ONLY = "level0_only"
    OFF = "off"

    @property
    def code(self) -> int:
        return {DeltaCvMode.OFF: 0, DeltaCvMode.LEVEL0_ONLY: 1, DeltaCvMode.ALL_LEVELS: 2}[self]


@dataclass(frozen=True)
class TermSample:
    """One (or a vector of) realisations of f_i with the evaluations charged."""

    value: float | np.ndarray
    work: float | np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.work) < 1):
            raise ValueError("every term sample costs at least one evaluation")


@dataclass(frozen=True)
class LevelDistribution:
    zeta: float = 1.5
    beta: float = 2.0
    gamma: float = 1.0
    normalizer: float = field(init=False)

    def __post_init__(self):
        if not self.gamma < self.zeta < self.beta:
            raise ValueError(f"need gamma < zeta < beta, got {self.gamma}, {self.zeta}, {self.beta}")
        object.__setattr__(self, "normalizer", 1.0 / (1.0 - 4.0 ** (-self.zeta)))

    def probability(self, level):
        return 4.0 ** (-self.zeta * np.asarray(level)) / self.normalizer

    def expected_work(self, legs: float = 3.0, max_level: int = MAX_RANDOM_LEVEL) -> float:
        """sum_j P(l=j) * legs * (4^j + 4^(j-1)), with the top level absorbing the tail mass."""
        j = np.arange(max_level + 1)
        p = self.probability(j)
        p[-1] = 1.0 - p[:-1].sum()
        cost = 4.0**j + np.where(j > 0, 4.0 ** (j - 1), 0.0)
        return float(legs * p @ cost)


@dataclass(frozen=True)
class InnerVariable:
    """X = f_j / (P p_j) - threshold, given a scenario."""

    scenario: RiskScenario
    threshold: float
    sampler: object  # a CompiledProblem

    def __post_init__(self):
        if not math.isfinite(self.threshold):
            raise ValueError("threshold must be finite")


def _asset(model: MarketModel, entry: PortfolioEntry):
    k = entry.option.asset_index
    return k, model.assets[k]


def exact_eval_term(entry: PortfolioEntry, scenario: RiskScenario, model: MarketModel, *, delta_cv=True) -> TermSample:
    """w (V_0 - V_tau(R_tau) - (R_0 - R_tau) dV_0/dR_0), all analytic."""
    k, asset = _asset(model, entry)
    opt = entry.option
    r = model.risk_free_rate
    v0, d0 = bs_price_delta(opt, asset.initial_price, 0.0, asset.volatility, r)
    r_tau = scenario.asset_values[k]
    v_tau, _ = bs_price_delta(opt, r_tau, model.risk_horizon, asset.volatility, r)
    f = v0 - v_tau
    if delta_cv:
        f -= (asset.initial_price - r_tau) * d0
    return TermSample(entry.weight * f, 1.0)


def exact_sim_term(
    entry: PortfolioEntry,
    scenario: RiskScenario,
    model: MarketModel,
    noise: NoiseHandle,
    *,
    antithetic=True,
    delta_cv=True,
    shared_tail=True,
    size=None,
) -> TermSample:
    """Exactly simulated loss with antithetic legs, shared tail and pathwise-delta correction."""
    k, asset = _asset(model, entry)
    opt = entry.option
    r = model.risk_free_rate
    tau = model.risk_horizon
    if opt.maturity <= tau:
        raise InvalidContractError("exact simulation needs maturity beyond the risk horizon")
    sig = asset.volatility
    s0 = asset.initial_price
    r_tau = scenario.asset_values[k]
    drift = r - 0.5 * sig * sig
    head = sig * math.sqrt(tau) * noise.normal(size)
    z_tail = noise.normal(size)
    tail = drift * (opt.maturity - tau) + sig * math.sqrt(opt.maturity - tau) * z_tail
    if shared_tail:
        tail_c = tail
    else:
        tail_c = drift * (opt.maturity - tau) + sig * math.sqrt(opt.maturity - tau) * noise.normal(size)
    s_c = r_tau * np.exp(tail_c)
    s_p = s0 * np.exp(drift * tau + head + tail)
    if antithetic:
        s_m = s0 * np.exp(drift * tau - head + tail)
        lam = 0.5 * (payoff(opt, s_p, r) + payoff(opt, s_m, r))
        sens = 0.5 * (pathwise_delta(opt, s_p, s_p / s0, r) + pathwise_delta(opt, s_m, s_m / s0, r))
        work = 3.0
    else:
        lam = payoff(opt, s_p, r)
        sens = pathwise_delta(opt, s_p, s_p / s0, r)
        work = 2.0
    lam = lam - payoff(opt, s_c, r)
    if delta_cv:
        lam = lam - (s0 - r_tau) * sens
    value = entry.weight * lam
    return TermSample(value, work if size is None else np.full(np.shape(value), work))


def sample_level(dist: LevelDistribution, noise: NoiseHandle, size=None):
    """Random level with P(l = j) = 4^(-zeta j) / C_zeta, by inversion of the geometric tail."""
    u = 1.0 - noise.uniform(size)
    lvl = np.floor(-np.log(u) / (dist.zeta * math.log(4.0))).astype(np.int64)
    lvl = np.minimum(lvl, MAX_RANDOM_LEVEL)
    return int(lvl) if size is None else lvl


def _milstein_factor(vol, dt, dw):
    # discounted-price Milstein product, started from 1
    return milstein_path(1.0, 0.0, vol, dt, dw)


def approx_level_difference(
    entry: PortfolioEntry,
    scenario: RiskScenario,
    model: MarketModel,
    level: int,
    noise: NoiseHandle,
    *,
    delta_cv_mode=DeltaCvMode.LEVEL0_ONLY,
    antithetic=True,
    shared_tail=True,
    size=None,
) -> TermSample:
    """w * (Lambda_l - Lambda_{l-1}) with coupled Milstein paths of 4^l and 4^(l-1) steps per segment."""
    mode = DeltaCvMode(delta_cv_mode)
    k, asset = _asset(model, entry)
    opt = entry.option
    r = model.risk_free_rate
    tau = model.risk_horizon
    sig = asset.volatility
    s0 = asset.initial_price
    r_tau = scenario.asset_values[k]
    n = 4**level
    m = 1 if size is None else int(size)
    dt_h = tau / n
    dt_t = (opt.maturity - tau) / n
    dw_h = math.sqrt(dt_h) * noise.normal((m, n))
    dw_t = math.sqrt(dt_t) * noise.normal((m, n))
    dw_c = dw_t if shared_tail else math.sqrt(dt_t) * noise.normal((m, n))
    use_delta = mode is DeltaCvMode.ALL_LEVELS or (mode is DeltaCvMode.LEVEL0_ONLY and level == 0)

    def loss(dwh, dwt, dwc, dth, dtt):
        tail = _milstein_factor(sig, dtt, dwt)
        s_p = s0 * _milstein_factor(sig, dth, dwh) * tail * math.exp(r * opt.maturity)
        s_c = r_tau * _milstein_factor(sig, dtt, dwc) * math.exp(r * (opt.maturity - tau))
        if antithetic:
            s_m = s0 * _milstein_factor(sig, dth, -dwh) * tail * math.exp(r * opt.maturity)
            lam = 0.5 * (payoff(opt, s_p, r) + payoff(opt, s_m, r))
            sens = 0.5 * (pathwise_delta(opt, s_p, s_p / s0, r) + pathwise_delta(opt, s_m, s_m / s0, r))
        else:
            lam = payoff(opt, s_p, r)
            sens = pathwise_delta(opt, s_p, s_p / s0, r)
        lam = lam - payoff(opt, s_c, r)
        if use_delta:
            lam = lam - (s0 - r_tau) * sens
        return lam

    diff = loss(dw_h, dw_t, dw_c, dt_h, dt_t)
    if level > 0:
        cw_h, cw_t = coarse_increments(dw_h), coarse_increments(dw_t)
        cw_c = cw_t if shared_tail else coarse_increments(dw_c)
        diff = diff - loss(cw_h, cw_t, cw_c, 4 * dt_h, 4 * dt_t)
    legs = 3.0 if antithetic else 2.0
    work = legs * (n + (n // 4 if level > 0 else 0))
    value = entry.weight * diff
    if size is None:
        return TermSample(float(value[0]), work)
    return TermSample(value, np.full(m, work))


def approx_sim_term(
    entry: PortfolioEntry,
    scenario: RiskScenario,
    model: MarketModel,
    dist: LevelDistribution,
    noise: NoiseHandle,
    delta_cv_mode=DeltaCvMode.LEVEL0_ONLY,
    *,
    antithetic=True,
    shared_tail=True,
    size=None,
) -> TermSample:
    """Single-term unbiased estimator C_zeta 4^(zeta l) dLambda_l with a random level l."""
    levels = sample_level(dist, noise, 1 if size is None else size)
    values = np.empty(len(levels))
    works = np.empty(len(levels))
    for lvl in np.unique(levels):
        idx = np.flatnonzero(levels == lvl)
        ts = approx_level_difference(
            entry, scenario, model, int(lvl), noise.spawn(int(lvl)),
            delta_cv_mode=delta_cv_mode, antithetic=antithetic, shared_tail=shared_tail, size=len(idx),
        )
        values[idx] = dist.normalizer * 4.0 ** (dist.zeta * lvl) * ts.value
        works[idx] = ts.work
    if size is None:
        return TermSample(float(values[0]), float(works[0]))
    return TermSample(values, works)


def inner_draw(var: InnerVariable, noise: NoiseHandle, size=None) -> TermSample:
    """X samples: f_j / (P p_j) - threshold, or the full average without sub-sampling."""
    return var.sampler.inner_draw(var.scenario, var.threshold, noise, size)


# --- level-0 mean pathwise delta ---------------------------------------------


def _truncated_quadratic_mean(c0, c1, c2, lo, hi):
    """E[(c0 + c1 Z + c2 Z^2) 1{lo < Z < hi}] for standard normal Z."""

    def prim(u):
        if u == -np.inf:
            return 0.0
        if u == np.inf:
            return c0 + c2
        phi = math.exp(-0.5 * u * u) / math.sqrt(2 * math.pi)
        cdf = float(ndtr(u))
        return c0 * cdf - c1 * phi + c2 * (cdf - u * phi)

    return prim(hi) - prim(lo)


def _mean_above(c0, c1, c2, kappa):
    """E[b(Z) 1{b(Z) > kappa}] with b(z) = c0 + c1 z + c2 z^2, c2 >= 0."""
    if c2 == 0.0:
        if c1 == 0.0:
            return c0 if c0 > kappa else 0.0
        root = (kappa - c0) / c1
        return _truncated_quadratic_mean(c0, c1, 0.0, root, np.inf) if c1 > 0 else _truncated_quadratic_mean(c0, c1, 0.0, -np.inf, root)
    disc = c1 * c1 - 4.0 * c2 * (c0 - kappa)
    if disc <= 0.0:
        return c0 + c2
    sq = math.sqrt(disc)
    z_lo = (-c1 - sq) / (2.0 * c2)
    z_hi = (-c1 + sq) / (2.0 * c2)
    return (c0 + c2) - _truncated_quadratic_mean(c0, c1, c2, z_lo, z_hi)


def level0_mean_delta(entry: PortfolioEntry, model: MarketModel) -> float:
    """E[h'(S_0(T)) S_0(T) / S(0)] for the one-step-per-segment Milstein path from S(0).

    This is half of E[D_{i,0}] (one antithetic leg) and does not depend on
    the scenario. The inner Gaussian integral over the tail increment is in
    closed form; the outer one is done by adaptive quadrature.
    """
    k, asset = _asset(model, entry)
    opt = entry.option
    sig = asset.volatility
    tau = model.risk_horizon
    r = model.risk_free_rate
    growth = asset.initial_price * math.exp(r * opt.maturity)
    kappa = opt.strike / growth
    sign = opt.kind.sign

    def milstein_coeffs(h):
        c = sig * math.sqrt(h)
        return 1.0 - 0.5 * c * c, c, 0.5 * c * c

    a0, a1, a2 = milstein_coeffs(tau)
    b0, b1, b2 = milstein_coeffs(opt.maturity - tau)

    def integrand(z):
        a = a0 + a1 * z + a2 * z * z
        if a == 0.0:
            return 0.0
        above = _mean_above(b0, b1, b2, kappa / a)
        # E[b 1{a b > kappa}]: flip the region when a < 0
        itm_call = above if a > 0 else (b0 + b2) - above
        part = itm_call if sign > 0 else (b0 + b2) - itm_call
        return math.exp(-0.5 * z * z) / math.sqrt(2 * math.pi) * a * part

    val, _ = integrate.quad(integrand, -np.inf, np.inf, epsabs=1e-12, epsrel=1e-10, limit=200)
    return float(sign * val)


def expected_term_work(comp_model: ComputationModel, dist: LevelDistribution | None = None, antithetic=True) -> float:
    """Expected evaluations per sample of a term: 1, 3 (or 2), or the random-level Milstein cost."""
    comp_model = ComputationModel(comp_model)
    legs = 3.0 if antithetic else 2.0
    if comp_model is ComputationModel.EXACT_EVAL:
        return 1.0
    if comp_model is ComputationModel.EXACT_SIM:
        return legs
    return (dist or LevelDistribution()).expected_work(legs)
