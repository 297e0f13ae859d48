"""A portfolio, a market and a method variant compiled into flat arrays for the kernels."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels as K
from .loss_estimators import DeltaCvMode, LevelDistribution, TermSample, expected_term_work, level0_mean_delta
from .market_model import MarketModel, NoiseHandle, RiskScenario, sample_risk_scenarios
from .portfolio import Portfolio
from .pricing import black_scholes
from .subsampling import optimal_probabilities

BLOCK = 64


@dataclass(frozen=True)
class MethodConfig:
    """Which variance-reduction devices are switched on."""

    subsampling: bool = True
    antithetic: bool = True
    delta_cv: bool = True
    shared_tail: bool = True
    approx_delta_mode: DeltaCvMode = DeltaCvMode.LEVEL0_ONLY
    level_dist: LevelDistribution = field(default_factory=LevelDistribution)

    def __post_init__(self):
        object.__setattr__(self, "approx_delta_mode", DeltaCvMode(self.approx_delta_mode))

    @classmethod
    def no_cv(cls, **kw):
        """Delta and antithetic control variates off; the shared tail path is kept."""
        return cls(antithetic=False, delta_cv=False, approx_delta_mode=DeltaCvMode.OFF, **kw)


@dataclass(frozen=True)
class CompiledProblem:
    market: MarketModel
    portfolio: Portfolio
    method: MethodConfig
    opts: np.ndarray
    cdf: np.ndarray
    s0: np.ndarray
    sig: np.ndarray
    params: np.ndarray
    flags: np.ndarray
    threshold_gradient: np.ndarray

    @property
    def size(self) -> int:
        return self.opts.shape[0]

    @property
    def probabilities(self) -> np.ndarray:
        return self.opts[:, K.PROB]

    @property
    def term_work(self) -> np.ndarray:
        return self.opts[:, K.WORK]

    @property
    def has_approx(self) -> bool:
        return bool(np.any(self.opts[:, K.MODEL] == K.APPROX_SIM))

    def with_method(self, **changes) -> "CompiledProblem":
        return compile_problem(self.portfolio, self.market, replace(self.method, **changes))

    def sample_scenarios(self, noise: NoiseHandle, size: int) -> np.ndarray:
        return sample_risk_scenarios(self.market, noise, size)

    def thresholds(self, scenarios) -> np.ndarray:
        """Scenario-adjusted thresholds matching the control variates in use."""
        scen = np.atleast_2d(np.asarray(scenarios, dtype=float))
        return self.portfolio.threshold + (scen - self.s0) @ self.threshold_gradient

    def analytic_inner_mean(self, scenarios) -> np.ndarray:
        """E[X | R_tau] = (1/P) sum w_i (V_0 - V_tau) - K_eta, exact for vanilla options."""
        scen = np.atleast_2d(np.asarray(scenarios, dtype=float))
        o = self.opts
        k = o[:, K.ASSET].astype(int)
        v_tau, _ = black_scholes(
            o[:, K.SIGN], scen[:, k], o[:, K.STRIKE], o[:, K.MATURITY], self.market.risk_horizon,
            self.sig[k], self.market.risk_free_rate,
        )
        loss = (o[:, K.WEIGHT] * (o[:, K.V0] - v_tau)).sum(axis=1) / self.size
        return loss - self.portfolio.threshold

    def inner_draw(self, scenario, threshold, noise: NoiseHandle, size=None) -> TermSample:
        rtau = np.asarray(scenario.asset_values if isinstance(scenario, RiskScenario) else scenario, dtype=float)
        n = 1 if size is None else int(size)
        values = np.empty(n)
        works = np.empty(n)
        K.x_samples(
            rtau, float(threshold), n, self.opts, self.cdf, self.s0, self.sig, self.params, self.flags,
            noise.kernel_generator(), values, works,
        )
        if size is None:
            return TermSample(float(values[0]), float(works[0]))
        return TermSample(values, works)


def compile_problem(portfolio: Portfolio, market: MarketModel, method: MethodConfig | None = None) -> CompiledProblem:
    method = method or MethodConfig()
    entries = portfolio.entries
    p = len(entries)
    if p == 0:
        raise ValueError("empty portfolio")
    r = market.risk_free_rate
    opts = np.zeros((p, K.N_COLS))
    opts[:, K.SIGN] = [e.option.kind.sign for e in entries]
    opts[:, K.STRIKE] = [e.option.strike for e in entries]
    opts[:, K.MATURITY] = [e.option.maturity for e in entries]
    opts[:, K.ASSET] = [e.option.asset_index for e in entries]
    opts[:, K.WEIGHT] = [e.weight for e in entries]
    opts[:, K.MODEL] = [e.comp_model.code for e in entries]
    if np.any(opts[:, K.ASSET] >= market.n_assets):
        raise ValueError("option refers to an asset outside the market")
    if np.any(opts[:, K.MATURITY] <= market.risk_horizon):
        raise ValueError("every maturity must exceed the risk horizon")
    k = opts[:, K.ASSET].astype(int)
    v0, d0 = black_scholes(
        opts[:, K.SIGN], market.initial_prices[k], opts[:, K.STRIKE], opts[:, K.MATURITY], 0.0,
        market.volatilities[k], r,
    )
    opts[:, K.V0] = v0
    vol = market.volatilities[k]
    tau = market.risk_horizon
    mat = opts[:, K.MATURITY]
    drift = r - 0.5 * vol**2
    opts[:, K.DISC] = np.exp(-r * mat)
    opts[:, K.HEAD_GROWTH] = np.exp(drift * tau)
    opts[:, K.TAIL_MEAN] = drift * (mat - tau)
    opts[:, K.TAIL_SD] = vol * np.sqrt(mat - tau)
    opts[:, K.HEAD_SD] = vol * np.sqrt(tau)
    opts[:, K.DELTA0] = d0
    approx = opts[:, K.MODEL] == K.APPROX_SIM
    mode = method.approx_delta_mode
    if np.any(approx) and mode is DeltaCvMode.LEVEL0_ONLY:
        for i in np.flatnonzero(approx):
            opts[i, K.ED0H] = level0_mean_delta(entries[i], market)

    # threshold gradient: (1/P) sum_i w_i c_i e_{k_i}
    coef = np.zeros(p)
    if method.delta_cv:
        coef[~approx] = d0[~approx]
    if mode is DeltaCvMode.ALL_LEVELS:
        coef[approx] = d0[approx]
    elif mode is DeltaCvMode.LEVEL0_ONLY:
        coef[approx] = opts[approx, K.ED0H]
    grad = np.zeros(market.n_assets)
    np.add.at(grad, k, opts[:, K.WEIGHT] * coef)
    grad /= p

    dist = method.level_dist
    opts[:, K.WORK] = [expected_term_work(e.comp_model, dist, method.antithetic) for e in entries]
    sampler = optimal_probabilities(portfolio.importances, opts[:, K.WORK])
    opts[:, K.PROB] = sampler.probabilities

    params = np.array([r, market.risk_horizon, dist.zeta, dist.normalizer])
    flags = np.zeros(5, dtype=np.int64)
    flags[K.F_ANTITHETIC] = method.antithetic
    flags[K.F_DELTA] = method.delta_cv
    flags[K.F_SHARED_TAIL] = method.shared_tail
    flags[K.F_APPROX_MODE] = mode.code
    flags[K.F_SUBSAMPLE] = method.subsampling
    return CompiledProblem(
        market, portfolio, method, opts, sampler.cumulative, market.initial_prices, market.volatilities,
        params, flags, grad,
    )


# --- block evaluation ----------------------------------------------------------

# per-block sums: count, d, d^2, f, f^2, N, work, fine-only work
N_SUMS = 8


def level_block_sums(problem: CompiledProblem, level, base, adaptive, seed, block) -> np.ndarray:
    """Run one block of BLOCK scenarios at a level and return its summed statistics."""
    mode, n0, c, r = adaptive
    noise = NoiseHandle(seed, level, int(base), block)
    scen = problem.sample_scenarios(noise, BLOCK)
    thr = problem.thresholds(scen)
    outs = [np.empty(BLOCK) for _ in range(5)]
    K.level_block(
        scen, thr, level, bool(base), mode == "adaptive", int(n0), float(c), float(r),
        problem.opts, problem.cdf, problem.s0, problem.sig, problem.params, problem.flags,
        noise.kernel_generator(), *outs,
    )
    d, f, n, w, wf = outs
    return np.array([BLOCK, d.sum(), d @ d, f.sum(), f @ f, n.sum(), w.sum(), wf.sum()])


def inner_mean_block(problem: CompiledProblem, n, seed, block):
    noise = NoiseHandle(seed, 0xB5, block)
    scen = problem.sample_scenarios(noise, BLOCK)
    thr = problem.thresholds(scen)
    mean, var, work = np.empty(BLOCK), np.empty(BLOCK), np.empty(BLOCK)
    K.inner_mean_block(
        scen, thr, int(n), problem.opts, problem.cdf, problem.s0, problem.sig, problem.params, problem.flags,
        noise.kernel_generator(), mean, var, work,
    )
    return mean, var, work


_WORKER_PROBLEM = None


def _init_worker(problem):
    global _WORKER_PROBLEM
    _WORKER_PROBLEM = problem


def _run_task(task):
    fn, args = task
    return fn(_WORKER_PROBLEM, *args)


class BlockRunner:
    """Evaluates blocks serially or on a process pool; results come back in submission order."""

    def __init__(self, problem: CompiledProblem, jobs: int | None = 1):
        self.problem = problem
        self.jobs = (os.cpu_count() or 1) if jobs is None else max(int(jobs), 1)
        self._pool = None

    def __enter__(self):
        if self.jobs > 1:
            self._pool = ProcessPoolExecutor(self.jobs, initializer=_init_worker, initargs=(self.problem,))
        return self

    def __exit__(self, *exc):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def map(self, fn, arg_list):
        if self._pool is None:
            return [fn(self.problem, *args) for args in arg_list]
        chunk = max(1, len(arg_list) // (4 * self.jobs))
        return list(self._pool.map(_run_task, [(fn, args) for args in arg_list], chunksize=chunk))

