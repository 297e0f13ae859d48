"""MLMC for E[H(E[X | Y])] with adaptive inner sampling and antithetic level differences."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .loss_estimators import InnerVariable
from .market_model import NoiseHandle
from .problem import BLOCK, BlockRunner, CompiledProblem, inner_mean_block, level_block_sums

MAX_LEVEL = 14


class ToleranceUnreachableError(RuntimeError):
    pass


class MissingPilotError(ValueError):
    pass


def heaviside(x):
    """H(x) = 1 for x > 0 and 0 otherwise."""
    return np.where(np.asarray(x) > 0, 1.0, 0.0) if np.ndim(x) else float(x > 0)


@dataclass(frozen=True)
class AdaptiveConfig:
    n0: int = 32
    c: float = 3.0
    r: float = 1.5
    mode: str = "adaptive"

    def __post_init__(self):
        if self.n0 < 2:
            raise ValueError("n0 must be at least 2")
        if not 1 < self.r < 2:
            raise ValueError("r must lie in (1, 2)")
        if not self.c > 0:
            raise ValueError("c must be positive")
        if self.mode not in ("adaptive", "fixed"):
            raise ValueError("mode must be 'adaptive' or 'fixed'")

    @property
    def as_tuple(self):
        return (self.mode, self.n0, self.c, self.r)

    def bounds(self, level: int) -> tuple[int, int]:
        return self.n0 * 2**level, self.n0 * 4**level


def default_adaptive_config(problem: CompiledProblem, **kw) -> AdaptiveConfig:
    """r = 1.1 when random-level Milstein terms are present, else 1.5."""
    kw.setdefault("r", 1.1 if problem.has_approx else 1.5)
    return AdaptiveConfig(**kw)


@dataclass(frozen=True)
class LevelStats:
    level: int
    m: int
    mean_delta: float
    var_delta: float
    var_fine: float
    mean_inner_n: float
    work: float
    work_per_sample: float = 0.0
    work_fine: float = 0.0
    mean_fine: float = 0.0
    in_estimator: bool = True


class _Acc:
    """Running sums for one level and sample kind."""

    def __init__(self):
        self.s = np.zeros(8)

    def add(self, sums):
        self.s += sums

    @property
    def m(self):
        return int(self.s[0])

    def mean(self, i):
        return self.s[i] / self.s[0] if self.s[0] else 0.0

    def var(self, i):
        if self.s[0] < 2:
            return 0.0
        mu = self.s[i] / self.s[0]
        return max(self.s[i + 1] / self.s[0] - mu * mu, 0.0) * self.s[0] / (self.s[0] - 1)


@dataclass
class MlmcResult:
    estimate: float
    std_error: float
    start_level: int
    max_level: int
    per_level: list = field(default_factory=list)
    total_work: float = 0.0
    wall_time: float = 0.0
    converged: bool = True
    tol: float = float("nan")

    @property
    def out_of_range(self) -> bool:
        return not 0.0 <= self.estimate <= 1.0


# --- single-scenario operations ----------------------------------------------------


def inner_estimate(var: InnerVariable, n: int, noise: NoiseHandle):
    """(mean, sum of squares, work) of n inner draws at one scenario."""
    if n < 2:
        raise ValueError("need at least two inner samples")
    ts = var.sampler.inner_draw(var.scenario, var.threshold, noise, n)
    return float(np.mean(ts.value)), float(ts.value @ ts.value), float(np.sum(ts.work))


def _scenario_args(var: InnerVariable):
    p = var.sampler
    rtau = np.asarray(var.scenario.asset_values, dtype=float)
    return rtau, float(var.threshold), p.opts, p.cdf, p.s0, p.sig, p.params, p.flags


def adaptive_n(var: InnerVariable, level: int, cfg: AdaptiveConfig, noise: NoiseHandle):
    """Inner sample count from the doubling rule; returns (N, pilot work)."""
    if cfg.mode == "fixed":
        return cfg.n0 * 4**level, 0.0
    rtau, thr, opts, cdf, s0, sig, params, flags = _scenario_args(var)
    rng = noise.kernel_generator()
    cache = np.full(opts.shape[0], np.nan)
    buf = np.empty((3, 4))
    scratch = np.empty(K.SCRATCH)
    ee_total = 0.0
    if not flags[K.F_SUBSAMPLE]:
        ee_total, _ = K._exact_eval_total(rtau, opts, s0, sig, params, flags)
    n, work = K.adaptive_count(
        level, cfg.n0, cfg.c, cfg.r, rtau, thr, opts, cdf, s0, sig, params, flags, ee_total, cache, buf, scratch, rng
    )
    return int(n), float(work)


def antithetic_delta(var: InnerVariable, level: int, cfg: AdaptiveConfig, noise: NoiseHandle, *, base: bool = False):
    """(delta, fine indicator, work, N_l) for one scenario; ``base`` gives H(E_l) alone."""
    p = var.sampler
    scen = np.asarray(var.scenario.asset_values, dtype=float)[None, :]
    thr = np.array([float(var.threshold)])
    outs = [np.empty(1) for _ in range(5)]
    K.level_block(
        scen, thr, level, base or level == 0, cfg.mode == "adaptive", cfg.n0, float(cfg.c), float(cfg.r),
        p.opts, p.cdf, p.s0, p.sig, p.params, p.flags, noise.kernel_generator(), *outs,
    )
    d, f, n, w, _ = (o[0] for o in outs)
    return float(d), float(f), float(w), int(n)


def select_start_level(fine_var, fine_work, delta_var, delta_work, factor: float = 1.5) -> int:
    """Smallest l0 such that starting at l0 beats starting at any l0' in (l0, L].

    Arrays are indexed by level; delta entries at level 0 are ignored.
    """
    vf = np.asarray(fine_var, dtype=float)
    wf = np.asarray(fine_work, dtype=float)
    vd = np.asarray(delta_var, dtype=float)
    wd = np.asarray(delta_work, dtype=float)
    if len(vf) == 0:
        raise MissingPilotError("no pilot statistics")
    top = len(vf) - 1
    base = np.sqrt(vf * wf)
    step = np.sqrt(vd * wd)
    for l0 in range(top + 1):
        cost = base[l0]
        ok = True
        for l1 in range(l0 + 1, top + 1):
            cost += step[l1]
            if not cost < factor * base[l1]:
                ok = False
                break
        if ok:
            return l0
    return top


# --- driver ---------------------------------------------------------------------------


class _LevelSampler:
    """Owns the block counters so every block of every level has its own stream."""

    def __init__(self, problem, cfg, seed, runner):
        self.problem = problem
        self.cfg = cfg
        self.seed = seed
        self.runner = runner
        self.diff: dict[int, _Acc] = {}
        self.fine: dict[int, _Acc] = {}
        self.work: dict[int, float] = {}
        self.blocks: dict[tuple[int, int], int] = {}

    def run(self, level, m, base):
        n_blocks = -(-int(m) // BLOCK)
        if n_blocks <= 0:
            return
        key = (level, int(base))
        start = self.blocks.get(key, 0)
        self.blocks[key] = start + n_blocks
        args = [(level, base, self.cfg.as_tuple, self.seed, b) for b in range(start, start + n_blocks)]
        results = self.runner.map(level_block_sums, args)
        diff = self.diff.setdefault(level, _Acc())
        fine = self.fine.setdefault(level, _Acc())
        for sums in results:
            if not base:
                diff.add(sums)
            # fine-only accumulator: count, f, f^2 in the delta slots
            fine.add(np.array([sums[0], sums[3], sums[4], sums[3], sums[4], sums[5], sums[7], sums[7]]))
            self.work[level] = self.work.get(level, 0.0) + sums[6]

    def fine_stats(self, level):
        acc = self.fine[level]
        return acc.var(1), acc.s[6] / acc.s[0]

    def diff_stats(self, level):
        if level == 0:
            return self.fine_stats(0)
        acc = self.diff[level]
        return acc.var(1), acc.s[6] / acc.s[0]


def run_mlmc(
    problem: CompiledProblem,
    tol: float,
    cfg: AdaptiveConfig | None = None,
    seed: int = 0,
    *,
    eta_ref: float | None = None,
    m0: int = 1024,
    max_level: int = MAX_LEVEL,
    jobs: int | None = 1,
    start_factor: float = 1.5,
    raise_on_failure: bool = False,
) -> MlmcResult:
    """MLMC estimate of P(E[X | Y] > 0) to RMS accuracy tol (times eta_ref when given).

    Statistical error and bias each get tol / sqrt(2). Pilot samples are
    kept. The bias is estimated from the last three level means assuming
    first-order (base 2) weak convergence.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    cfg = cfg or default_adaptive_config(problem)
    eps = tol * (eta_ref if eta_ref is not None else 1.0)
    t0 = time.perf_counter()
    with BlockRunner(problem, jobs) as runner:
        ls = _LevelSampler(problem, cfg, seed, runner)
        top = 0 if eps >= 1.0 else 2
        for lvl in range(top + 1):
            ls.run(lvl, m0, base=False)
        converged = False
        while True:
            vf, wf = np.array([ls.fine_stats(l) for l in range(top + 1)]).T
            vd, wd = np.array([ls.diff_stats(l) for l in range(top + 1)]).T
            l0 = select_start_level(vf, wf, vd, wd, start_factor)
            var = np.where(np.arange(top + 1) == l0, vf, vd)[l0:]
            cost = np.where(np.arange(top + 1) == l0, wf, wd)[l0:]
            var = np.maximum(var, 1e-12)
            m_opt = np.ceil(2.0 / eps**2 * np.sqrt(var / cost) * np.sum(np.sqrt(var * cost)))
            for lvl, m in zip(range(l0, top + 1), m_opt):
                have = ls.fine[lvl].m if lvl == l0 else ls.diff[lvl].m
                if m > have:
                    ls.run(lvl, m - have, base=(lvl == l0 and lvl > 0))
            if eps >= 1.0:
                converged = True
                break
            means = [ls.diff[l].mean(1) for l in range(max(l0 + 1, top - 2), top + 1)]
            weights = [2.0 ** -(top - l) for l in range(max(l0 + 1, top - 2), top + 1)]
            if means:
                bias = max(abs(m) * w for m, w in zip(means, weights))
                if bias <= eps / math.sqrt(2):
                    converged = True
                    break
            if top >= max_level:
                break
            top += 1
            ls.run(top, m0, base=False)
    if not converged and raise_on_failure:
        raise ToleranceUnreachableError(f"bias above tolerance at level cap {max_level}")

    per_level = []
    estimate = 0.0
    variance = 0.0
    for lvl in range(top + 1):
        fine = ls.fine[lvl]
        if lvl == l0:
            acc, v = fine, fine.var(1)
        else:
            acc = ls.diff[lvl]
            v = acc.var(1)
        used = lvl >= l0
        if used:
            estimate += acc.mean(1)
            variance += v / acc.m
        per_level.append(
            LevelStats(
                level=lvl,
                m=acc.m,
                mean_delta=acc.mean(1),
                var_delta=v,
                var_fine=fine.var(1),
                mean_inner_n=fine.mean(5),
                work=ls.work[lvl],
                work_per_sample=acc.s[6] / acc.m,
                work_fine=fine.s[6] / fine.m,
                mean_fine=fine.mean(1),
                in_estimator=used,
            )
        )
    return MlmcResult(
        estimate=float(estimate),
        std_error=float(math.sqrt(variance)),
        start_level=l0,
        max_level=top,
        per_level=per_level,
        total_work=float(sum(ls.work.values())),
        wall_time=time.perf_counter() - t0,
        converged=converged,
        tol=tol,
    )


def sample_levels(problem: CompiledProblem, levels, m: int, cfg: AdaptiveConfig | None = None, seed: int = 0, jobs=1):
    """Fixed-size pilot at each listed level; returns LevelStats including V_l and V_l^f."""
    cfg = cfg or default_adaptive_config(problem)
    out = []
    with BlockRunner(problem, jobs) as runner:
        ls = _LevelSampler(problem, cfg, seed, runner)
        for lvl in levels:
            ls.run(lvl, m, base=False)
            fine = ls.fine[lvl]
            acc = ls.diff[lvl] if lvl > 0 else fine
            out.append(
                LevelStats(
                    level=lvl,
                    m=acc.m,
                    mean_delta=acc.mean(1),
                    var_delta=acc.var(1),
                    var_fine=fine.var(1),
                    mean_inner_n=fine.mean(5),
                    work=ls.work[lvl],
                    work_per_sample=acc.s[6] / acc.m,
                    work_fine=fine.s[6] / fine.m,
                    mean_fine=fine.mean(1),
                )
            )
    return out


def nested_brute_force(problem: CompiledProblem, m: int, n: int, seed: int = 0, jobs=1):
    """Plain nested MC: m scenarios, n full-portfolio inner samples each. Returns (estimate, std error)."""
    if m < 1 or n < 1:
        raise ValueError("m and n must be positive")
    full = problem if not problem.method.subsampling else problem.with_method(subsampling=False)
    n_blocks = -(-m // BLOCK)
    with BlockRunner(full, jobs) as runner:
        results = runner.map(inner_mean_block, [(n, seed, b) for b in range(n_blocks)])
    means = np.concatenate([r[0] for r in results])[:m]
    h = heaviside(means)
    est = float(h.mean())
    return est, float(math.sqrt(max(est * (1 - est), 0.0) / m))


def exact_loss_probability(problem: CompiledProblem, m: int = 10**6, seed: int = 0, chunk: int = 20000):
    """P(E[X | Y] > 0) by plain MC over scenarios with the analytic conditional loss."""
    noise = NoiseHandle(seed, 0xE7A)
    hits = 0
    done = 0
    while done < m:
        size = min(chunk, m - done)
        scen = problem.sample_scenarios(noise, size)
        hits += int(np.count_nonzero(problem.analytic_inner_mean(scen) > 0))
        done += size
    est = hits / m
    return est, math.sqrt(est * (1 - est) / m)
