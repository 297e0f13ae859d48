"""Experiment configuration, method-variant wiring and CSV output."""

from __future__ import annotations

import configparser
import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .loss_estimators import DeltaCvMode
from .market_model import MarketModel, NoiseHandle, random_market
from .mlmc import MAX_LEVEL, AdaptiveConfig, MlmcResult, ToleranceUnreachableError, run_mlmc
from .portfolio import ComputationModel, GenConfig, Portfolio, generate_with_retry, read_manifest
from .problem import CompiledProblem, MethodConfig, compile_problem

VARIANTS = ("full", "no_subsampling", "no_cv", "non_adaptive", "full_approx")
APPROX_MIX = {"exact_eval": 0.3, "exact_sim": 0.5, "approx_sim": 0.2}

RUN_HEADER = ["variant", "tol", "eta_estimate", "std_error", "start_level", "max_level", "total_work", "status"]
LEVEL_HEADER = ["level", "var_delta", "var_fine", "mean_inner_n", "work", "m"]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MarketSpec:
    n_assets: int = 16
    seed: int = 7
    correlation: float = 0.2
    rate: float = 0.05
    horizon: float = 0.02

    def build(self) -> MarketModel:
        return random_market(
            self.n_assets, NoiseHandle(self.seed, 0x4D4B54), correlation=self.correlation,
            risk_free_rate=self.rate, risk_horizon=self.horizon,
        )


@dataclass(frozen=True)
class ExperimentConfig:
    gen: GenConfig | None = None
    manifest: str | None = None
    market: MarketSpec = field(default_factory=MarketSpec)
    variants: tuple = ("full",)
    tolerances: tuple = (0.2, 0.1, 0.05)
    eta_ref: float = 0.03
    threshold: float | None = None
    eta_target: float = 0.03
    calibration_samples: int = 200_000
    seed: int = 0
    jobs: int | None = None
    output: str = "results.csv"
    level_tables: bool = True
    n0: int = 32
    c: float = 3.0
    r: float = 1.5
    r_approx: float = 1.1
    m0: int = 1024
    max_level: int = MAX_LEVEL

    def __post_init__(self):
        if (self.gen is None) == (self.manifest is None):
            raise ConfigError("give exactly one of a generator config or a manifest path")
        bad = [v for v in self.variants if v not in VARIANTS]
        if bad or not self.variants:
            raise ConfigError(f"unknown variants {bad}; valid: {', '.join(VARIANTS)}")
        tols = list(self.tolerances)
        if not tols or any(t <= 0 for t in tols) or any(a <= b for a, b in zip(tols, tols[1:])):
            raise ConfigError("tolerances must be positive and strictly decreasing")
        if not self.eta_ref > 0:
            raise ConfigError("eta_ref must be positive")
        if not 0 < self.eta_target < 1:
            raise ConfigError("eta_target must lie in (0, 1)")


@dataclass
class RunRecord:
    variant: str
    tol: float
    eta_estimate: float
    std_error: float
    start_level: int
    max_level: int
    total_work: float
    wall_seconds: float
    status: str
    levels: list = field(default_factory=list)

    def row(self) -> list[str]:
        return [
            self.variant, f"{self.tol:.6g}", f"{self.eta_estimate:.10f}", f"{self.std_error:.10f}",
            str(self.start_level), str(self.max_level), f"{self.total_work:.0f}", self.status,
        ]


# --- config parsing -----------------------------------------------------------------


def _floats(text: str) -> tuple:
    return tuple(float(x) for x in text.replace(",", " ").split())


def _mix(text: str) -> dict:
    out = {}
    for part in text.split(","):
        if part.strip():
            name, value = part.split(":")
            out[name.strip()] = float(value)
    return out


def load_config(path) -> ExperimentConfig:
    """Read an INI experiment file; missing keys take the defaults above."""
    cp = configparser.ConfigParser()
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except OSError:
        raise
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    try:
        return parse_config(cp, base=Path(path).parent)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def parse_config(cp: configparser.ConfigParser, base: Path = Path(".")) -> ExperimentConfig:
    kw = {}
    if cp.has_section("market"):
        m = cp["market"]
        kw["market"] = MarketSpec(
            n_assets=m.getint("n_assets", 16), seed=m.getint("seed", 7), correlation=m.getfloat("correlation", 0.2),
            rate=m.getfloat("rate", 0.05), horizon=m.getfloat("horizon", 0.02),
        )
    p = cp["portfolio"] if cp.has_section("portfolio") else {}
    if "manifest" in p:
        kw["manifest"] = str(base / p["manifest"])
    else:
        gk = {}
        if "count" in p:
            gk["count"] = int(p["count"])
        if "weight_log_sd" in p:
            gk["weight_log_sd"] = float(p["weight_log_sd"])
        if "model_mix" in p:
            gk["model_mix"] = _mix(p["model_mix"])
        if "importance" in p:
            gk["importance"] = p["importance"].strip()
        if "seed" in p:
            gk["seed"] = int(p["seed"])
        kw["gen"] = GenConfig(**gk)
    if cp.has_section("threshold"):
        t = cp["threshold"]
        if "value" in t:
            kw["threshold"] = t.getfloat("value")
        kw["eta_target"] = t.getfloat("eta_target", 0.03)
        kw["calibration_samples"] = t.getint("samples", 200_000)
    if cp.has_section("experiment"):
        e = cp["experiment"]
        if "variants" in e:
            kw["variants"] = tuple(v.strip() for v in e["variants"].replace(",", " ").split())
        if "tolerances" in e:
            kw["tolerances"] = _floats(e["tolerances"])
        for key in ("eta_ref", "c", "r", "r_approx"):
            if key in e:
                kw[key] = e.getfloat(key)
        for key in ("seed", "n0", "m0", "max_level"):
            if key in e:
                kw[key] = e.getint(key)
        if "jobs" in e:
            kw["jobs"] = e.getint("jobs")
        if "output" in e:
            kw["output"] = str(base / e["output"])
        if "level_tables" in e:
            kw["level_tables"] = e.getboolean("level_tables")
    return ExperimentConfig(**kw)


# --- portfolio set-up -------------------------------------------------------------------


def calibrate_threshold(portfolio: Portfolio, market: MarketModel, eta: float, samples: int, seed: int = 0) -> float:
    """Loss threshold K with P(analytic loss > K) = eta over a fixed scenario sample."""
    prob = compile_problem(portfolio.with_threshold(0.0), market, MethodConfig(subsampling=False))
    scen = prob.sample_scenarios(NoiseHandle(seed, 0x4B), samples)
    return float(np.quantile(prob.analytic_inner_mean(scen), 1.0 - eta))


def build_portfolio(config: ExperimentConfig) -> tuple[Portfolio, MarketModel]:
    if config.manifest is not None:
        return read_manifest(config.manifest)
    market = config.market.build()
    pf = generate_with_retry(config.gen, market)
    k = config.threshold
    if k is None:
        k = calibrate_threshold(pf, market, config.eta_target, config.calibration_samples, config.seed)
    return pf.with_threshold(k), market


def reassign_models(portfolio: Portfolio, mix: dict, seed: int) -> Portfolio:
    """Redraw each option's computation model independently from ``mix``."""
    noise = NoiseHandle(seed, 0x4D4958)
    names = [ComputationModel(n) for n in mix]
    cum = np.cumsum([mix[n] for n in mix])
    idx = np.minimum(np.searchsorted(cum, noise.uniform(portfolio.size), side="right"), len(names) - 1)
    return portfolio.with_models([names[i] for i in idx])


def variant_problem(variant: str, portfolio: Portfolio, market: MarketModel, config: ExperimentConfig):
    """Compiled problem and adaptive config for one method variant."""
    cfg = AdaptiveConfig(n0=config.n0, c=config.c, r=config.r)
    if variant == "full":
        method = MethodConfig()
    elif variant == "no_subsampling":
        method = MethodConfig(subsampling=False)
    elif variant == "no_cv":
        method = MethodConfig.no_cv()
    elif variant == "non_adaptive":
        method = MethodConfig()
        cfg = replace(cfg, mode="fixed")
    elif variant == "full_approx":
        portfolio = reassign_models(portfolio, APPROX_MIX, config.seed)
        method = MethodConfig(approx_delta_mode=DeltaCvMode.LEVEL0_ONLY)
        cfg = replace(cfg, r=config.r_approx)
    else:
        raise ConfigError(f"unknown variant {variant!r}")
    return compile_problem(portfolio, market, method), cfg


# --- running ----------------------------------------------------------------------------


def record_from_result(variant: str, tol: float, res: MlmcResult) -> RunRecord:
    status = "ok" if res.converged else "unreachable"
    if res.out_of_range:
        status += "_out_of_range"
    return RunRecord(
        variant, tol, res.estimate, res.std_error, res.start_level, res.max_level, res.total_work, res.wall_time,
        status, list(res.per_level),
    )


def run_experiment(config: ExperimentConfig, *, portfolio=None, market=None, progress=None) -> list[RunRecord]:
    """Every (variant, tol) pair; rows are appended to the CSV as they finish."""
    if portfolio is None:
        portfolio, market = build_portfolio(config)
    out = Path(config.output)
    timing = out.with_name(out.stem + "_timing.csv")
    records = []
    with open(out, "w", newline="") as fh, open(timing, "w", newline="") as th:
        writer = csv.writer(fh, lineterminator="\n")
        twriter = csv.writer(th, lineterminator="\n")
        writer.writerow(RUN_HEADER)
        twriter.writerow(["variant", "tol", "wall_seconds"])
        for variant in config.variants:
            problem, cfg = variant_problem(variant, portfolio, market, config)
            for tol in config.tolerances:
                try:
                    res = run_mlmc(
                        problem, tol, cfg, config.seed, eta_ref=config.eta_ref, m0=config.m0,
                        max_level=config.max_level, jobs=config.jobs,
                    )
                    rec = record_from_result(variant, tol, res)
                except ToleranceUnreachableError:
                    rec = RunRecord(variant, tol, math.nan, math.nan, -1, -1, 0.0, 0.0, "unreachable")
                records.append(rec)
                writer.writerow(rec.row())
                twriter.writerow([variant, f"{tol:.6g}", f"{rec.wall_seconds:.3f}"])
                fh.flush()
                th.flush()
                if config.level_tables:
                    emit_level_table(rec, out.with_name(f"{out.stem}_levels_{variant}_{tol:g}.csv"))
                if progress is not None:
                    progress(rec)
    return records


def emit_level_table(result, path) -> None:
    """Per-level CSV (fixed decimals) for an MlmcResult or RunRecord."""
    levels = getattr(result, "per_level", None)
    if levels is None:
        levels = result.levels
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LEVEL_HEADER)
            for s in levels:
                w.writerow([
                    s.level, f"{s.var_delta:.10e}", f"{s.var_fine:.10e}", f"{s.mean_inner_n:.4f}", f"{s.work:.0f}", s.m,
                ])
    except OSError as exc:
        raise OSError(f"cannot write level table {path}: {exc}") from exc


def problem_for_oracle(portfolio: Portfolio, market: MarketModel) -> CompiledProblem:
    return compile_problem(portfolio, market, MethodConfig(subsampling=False))
