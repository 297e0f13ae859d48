import numpy as np
import pytest

from nested_risk.market_model import AssetParams, MarketModel, NoiseHandle, random_market
from nested_risk.portfolio import ComputationModel, GenConfig, Portfolio, generate_with_retry
from nested_risk.pricing import OptionKind, VanillaOption


def three_se(samples):
    samples = np.asarray(samples, dtype=float)
    return 3.0 * samples.std(ddof=1) / np.sqrt(samples.size)


@pytest.fixture(scope="session")
def market():
    return random_market(16, NoiseHandle(7))


@pytest.fixture(scope="session")
def flat_market():
    # a single zero-volatility asset
    return MarketModel((AssetParams(100.0, 0.1, 0.0),), correlation=0.2, risk_free_rate=0.05, risk_horizon=0.02)


@pytest.fixture(scope="session")
def one_asset_market():
    return MarketModel((AssetParams(100.0, 0.1, 0.25),), correlation=0.2, risk_free_rate=0.05, risk_horizon=0.02)


def small_portfolio(market, models, seed=0, threshold=0.0):
    """Hand-built portfolio on the first two assets; not delta-neutral."""
    rng = np.random.default_rng(seed)
    opts = []
    for i, _ in enumerate(models):
        kind = OptionKind.CALL if i % 2 == 0 else OptionKind.PUT
        opts.append(VanillaOption(kind, float(rng.uniform(90, 110)), float(rng.uniform(0.3, 3.0)), i % 2))
    weights = rng.uniform(0.5, 2.0, len(models))
    return Portfolio.from_options(opts, weights, [ComputationModel(m) for m in models], market, threshold=threshold)


@pytest.fixture(scope="session")
def five_option_portfolio(market):
    return small_portfolio(market, ["exact_eval", "exact_sim", "exact_sim", "exact_eval", "exact_sim"], seed=1)


@pytest.fixture(scope="session")
def generated20(market):
    return generate_with_retry(GenConfig(count=20, seed=4), market)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
