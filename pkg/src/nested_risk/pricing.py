"""Black-Scholes values and deltas, discounted payoffs and pathwise deltas.

All values are discounted to time 0, so the value at the risk horizon and
the value today can be subtracted directly.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple

import numpy as np
from scipy.special import ndtr


class OptionKind(str, Enum):
    CALL = "call"
    PUT = "put"

    @property
    def sign(self) -> int:
        return 1 if self is OptionKind.CALL else -1


class ExpiredContractError(ValueError):
    pass


@dataclass(frozen=True)
class VanillaOption:
    kind: OptionKind
    strike: float
    maturity: float
    asset_index: int

    def __post_init__(self):
        object.__setattr__(self, "kind", OptionKind(self.kind))
        if not self.strike > 0:
            raise ValueError(f"strike must be positive, got {self.strike}")
        if not self.maturity > 0:
            raise ValueError(f"maturity must be positive, got {self.maturity}")
        if self.asset_index < 0:
            raise ValueError("asset_index must be non-negative")


class PriceAndDelta(NamedTuple):
    value: float
    delta: float


def black_scholes(sign, spot, strike, maturity, time_now, vol, rate):
    """Vectorised discounted value and delta. ``sign`` is +1 for calls, -1 for puts."""
    spot, strike, maturity, time_now, vol, sign = np.broadcast_arrays(
        *(np.asarray(a, dtype=float) for a in (spot, strike, maturity, time_now, vol, sign))
    )
    remaining = maturity - time_now
    if np.any(remaining <= 0):
        raise ExpiredContractError("valuation time is at or beyond maturity")
    df = np.exp(-rate * remaining)
    sd = vol * np.sqrt(remaining)
    with np.errstate(divide="ignore", invalid="ignore"):
        d1 = (np.log(spot / strike) + (rate + 0.5 * vol * vol) * remaining) / sd
    d2 = d1 - sd
    value = sign * (spot * ndtr(sign * d1) - strike * df * ndtr(sign * d2))
    delta = np.where(sign > 0, ndtr(d1), ndtr(d1) - 1.0)

    # zero volatility: deterministic forward
    flat = sd == 0
    if np.any(flat):
        moneyness = sign * (spot - strike * df)
        value = np.where(flat, np.maximum(moneyness, 0.0), value)
        delta = np.where(flat, np.where(moneyness > 0, sign, 0.0), delta)

    disc_now = np.exp(-rate * time_now)
    return disc_now * value, disc_now * delta


def bs_price_delta(option: VanillaOption, spot: float, time_now: float, vol: float, rate: float) -> PriceAndDelta:
    """Discounted-to-0 Black-Scholes value and its derivative in ``spot``."""
    if time_now >= option.maturity:
        raise ExpiredContractError(f"time {time_now} is not before maturity {option.maturity}")
    value, delta = black_scholes(option.kind.sign, spot, option.strike, option.maturity, time_now, vol, rate)
    return PriceAndDelta(float(value), float(delta))


def payoff(option: VanillaOption, terminal_value, rate: float):
    """exp(-r T) * max(+-(S(T) - K), 0)."""
    s = option.kind.sign
    return np.exp(-rate * option.maturity) * np.maximum(s * (np.asarray(terminal_value) - option.strike), 0.0)


def pathwise_delta(option: VanillaOption, terminal_value, path_sensitivity, rate: float):
    """Chain rule h'(S(T)) * dS(T)/dS(0); a tie at the strike counts as out of the money."""
    s = option.kind.sign
    itm = s * (np.asarray(terminal_value) - option.strike) > 0
    return np.exp(-rate * option.maturity) * s * itm * np.asarray(path_sensitivity)
