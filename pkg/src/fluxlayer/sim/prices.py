"""Seeded price paths and the CEX ladders built around them."""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np

from ..markets import CexBook
from .scenario import CexSpec, PriceProcessSpec


class PriceProcess:
    """Geometric random walk with optional symmetric jumps.

    Each pair draws from its own stream spawned from the run seed, so the
    path never depends on what agents do.
    """

    def __init__(self, spec: PriceProcessSpec, seed: int, stream: int):
        self.spec = spec
        self.price = float(spec.initial_price)
        self._rng = np.random.default_rng(np.random.SeedSequence([seed, stream]))

    def step(self) -> float:
        s = self.spec
        shock = self._rng.standard_normal()
        jump_draw = self._rng.random()
        sign = 1.0 if self._rng.random() < 0.5 else -1.0
        r = s.drift - 0.5 * s.volatility**2 + s.volatility * shock
        if jump_draw < s.jump_probability:
            r += sign * math.log1p(s.jump_size)
        self.price *= math.exp(r)
        return self.price


def quote_units_per_whole(price: float, quote_decimals: int, rounding=round) -> int:
    return max(1, int(rounding(price * 10**quote_decimals)))


def build_ladder(spec: CexSpec, mid: float, base_decimals: int, quote_decimals: int) -> CexBook:
    """Ladder of ``levels`` equal-size levels each side of ``mid``.

    Prices are quote base units per base base unit, i.e. an integer count of
    quote units per whole base token divided by 10**base_decimals. Bids are
    rounded down and asks up so the book never crosses.
    """
    denom = 10**base_decimals
    size = int(spec.level_size.scaleb(base_decimals))
    bids, asks = [], []
    for i in range(spec.levels):
        off = (spec.half_spread_bps + i * spec.level_step_bps) / 10_000
        bid = quote_units_per_whole(mid * (1 - off), quote_decimals, math.floor)
        ask = quote_units_per_whole(mid * (1 + off), quote_decimals, math.ceil)
        if not bids or Fraction(bid, denom) < bids[-1][0]:
            bids.append((Fraction(bid, denom), size))
        if not asks or Fraction(ask, denom) > asks[-1][0]:
            asks.append((Fraction(ask, denom), size))
    if bids[0][0] >= asks[0][0]:
        asks[0] = (bids[0][0] + Fraction(1, denom), size)
    return CexBook(spec.id, spec.base, spec.quote, tuple(bids), tuple(asks), spec.taker_fee_bps)
