"""Venue models: constant-product AMM pools and laddered CEX books.

All ledger amounts are integers in base units. Prices are exact fractions of
base units (quote units per base unit). Rounding always favours the venue:
outputs are floored, inputs ceiled.

The AMM fee comes off the input (Uniswap v2 style) and stays in the
reserves; the CEX taker fee comes off the output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Optional

from .errors import AmountOverflow, FluxError, InsufficientBalance, UnknownAsset, ZeroAmount
from .ledger import Ledger

BPS = 10_000
MAX_AMOUNT = 2**128 - 1


class InsufficientTraderBalance(InsufficientBalance):
    pass


class InsufficientDepth(FluxError):
    pass


def _ceil(q: Fraction) -> int:
    return -((-q.numerator) // q.denominator)


def _floor(q: Fraction) -> int:
    return q.numerator // q.denominator


def _check_amount(amount: int) -> None:
    if amount < 0:
        raise ValueError("amount must be >= 0")
    if amount > MAX_AMOUNT:
        raise AmountOverflow(f"{amount} exceeds the integer domain")


@dataclass(frozen=True)
class Quote:
    venue: str
    side: str
    asset_in: str
    asset_out: str
    amount_in: int
    amount_out: int
    spot_before: Fraction
    spot_after: Fraction
    slippage_bps: int
    fee_paid: int
    partial: bool = False


def _slippage_bps(reference: Fraction, effective: Fraction) -> int:
    """Shortfall of ``effective`` versus ``reference`` in whole bps, never negative."""
    if reference <= 0:
        return 0
    return max(0, _floor((reference - effective) / reference * BPS))


# -- AMM ------------------------------------------------------------------


@dataclass(frozen=True)
class AmmPool:
    id: str
    chain: int
    asset_x: str
    asset_y: str
    reserve_x: int
    reserve_y: int
    fee_bps: int = 30

    def __post_init__(self):
        if self.reserve_x <= 0 or self.reserve_y <= 0:
            raise ValueError(f"pool {self.id}: reserves must be positive")
        if not 0 <= self.fee_bps <= 1000:
            raise ValueError(f"pool {self.id}: fee_bps must be in [0, 1000]")
        if self.asset_x == self.asset_y:
            raise ValueError(f"pool {self.id}: assets must differ")

    @property
    def account(self) -> str:
        return f"pool:{self.id}"

    @property
    def k(self) -> int:
        return self.reserve_x * self.reserve_y

    @property
    def spot_price(self) -> Fraction:
        """Marginal price of x in units of y, before fees."""
        return Fraction(self.reserve_y, self.reserve_x)

    def other(self, asset: str) -> str:
        if asset == self.asset_x:
            return self.asset_y
        if asset == self.asset_y:
            return self.asset_x
        raise UnknownAsset(f"{asset} is not in pool {self.id}")

    def _orient(self, asset_in: str) -> tuple[int, int]:
        if asset_in == self.asset_x:
            return self.reserve_x, self.reserve_y
        if asset_in == self.asset_y:
            return self.reserve_y, self.reserve_x
        raise UnknownAsset(f"{asset_in} is not in pool {self.id}")


def amm_out(reserve_in: int, reserve_out: int, amount_in: int, fee_bps: int) -> int:
    net = amount_in * (BPS - fee_bps)
    return reserve_out * net // (reserve_in * BPS + net)


def amm_quote_exact_in(pool: AmmPool, asset_in: str, amount_in: int) -> Quote:
    r_in, r_out = pool._orient(asset_in)
    _check_amount(amount_in)
    out = amm_out(r_in, r_out, amount_in, pool.fee_bps)
    spot = Fraction(r_out, r_in)
    if amount_in == 0:
        slip, after = 0, spot
    else:
        slip = _slippage_bps(spot, Fraction(out, amount_in))
        after = Fraction(r_out - out, r_in + amount_in)
    fee = _ceil(Fraction(amount_in * pool.fee_bps, BPS))
    return Quote(
        venue=pool.id,
        side="sell_x" if asset_in == pool.asset_x else "buy_x",
        asset_in=asset_in,
        asset_out=pool.other(asset_in),
        amount_in=amount_in,
        amount_out=out,
        spot_before=spot,
        spot_after=after,
        slippage_bps=slip,
        fee_paid=fee,
    )


def amm_swap(pool: AmmPool, asset_in: str, amount_in: int) -> tuple[AmmPool, Quote]:
    if amount_in <= 0:
        raise ZeroAmount("swap amount must be positive")
    q = amm_quote_exact_in(pool, asset_in, amount_in)
    if q.amount_out <= 0:
        raise ZeroAmount(f"swap of {amount_in} {asset_in} yields nothing")
    if asset_in == pool.asset_x:
        new = replace(pool, reserve_x=pool.reserve_x + amount_in, reserve_y=pool.reserve_y - q.amount_out)
    else:
        new = replace(pool, reserve_y=pool.reserve_y + amount_in, reserve_x=pool.reserve_x - q.amount_out)
    return new, q


def execute_amm_swap(
    ledger: Ledger, pool: AmmPool, trader: str, asset_in: str, amount_in: int, tick: int = 0
) -> tuple[AmmPool, Quote]:
    """Swap against the pool and settle both sides on the ledger.

    The pool's reserves mirror the balances of its ledger account, so the
    swap is just two transfers with the pool account as counterparty.
    """
    have = ledger.balance(trader, pool.chain, asset_in)
    if have < amount_in:
        raise InsufficientTraderBalance(f"{trader} holds {have} {asset_in}, needs {amount_in}")
    new, q = amm_swap(pool, asset_in, amount_in)
    ledger.transfer(trader, pool.account, pool.chain, asset_in, amount_in, tick)
    ledger.transfer(pool.account, trader, pool.chain, q.asset_out, q.amount_out, tick)
    return new, q


# -- CEX ------------------------------------------------------------------

Level = tuple[Fraction, int]


@dataclass(frozen=True)
class CexBook:
    id: str
    base: str
    quote: str
    bids: tuple[Level, ...]
    asks: tuple[Level, ...]
    taker_fee_bps: int = 10

    def __post_init__(self):
        for a, b in zip(self.bids, self.bids[1:]):
            if not a[0] > b[0]:
                raise ValueError(f"book {self.id}: bids must be strictly descending")
        for a, b in zip(self.asks, self.asks[1:]):
            if not a[0] < b[0]:
                raise ValueError(f"book {self.id}: asks must be strictly ascending")
        if any(size <= 0 or price <= 0 for price, size in self.bids + self.asks):
            raise ValueError(f"book {self.id}: levels need positive price and size")
        if self.bids and self.asks and not self.bids[0][0] < self.asks[0][0]:
            raise ValueError(f"book {self.id}: crossed book")

    def _consumed(self, **changes) -> "CexBook":
        # Dropping or shrinking levels keeps a valid book valid, so the copy
        # skips __post_init__; fills call this on every quote.
        new = object.__new__(CexBook)
        new.__dict__.update(self.__dict__, **changes)
        return new

    @property
    def best_bid(self) -> Optional[Fraction]:
        return self.bids[0][0] if self.bids else None

    @property
    def best_ask(self) -> Optional[Fraction]:
        return self.asks[0][0] if self.asks else None

    @property
    def mid(self) -> Fraction:
        return (self.bids[0][0] + self.asks[0][0]) / 2


def _walk(levels: tuple[Level, ...], amount: int) -> tuple[int, Fraction, tuple[Level, ...]]:
    filled, notional = 0, Fraction(0)
    rest = list(levels)
    while rest and filled < amount:
        price, size = rest[0]
        take = min(size, amount - filled)
        filled += take
        notional += price * take
        if take == size:
            rest.pop(0)
        else:
            rest[0] = (price, size - take)
    return filled, notional, tuple(rest)


def cex_fill(book: CexBook, side: str, amount: int, strict: bool = False) -> tuple[Quote, CexBook]:
    """Take ``amount`` base units from the book, best level first.

    ``side`` is the taker's side: "buy" walks the asks, "sell" walks the
    bids. A fill that exhausts the ladder comes back flagged ``partial``;
    with ``strict`` it raises InsufficientDepth instead.
    """
    if amount <= 0:
        raise ZeroAmount("fill amount must be positive")
    _check_amount(amount)
    if side == "buy":
        levels, ref = book.asks, book.best_ask
    elif side == "sell":
        levels, ref = book.bids, book.best_bid
    else:
        raise ValueError(f"side must be 'buy' or 'sell', got {side!r}")
    filled, notional, rest = _walk(levels, amount)
    partial = filled < amount
    if partial and strict:
        raise InsufficientDepth(f"book {book.id} holds {filled} of {amount} on the {side} side")
    keep = BPS - book.taker_fee_bps
    if side == "buy":
        new = book._consumed(asks=rest)
        amount_in = _ceil(notional)
        amount_out = filled * keep // BPS
        fee = filled - amount_out
        after = new.best_ask if rest else (levels[-1][0] if levels else Fraction(0))
        slip = 0
        if amount_out and ref:
            eff = Fraction(amount_in, amount_out)
            slip = max(0, _floor((eff - ref) / ref * BPS))
        asset_in, asset_out = book.quote, book.base
    else:
        new = book._consumed(bids=rest)
        amount_in = filled
        amount_out = _floor(notional * keep / BPS)
        fee = _floor(notional) - amount_out
        after = new.best_bid if rest else (levels[-1][0] if levels else Fraction(0))
        slip = _slippage_bps(ref, Fraction(amount_out, amount_in)) if amount_in and ref else 0
        asset_in, asset_out = book.base, book.quote
    q = Quote(
        venue=book.id,
        side=side,
        asset_in=asset_in,
        asset_out=asset_out,
        amount_in=amount_in,
        amount_out=amount_out,
        spot_before=ref if ref is not None else Fraction(0),
        spot_after=after,
        slippage_bps=slip,
        fee_paid=fee,
        partial=partial,
    )
    return q, new


# -- arbitrage sizing -------------------------------------------------------


@dataclass(frozen=True)
class ArbPlan:
    direction: str  # "buy_x" | "sell_x" | "none"
    amount_in: int
    expected_profit: Fraction  # in units of y


NO_ARB = ArbPlan("none", 0, Fraction(0))


def arb_profit(pool: AmmPool, direction: str, amount_in: int, external_price: Fraction) -> Fraction:
    """Profit in y of a pool trade closed out at ``external_price`` (y per x)."""
    if amount_in <= 0:
        return Fraction(0)
    g = pool.fee_bps
    if direction == "buy_x":
        out = amm_out(pool.reserve_y, pool.reserve_x, amount_in, g)
        return external_price * out - amount_in
    if direction == "sell_x":
        out = amm_out(pool.reserve_x, pool.reserve_y, amount_in, g)
        return out - external_price * amount_in
    raise ValueError(direction)


def optimal_arb_size(pool: AmmPool, external_price: Fraction) -> ArbPlan:
    """Size the pool trade that maximises profit against an outside price.

    Closed form for the continuous optimum, then the exact integer profit is
    checked at neighbouring sizes. Returns NO_ARB when nothing clears fees.
    """
    P = Fraction(external_price)
    if P <= 0:
        raise ValueError("external_price must be positive")
    pn, pd = P.numerator, P.denominator
    g = BPS - pool.fee_bps
    rx, ry, k = pool.reserve_x, pool.reserve_y, pool.k
    if g == 0:
        return NO_ARB
    # gamma * P * rx > ry: pool x is cheap after fees
    if pn * g * rx > ry * pd * BPS:
        direction = "buy_x"
        d = pd * BPS
        s = math.isqrt(pn * g * k * d)
        centre = (s - ry * d) * BPS // (d * g)
    elif g * ry * pd > pn * rx * BPS:
        direction = "sell_x"
        s = math.isqrt(g * k * pd * BPS * pn)
        centre = (s - rx * BPS * pn) // (pn * g)
    else:
        return NO_ARB
    # Integer profit is a sawtooth in the input: the output only steps when
    # floor() ticks over. Every tooth peaks at the least input buying a whole
    # output unit, so scan outputs near the continuous optimum as well.
    r_in, r_out = (ry, rx) if direction == "buy_x" else (rx, ry)
    candidates = set(range(max(1, centre - 2), centre + 3))
    o_centre = amm_out(r_in, r_out, max(centre, 1), pool.fee_bps)
    for o in range(max(1, o_centre - 2), min(r_out - 1, o_centre + 2) + 1):
        candidates.add(-(-(o * r_in * BPS) // (g * (r_out - o))))
    best = NO_ARB
    for a in sorted(candidates):
        if a > MAX_AMOUNT:
            break
        p = arb_profit(pool, direction, a, P)
        if p > best.expected_profit:
            best = ArbPlan(direction, a, p)
    return best
