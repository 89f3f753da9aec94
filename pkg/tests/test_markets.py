from fractions import Fraction

import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from fluxlayer.errors import AmountOverflow, UnknownAsset, ZeroAmount
from fluxlayer.markets import (
    MAX_AMOUNT,
    AmmPool,
    CexBook,
    InsufficientDepth,
    InsufficientTraderBalance,
    amm_quote_exact_in,
    amm_swap,
    arb_profit,
    cex_fill,
    execute_amm_swap,
    optimal_arb_size,
)

from .oracles import amm_out_exact, best_grid_trade

BTC, USDT = 10**8, 10**6


def btc_pool(fee=30, rx=100, ry=6_000_000):
    return AmmPool("p", 1, "BTC", "USDT", rx * BTC, ry * USDT, fee)


pools = st.builds(
    lambda rx, ry, fee: AmmPool("p", 1, "X", "Y", rx, ry, fee),
    st.integers(1, 10**15), st.integers(1, 10**15), st.sampled_from([0, 1, 5, 30, 100, 1000]),
)


# -- AMM quotes ---------------------------------------------------------------


def test_zero_input_quotes_nothing():
    q = amm_quote_exact_in(btc_pool(), "BTC", 0)
    assert (q.amount_out, q.slippage_bps) == (0, 0)


def test_one_btc_into_reference_pool():
    q = amm_quote_exact_in(btc_pool(30), "BTC", BTC)
    # frozen from the exact-rational oracle: 59,229.482063 USDT
    assert q.amount_out == 59_229_482_063 == amm_out_exact(100 * BTC, 6_000_000 * USDT, BTC, 30)
    assert q.fee_paid == 300_000  # 30 bps of 1 BTC, in satoshi
    assert q.side == "sell_x" and q.asset_out == "USDT"


def test_floor_rounding_on_tiny_pool():
    pool = AmmPool("s", 1, "A", "B", 1000, 1000, 0)
    assert amm_quote_exact_in(pool, "A", 1).amount_out == 0  # floor(1000/1001)


def test_quote_errors():
    with pytest.raises(UnknownAsset):
        amm_quote_exact_in(btc_pool(), "ETH", 1)
    with pytest.raises(AmountOverflow):
        amm_quote_exact_in(btc_pool(), "BTC", MAX_AMOUNT + 1)
    with pytest.raises(ZeroAmount):
        amm_swap(btc_pool(), "BTC", 0)


@settings(max_examples=300)
@given(pools, st.integers(0, 10**15), st.booleans())
def test_quote_matches_exact_reference(pool, a, x_in):
    asset = "X" if x_in else "Y"
    r_in, r_out = (pool.reserve_x, pool.reserve_y) if x_in else (pool.reserve_y, pool.reserve_x)
    assert amm_quote_exact_in(pool, asset, a).amount_out == amm_out_exact(r_in, r_out, a, pool.fee_bps)


@settings(max_examples=300)
@given(pools, st.integers(1, 10**15))
def test_swap_equals_quote_and_k_grows(pool, a):
    q = amm_quote_exact_in(pool, "X", a)
    assume(q.amount_out > 0)
    new, realized = amm_swap(pool, "X", a)
    assert realized == q
    assert new.k >= pool.k
    if pool.fee_bps > 0:
        assert new.k > pool.k
    assert amm_quote_exact_in(pool, "X", a) == q  # quoting is pure


def test_round_trip_loses_with_fee():
    pool = btc_pool(30)
    pool, q1 = amm_swap(pool, "BTC", BTC)
    _, q2 = amm_swap(pool, "USDT", q1.amount_out)
    assert q2.amount_out < BTC


def test_small_trades_converge_to_spot():
    pool = AmmPool("p", 1, "BTC", "USDT", 10**12, 6 * 10**16, 0)
    spot = pool.spot_price
    errs = []
    for a in (10**10, 10**8, 10**6, 10**4):
        q = amm_quote_exact_in(pool, "BTC", a)
        errs.append(abs(Fraction(q.amount_out, a) - spot) / spot)
    assert errs == sorted(errs, reverse=True)
    assert errs[-1] < Fraction(1, 10**6)


def test_ledger_swap_needs_balance(ledger):
    pool = btc_pool()
    ledger.mint(pool.account, 1, "BTC", pool.reserve_x)
    ledger.mint(pool.account, 1, "USDT", pool.reserve_y)
    ledger.mint("t", 1, "BTC", 5)
    with pytest.raises(InsufficientTraderBalance):
        execute_amm_swap(ledger, pool, "t", "BTC", 6)


# -- CEX ladder ---------------------------------------------------------------


def ladder(fee=0):
    return CexBook("cex", "BTC", "USDT",
                   bids=((Fraction(59_900), 2), (Fraction(59_800), 3)),
                   asks=((Fraction(60_000), 2), (Fraction(60_100), 3)),
                   taker_fee_bps=fee)


def test_fill_exactly_top_level():
    q, book = cex_fill(ladder(), "buy", 2)
    assert q.amount_in == 120_000 and q.amount_out == 2 and not q.partial
    assert book.asks == ((Fraction(60_100), 3),)


def test_fill_spanning_two_levels():
    q, book = cex_fill(ladder(), "buy", 4)
    assert q.amount_in == 2 * 60_000 + 2 * 60_100
    assert book.asks == ((Fraction(60_100), 1),)


def test_taker_fee_comes_off_output():
    q, _ = cex_fill(ladder(fee=10), "sell", 2)
    assert q.amount_out == 119_680  # 119,800 less 10 bps, floored
    assert q.fee_paid == 120


def test_fill_beyond_depth_is_flagged():
    q, book = cex_fill(ladder(), "buy", 9)
    assert q.partial and q.amount_out == 5 and book.asks == ()
    with pytest.raises(InsufficientDepth):
        cex_fill(ladder(), "buy", 9, strict=True)


def test_crossed_or_unsorted_books_rejected():
    with pytest.raises(ValueError):
        CexBook("c", "B", "Q", ((Fraction(10), 1),), ((Fraction(9), 1),))
    with pytest.raises(ValueError):
        CexBook("c", "B", "Q", ((Fraction(8), 1), (Fraction(9), 1)), ())


# -- arbitrage sizing ----------------------------------------------------------


def test_no_arb_at_equilibrium():
    plan = optimal_arb_size(btc_pool(0), Fraction(600))
    assert plan.direction == "none" and plan.amount_in == 0 and plan.expected_profit == 0


def test_reference_arbitrage_example():
    # external 61,000 USDT/BTC = 610 micro-USDT per satoshi
    plan = optimal_arb_size(btc_pool(0), Fraction(610))
    assert plan.direction == "buy_x"
    # best integer profit, frozen from a brute-force scan of 3M input sizes
    # around the continuous optimum (several sizes tie at this value)
    assert plan.expected_profit == 413_230_196  # ~413.23 USDT
    assert abs(plan.amount_in - 49_793_384_899) < 2 * USDT  # ~49,793.38 USDT in
    pool, q = amm_swap(btc_pool(0), "USDT", plan.amount_in)
    assert abs(q.amount_out - 82_305_926) <= 10  # ~0.823 BTC
    assert 610 * q.amount_out - plan.amount_in == plan.expected_profit  # resale value less cost
    direction, x, profit = best_grid_trade(100.0, 6e6, 0, 61_000.0, 1e-4)
    assert direction == "buy_x"
    assert abs(q.amount_out / BTC - x) <= 1e-4
    assert abs(float(plan.expected_profit) / USDT - profit) < 0.01


def test_fees_shrink_profit_and_can_erase_it():
    free = optimal_arb_size(btc_pool(0), Fraction(610))
    fee = optimal_arb_size(btc_pool(30), Fraction(610))
    assert 0 < fee.expected_profit < free.expected_profit
    assert optimal_arb_size(btc_pool(100), Fraction(6005, 10)).direction == "none"


@settings(max_examples=200)
@given(st.integers(10**6, 10**12), st.integers(10**6, 10**12), st.sampled_from([0, 5, 30]),
       st.fractions(Fraction(1, 10), Fraction(10)))
def test_optimum_beats_every_other_size(rx, ry, fee, ratio):
    pool = AmmPool("p", 1, "X", "Y", rx, ry, fee)
    price = pool.spot_price * ratio
    plan = optimal_arb_size(pool, price)
    if plan.direction == "none":
        for d in ("buy_x", "sell_x"):
            for a in (1, 10, 1000, rx // 100 + 1, ry // 100 + 1):
                assert arb_profit(pool, d, a, price) <= 0
        return
    # the closed form lands on the right tooth of the integer sawtooth; the
    # only slack left is one base unit of the input asset, valued in y
    slack = 1 if plan.direction == "buy_x" else price
    a0 = plan.amount_in
    sizes = {1, a0 // 2, a0 * 2} | {a0 + d for d in range(-50, 51)}
    for a in sizes:
        if a > 0:
            assert arb_profit(pool, plan.direction, a, price) <= plan.expected_profit + slack


@settings(max_examples=200)
@given(st.integers(10**9, 10**12), st.integers(10**9, 10**12), st.sampled_from([0, 30]),
       st.sampled_from([Fraction(9, 10), Fraction(11, 10), Fraction(3, 2), Fraction(1, 2)]))
def test_executing_arb_moves_spot_toward_price(rx, ry, fee, ratio):
    pool = AmmPool("p", 1, "X", "Y", rx, ry, fee)
    price = pool.spot_price * ratio
    plan = optimal_arb_size(pool, price)
    assume(plan.direction != "none")
    asset = "Y" if plan.direction == "buy_x" else "X"
    new, _ = amm_swap(pool, asset, plan.amount_in)
    assert abs(new.spot_price - price) < abs(pool.spot_price - price)
