import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fluxlayer.errors import InsufficientBalance, UnknownAccount, UnknownAsset, ZeroAmount
from fluxlayer.ledger import Asset, Chain, ChainClock, Ledger, Transfer, advance_clock
from fluxlayer.markets import AmmPool, execute_amm_swap

from .conftest import make_ledger


def snapshot(ledger):
    return sorted((o, c, tuple(sorted(b.items()))) for o, c, b in ledger.accounts())


def test_zero_transfer_rejected(ledger):
    ledger.mint("A", 1, "USDT", 100)
    t = Transfer("A", "B", 1, "USDT", 0)
    with pytest.raises(ZeroAmount):
        ledger.apply_transfer(t)
    assert t.status == "rejected"
    assert ledger.balance("A", 1, "USDT") == 100


def test_exact_balance_transfer(ledger):
    ledger.mint("A", 1, "USDT", 100)
    t = ledger.transfer("A", "B", 1, "USDT", 100)
    assert t.status == "applied"
    assert ledger.balance("A", 1, "USDT") == 0
    assert ledger.balance("B", 1, "USDT") == 100


def test_overdraw_leaves_ledger_unchanged(ledger):
    ledger.mint("A", 1, "USDT", 50)
    before = snapshot(ledger)
    with pytest.raises(InsufficientBalance):
        ledger.transfer("A", "B", 1, "USDT", 51)
    assert snapshot(ledger) == before


def test_unknown_source_and_asset(ledger):
    with pytest.raises(UnknownAccount):
        ledger.transfer("ghost", "B", 1, "USDT", 1)
    ledger.mint("A", 1, "USDT", 5)
    with pytest.raises(UnknownAsset):
        ledger.transfer("A", "B", 1, "DOGE", 1)
    with pytest.raises(UnknownAsset):
        ledger.total_supply(1, "DOGE")


def test_balances_are_per_chain(ledger):
    ledger.mint("A", 1, "USDT", 10)
    assert ledger.balance("A", 2, "USDT") == 0
    with pytest.raises(UnknownAccount):
        ledger.transfer("A", "B", 2, "USDT", 1)


def test_duplicate_registry_entries_rejected():
    c = Chain(1, "one", 12)
    with pytest.raises(ValueError):
        Ledger([c, c])
    led = Ledger([c], [(1, Asset("X", 0))])
    with pytest.raises(ValueError):
        led.add_asset(1, Asset("X", 2))


def test_clock_examples():
    chains = (Chain(1, "a", 12), Chain(2, "b", 1))
    clock = ChainClock(chains)
    assert advance_clock(clock, 0).heights == clock.heights
    assert advance_clock(clock, 24).heights[1] == 2
    twice = advance_clock(advance_clock(clock, 6), 6)
    assert twice.heights == advance_clock(clock, 12).heights == {1: 1, 2: 12}
    with pytest.raises(ValueError):
        advance_clock(clock, -1)


@given(st.lists(st.integers(0, 50), max_size=20))
def test_clock_is_additive(steps):
    chains = (Chain(1, "a", 12), Chain(2, "b", 7))
    clock = ChainClock(chains)
    stepped = clock
    for s in steps:
        nxt = advance_clock(stepped, s)
        assert all(nxt.heights[c] >= stepped.heights[c] for c in (1, 2))
        stepped = nxt
    assert stepped.heights == advance_clock(clock, sum(steps)).heights


def test_initial_supply_matches_mints(ledger):
    ledger.mint("A", 1, "BTC", 7)
    ledger.mint("B", 1, "BTC", 3)
    assert ledger.total_supply(1, "BTC") == ledger.minted(1, "BTC") == 10
    assert ledger.total_supply(2, "BTC") == 0


def test_amm_swap_preserves_both_supplies(ledger):
    pool = AmmPool("p", 1, "BTC", "USDT", 100 * 10**8, 6_000_000 * 10**6, 30)
    ledger.mint(pool.account, 1, "BTC", pool.reserve_x)
    ledger.mint(pool.account, 1, "USDT", pool.reserve_y)
    ledger.mint("trader", 1, "BTC", 10**8)
    before = {s: ledger.total_supply(1, s) for s in ("BTC", "USDT")}
    pool, q = execute_amm_swap(ledger, pool, "trader", "BTC", 10**8)

    # brute-force walk over every account rather than total_supply()
    for sym in ("BTC", "USDT"):
        walked = sum(b.get(sym, 0) for o, c, b in ledger.accounts() if c == 1)
        assert walked == before[sym]
    assert ledger.balance(pool.account, 1, "BTC") == pool.reserve_x
    assert ledger.balance("trader", 1, "USDT") == q.amount_out


@settings(max_examples=200)
@given(st.lists(st.tuples(st.sampled_from("ABCD"), st.sampled_from("ABCD"),
                          st.sampled_from((1, 2)), st.sampled_from(("BTC", "USDT")),
                          st.integers(-5, 400)), max_size=40))
def test_random_transfers_conserve(ops):
    led = make_ledger()
    for owner in "AB":
        for c in (1, 2):
            led.mint(owner, c, "BTC", 300)
            led.mint(owner, c, "USDT", 300)
    for frm, to, chain, sym, amt in ops:
        before = snapshot(led)
        try:
            led.transfer(frm, to, chain, sym, amt)
        except (InsufficientBalance, UnknownAccount, ZeroAmount):
            assert snapshot(led) == before
        led.check_invariants()
    for c in (1, 2):
        assert led.total_supply(c, "BTC") == 600
