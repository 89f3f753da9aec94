from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fluxlayer.errors import ZeroAmount
from fluxlayer.intent import (
    ESCROW,
    MATCHED,
    AllOrNothing,
    DeadlineInPast,
    FillOffer,
    FragmentTooSmall,
    Fragmentable,
    InsufficientFunds,
    Intent,
    IntentBook,
    IntentClosed,
    Leg,
    PriceBelowLimit,
    VaultLoan,
)
from fluxlayer.vault import Vault

from .conftest import make_ledger
from .oracles import brute_force_allocation

BTC = 10**8
LIMIT = Fraction(600)  # micro-USDT per satoshi, i.e. 60,000 USDT/BTC


def sell_btc(amount=10 * BTC, policy=None, deadline=10, maker="maker", funding=None):
    kw = {} if funding is None else {"funding": funding}
    return Intent(maker, Leg(1, "BTC", amount), Leg(2, "USDT"), LIMIT,
                  policy or Fragmentable(BTC), deadline, **kw)


def funded_book(amount=10 * BTC, **kw):
    led = make_ledger()
    led.mint("maker", 1, "BTC", amount)
    book = IntentBook()
    iid = book.submit_intent(sell_btc(amount, **kw), led, 0)
    return led, book, iid


def test_submit_exact_balance_moves_everything_to_escrow():
    led, book, iid = funded_book()
    assert led.balance("maker", 1, "BTC") == 0
    assert led.balance(ESCROW, 1, "BTC") == 10 * BTC
    assert book.escrow_outstanding() == {(1, "BTC"): 10 * BTC}


def test_submit_rejections_leave_no_escrow():
    led = make_ledger()
    led.mint("maker", 1, "BTC", BTC)
    book = IntentBook()
    with pytest.raises(DeadlineInPast):
        book.submit_intent(sell_btc(BTC, deadline=5), led, 5)
    with pytest.raises(InsufficientFunds):
        book.submit_intent(sell_btc(2 * BTC), led, 0)
    with pytest.raises(ZeroAmount):
        book.submit_intent(sell_btc(0), led, 0)
    assert led.balance(ESCROW, 1, "BTC") == 0 and book.intents == {}


def test_vault_loan_funds_the_escrow():
    led = make_ledger()
    vault = Vault("USDT", [1])
    led.mint("lp", 1, "USDT", 100_000)
    vault.deposit(led, "lp", 1, 100_000)
    led.mint("maker", 1, "USDT", 1_000)
    pos = vault.borrow(led, "maker", 1, 1_000, 9_000)
    acct = vault.loan_account(pos.id)
    book = IntentBook()
    intent = Intent("maker", Leg(1, "USDT", 10_000), Leg(2, "BTC"), Fraction(1, 60_000),
                    AllOrNothing(), 10, VaultLoan(pos.id, acct))
    book.submit_intent(intent, led, 0, vault)
    assert led.balance(acct, 1, "USDT") == 0
    assert led.balance(ESCROW, 1, "USDT") == 10_000
    # refunds go back to the loan account, not the maker's wallet
    book.expire_and_cancel(led, 10)
    assert led.balance(acct, 1, "USDT") == 10_000 and led.balance("maker", 1, "USDT") == 0


def test_offer_validation():
    led, book, iid = funded_book()
    book.submit_offer(FillOffer("t", iid, BTC, LIMIT, 1))  # exactly at the limit
    with pytest.raises(PriceBelowLimit):
        book.submit_offer(FillOffer("t", iid, BTC, LIMIT - Fraction(1, 10**9), 1))
    with pytest.raises(FragmentTooSmall):
        book.submit_offer(FillOffer("t", iid, BTC // 2, LIMIT, 1))
    with pytest.raises(IntentClosed):
        book.submit_offer(FillOffer("t", iid, BTC, LIMIT, 10))  # at the deadline


def test_empty_book_matches_nothing():
    assert IntentBook().match_tick(0) == []


def test_two_fills_complete_fragmentable_order():
    led, book, iid = funded_book()
    book.submit_offer(FillOffer("late", iid, 4 * BTC, LIMIT, 2))
    book.submit_offer(FillOffer("early", iid, 6 * BTC, LIMIT * Fraction(1001, 1000), 1))
    [res] = book.match_tick(2, ledger=led)
    assert [(f.taker, f.amount) for f in res.fills] == [("early", 6 * BTC), ("late", 4 * BTC)]
    assert res.fully_filled and book.intents[iid].state == "filled"
    assert led.balance(MATCHED, 1, "BTC") == 10 * BTC and led.balance(ESCROW, 1, "BTC") == 0
    oracle = brute_force_allocation(10, [6, 4], min_fragment=1)
    assert [f.amount // BTC for f in res.fills] == oracle


def test_all_or_nothing_waits_for_full_cover():
    led, book, iid = funded_book(policy=AllOrNothing())
    book.submit_offer(FillOffer("a", iid, 5 * BTC, LIMIT, 1))
    book.submit_offer(FillOffer("b", iid, 4 * BTC, LIMIT, 1))
    assert book.match_tick(1, ledger=led) == []
    assert book.intents[iid].state == "open" and book.intents[iid].remaining == 10 * BTC
    book.submit_offer(FillOffer("c", iid, 3 * BTC, LIMIT, 2))
    [res] = book.match_tick(2, ledger=led)
    assert [(f.taker, f.amount) for f in res.fills] == [("a", 5 * BTC), ("b", 4 * BTC), ("c", BTC)]


def test_time_priority_breaks_price_ties():
    led, book, iid = funded_book(amount=2 * BTC)
    book.submit_offer(FillOffer("second", iid, 2 * BTC, LIMIT, 5))
    book.submit_offer(FillOffer("first", iid, 2 * BTC, LIMIT, 3))
    [res] = book.match_tick(5, ledger=led)
    assert [f.taker for f in res.fills] == ["first"]


def test_fragment_rule_never_strands_a_dust_remainder():
    led, book, iid = funded_book(amount=3 * BTC, policy=Fragmentable(2 * BTC))
    book.submit_offer(FillOffer("a", iid, 2 * BTC, LIMIT, 1))  # would leave 1 BTC < min
    book.submit_offer(FillOffer("b", iid, 3 * BTC, LIMIT, 1))
    [res] = book.match_tick(1, ledger=led)
    assert [(f.taker, f.amount) for f in res.fills] == [("b", 3 * BTC)]


def test_expiry_refunds_everything_unfilled():
    led, book, iid = funded_book()
    refunds = book.expire_and_cancel(led, 10)
    assert [(r.account, r.amount, r.reason) for r in refunds] == [("maker", 10 * BTC, "expired")]
    assert led.balance("maker", 1, "BTC") == 10 * BTC


def test_half_filled_expiry_refunds_the_rest():
    led, book, iid = funded_book()
    book.submit_offer(FillOffer("t", iid, 5 * BTC, LIMIT, 1))
    book.match_tick(1, ledger=led)
    [refund] = book.expire_and_cancel(led, 10)
    assert refund.amount == 5 * BTC
    assert led.balance("maker", 1, "BTC") == 5 * BTC
    assert led.balance(MATCHED, 1, "BTC") == 5 * BTC  # the filled half stays with settlement
    led.check_invariants()


def test_cancel_refund_matches_expiry_refund():
    led_a, book_a, ia = funded_book()
    led_b, book_b, ib = funded_book()
    ra = book_a.cancel(ia, led_a, 3)
    [rb] = book_b.expire_and_cancel(led_b, 10)
    assert (ra.account, ra.amount) == (rb.account, rb.amount)
    with pytest.raises(IntentClosed):
        book_a.cancel(ia, led_a, 4)


offers_st = st.lists(
    st.tuples(st.integers(1, 12), st.integers(0, 3), st.integers(0, 4)),  # take, price bump, tick
    max_size=10,
)


@settings(max_examples=300)
@given(st.integers(1, 15), st.one_of(st.none(), st.integers(1, 4)), offers_st)
def test_match_tick_agrees_with_brute_force(amount, min_frag, offers):
    policy = AllOrNothing() if min_frag is None else Fragmentable(min(min_frag, amount))
    led = make_ledger(symbols=(("BTC", 0), ("USDT", 0)))
    led.mint("maker", 1, "BTC", amount)
    book = IntentBook()
    iid = book.submit_intent(Intent("maker", Leg(1, "BTC", amount), Leg(2, "USDT"), 1, policy, 100), led, 0)
    accepted = []
    for i, (take, bump, tick) in enumerate(offers):
        try:
            accepted.append(book.submit_offer(FillOffer(f"t{i}", iid, take, 1 + Fraction(bump, 10), tick)))
        except FragmentTooSmall:
            pass
    ordered = sorted(accepted, key=FillOffer.priority)
    m = None if min_frag is None else policy.min_fragment
    expect = brute_force_allocation(amount, [o.take_amount for o in ordered], m, min_frag is None)
    results = book.match_tick(5, ledger=led)
    got = {f.taker: f.amount for r in results for f in r.fills}
    assert [got.get(o.taker, 0) for o in ordered] == expect
    intent = book.intents[iid]
    assert sum(got.values()) == intent.amount - intent.remaining
    assert led.balance(ESCROW, 1, "BTC") == sum(book.escrow_outstanding().values())
    if min_frag is None:
        assert intent.remaining in (0, amount)
