from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fluxlayer.intent import AllOrNothing, Intent, IntentBook, Leg
from fluxlayer.ledger import Chain
from fluxlayer.settlement import (
    AlreadyFinalized,
    AlreadyLocked,
    AlreadyRefunded,
    AlreadyVoted,
    InsufficientTakerFunds,
    MpcDenied,
    MpcPolicy,
    NotTimedOut,
    QuorumRule,
    RecordNotLocked,
    SettlementEngine,
    SettlementLeg,
    SettlementRecord,
    UnknownSigner,
    UnknownValidator,
    Validator,
    ValidatorSlashed,
    attest,
    baseline_latency,
    finalize,
    lock,
    mpc_authorize,
    quorum_reached,
    refund_on_timeout,
)

from .conftest import make_ledger
from .oracles import quorum_by_hand

BTC, USDT = 10**8, 10**6


def funded(led):
    led.mint("maker", 1, "BTC", BTC)
    led.mint("taker", 2, "USDT", 60_000 * USDT)


def record(custody="escrow", created=0, usdt=60_000 * USDT):
    return SettlementRecord(
        1, None, "taker",
        SettlementLeg(1, "BTC", BTC, "maker", "taker"),
        SettlementLeg(2, "USDT", usdt, "taker", "maker"),
        custody=custody, created_tick=created,
    )


def locked(led, **kw):
    funded(led)
    return lock(record(**kw), led, 0, maker_source="maker")


def vals(**stakes):
    return {k: Validator(k, s) for k, s in stakes.items()}


RULE = QuorumRule(2, 3, 20)


def test_lock_moves_both_legs_into_custody(ledger):
    rec = locked(ledger)
    assert rec.state == "locked"
    assert ledger.balance("custody:escrow", 1, "BTC") == BTC
    assert ledger.balance("custody:escrow", 2, "USDT") == 60_000 * USDT
    with pytest.raises(AlreadyLocked):
        lock(rec, ledger, 0, maker_source="maker")


def test_taker_short_by_one_unit_locks_nothing(ledger):
    funded(ledger)
    with pytest.raises(InsufficientTakerFunds):
        lock(record(usdt=60_000 * USDT + 1), ledger, 0, maker_source="maker")
    assert ledger.balance("maker", 1, "BTC") == BTC
    assert ledger.balance("custody:escrow", 1, "BTC") == 0


def test_two_thirds_quorum_finalizes(ledger):
    v = vals(a=40, b=35, c=25)
    rec = locked(ledger)
    attest(rec, v, "a", True)
    attest(rec, v, "b", True)
    assert finalize(rec, v, RULE, ledger, 3)
    assert rec.state == "finalized" and rec.latency == 3
    assert ledger.balance("taker", 1, "BTC") == BTC
    assert ledger.balance("maker", 2, "USDT") == 60_000 * USDT
    with pytest.raises(AlreadyFinalized):
        refund_on_timeout(rec, RULE, ledger, 30)


def test_sixty_five_percent_stays_pending(ledger):
    v = vals(a=40, b=35, c=25)
    rec = locked(ledger)
    attest(rec, v, "a", True)
    attest(rec, v, "c", True)
    assert not finalize(rec, v, RULE, ledger, 3)
    assert rec.state == "locked"


def test_unanimity_with_one_abstainer_times_out_and_refunds(ledger):
    v = vals(a=1, b=1, c=1)
    rule = QuorumRule(1, 1, 20)
    rec = locked(ledger)
    attest(rec, v, "a", True)
    attest(rec, v, "b", True)
    assert not finalize(rec, v, rule, ledger, 5)
    with pytest.raises(NotTimedOut):
        refund_on_timeout(rec, rule, ledger, 19)
    refund_on_timeout(rec, rule, ledger, 20)
    assert rec.state == "refunded"
    assert ledger.balance("maker", 1, "BTC") == BTC
    assert ledger.balance("taker", 2, "USDT") == 60_000 * USDT
    with pytest.raises(AlreadyRefunded):
        refund_on_timeout(rec, rule, ledger, 21)
    with pytest.raises(RecordNotLocked):
        finalize(rec, v, rule, ledger, 21)


def test_half_yes_refunds_at_timeout(ledger):
    v = vals(a=50, b=50)
    rec = locked(ledger)
    attest(rec, v, "a", True)
    attest(rec, v, "b", False)
    assert not finalize(rec, v, RULE, ledger, 10)
    refund_on_timeout(rec, RULE, ledger, 20)
    assert rec.state == "refunded"


def test_vote_errors(ledger):
    v = vals(a=1)
    rec = record()
    with pytest.raises(RecordNotLocked):
        attest(rec, v, "a", True)
    rec = locked(ledger)
    with pytest.raises(UnknownValidator):
        attest(rec, v, "z", True)
    attest(rec, v, "a", True)
    with pytest.raises(AlreadyVoted):
        attest(rec, v, "a", True)


def test_equivocation_slashes_and_recomputes_quorum(ledger):
    v = vals(a=40, b=35, c=25)
    rec = locked(ledger)
    attest(rec, v, "a", True)
    attest(rec, v, "a", False)  # conflicting vote
    assert v["a"].status == "slashed" and v["a"].restake == 0
    assert "a" not in rec.attestations and "a" in rec.equivocators
    with pytest.raises(ValidatorSlashed):
        attest(rec, v, "a", True)
    # active stake is now 60; b alone holds 35/60 < 2/3, b and c hold all of it
    attest(rec, v, "b", True)
    assert not quorum_reached(rec, v, RULE)
    attest(rec, v, "c", True)
    assert finalize(rec, v, RULE, ledger, 4)


def test_partial_slash_fraction():
    v = vals(a=100, b=1)
    led = make_ledger()
    rec = locked(led)
    attest(rec, v, "a", True)
    attest(rec, v, "a", False, slash_fraction=Fraction(1, 3))
    assert v["a"].restake == 67


@settings(max_examples=300)
@given(st.lists(st.integers(1, 100), min_size=1, max_size=6), st.data())
def test_quorum_matches_hand_count(stakes, data):
    v = {f"v{i}": Validator(f"v{i}", s) for i, s in enumerate(stakes)}
    yes = data.draw(st.sets(st.sampled_from(sorted(v))))
    rec = record()
    rec.state = "locked"
    for vid in yes:
        rec.attestations[vid] = True
    assert quorum_reached(rec, v, RULE) == quorum_by_hand({k: x.restake for k, x in v.items()}, yes)


# -- MPC custody -------------------------------------------------------------------


def test_mpc_threshold_examples():
    p = MpcPolicy(("s1", "s2", "s3"), 2)
    assert mpc_authorize(p, ["s1", "s3"])
    assert not mpc_authorize(p, ["s2"])
    with pytest.raises(UnknownSigner):
        mpc_authorize(p, ["s1", "mallory"])
    with pytest.raises(ValueError):
        MpcPolicy(("s1",), 2)


def test_mpc_record_waits_for_signers(ledger):
    v = vals(a=1)
    rec = locked(ledger, custody="mpc")
    attest(rec, v, "a", True)
    short = {1: (MpcPolicy(("s1", "s2", "s3"), 2), ("s1",))}
    assert not finalize(rec, v, RULE, ledger, 2, short)
    assert rec.state == "attested"
    with pytest.raises(MpcDenied):
        refund_on_timeout(rec, RULE, ledger, 20, short)
    enough = {1: (MpcPolicy(("s1", "s2", "s3"), 2), ("s1", "s2"))}
    assert finalize(rec, v, RULE, ledger, 3, enough)
    assert ledger.balance("taker", 1, "BTC") == BTC


# -- engine and baseline ---------------------------------------------------------------


def chains(finality=64, interval=12, contracts=True):
    return {1: Chain(1, "a", interval, finality, not contracts), 2: Chain(2, "b", interval, finality)}


def engine_fill(mode, chain_map, bridge_delay=10, validators=(), led=None):
    led = led or make_ledger()
    led.mint("maker", 1, "BTC", BTC)
    led.mint("taker", 2, "USDT", 60_000 * USDT)
    book = IntentBook()
    iid = book.submit_intent(Intent("maker", Leg(1, "BTC", BTC), Leg(2, "USDT"), 600, AllOrNothing(), 10_000), led, 0)
    eng = SettlementEngine(led, chain_map, validators, QuorumRule(2, 3, 50), mode=mode, bridge_delay=bridge_delay)
    rec = eng.open_fill(book.intents[iid], "taker", BTC, 60_000 * USDT, 0)
    return eng, rec, led


def test_baseline_latency_is_finality_plus_delay():
    eng, rec, _ = engine_fill("baseline", chains())
    assert baseline_latency(rec, eng.chains, 10) == 778
    for t in range(778):
        assert eng.step(t) == ([], [])
    assert eng.step(778) == ([rec], [])
    assert rec.latency == 778


def test_baseline_with_no_delay_settles_immediately():
    eng, rec, _ = engine_fill("baseline", chains(finality=0), bridge_delay=0)
    assert eng.step(0) == ([rec], [])


def test_engine_finalizes_after_validator_latency():
    vs = [Validator(f"v{i}", 100, latency_ticks=2) for i in range(4)]
    eng, rec, led = engine_fill("fluxlayer", chains(), validators=vs)
    assert eng.step(1) == ([], [])
    assert eng.step(2) == ([rec], [])
    assert led.balance("maker", 2, "USDT") == 60_000 * USDT


def test_engine_refunds_when_equivocators_block_quorum():
    vs = [Validator("h", 100), Validator("e1", 100, behavior="equivocating"),
          Validator("e2", 100, behavior="offline")]
    eng, rec, led = engine_fill("fluxlayer", chains(), validators=vs)
    for t in range(1, 50):
        assert eng.step(t) == ([], [])
    assert eng.validators["e1"].status == "slashed"
    assert eng.step(50) == ([], [rec])
    assert led.balance("taker", 2, "USDT") == 60_000 * USDT


def test_chain_without_contracts_uses_mpc_custody():
    eng, rec, led = engine_fill("fluxlayer", chains(contracts=False), validators=[Validator("v", 1)])
    assert rec.custody == "mpc" and led.balance("custody:mpc", 1, "BTC") == BTC
    # no signer set configured, so the record can never release
    assert eng.step(5) == ([], [])
