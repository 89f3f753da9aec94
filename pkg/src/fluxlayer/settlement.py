"""Stake-weighted attestation settlement with escrow or MPC custody.

A SettlementRecord holds both legs of one matched fill in custody. Restaked
validators attest that the legs are locked and consistent; once the yes
stake reaches the quorum threshold of active stake, both legs are released
together. If the quorum never arrives the record refunds after a timeout.
Exactly one of release or refund ever happens.

Chains flagged ``no_smart_contracts`` use MPC custody: release and refund
additionally need ``t`` of the chain's ``n`` signers.

``baseline_bridge_settle`` is the comparator: no quorum, just the source
chain's native finality plus a fixed bridge delay.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Optional

from .errors import FluxError, InsufficientBalance
from .intent import ESCROW, Intent
from .ledger import Chain, Ledger

log = logging.getLogger(__name__)

CUSTODY = {"escrow": "custody:escrow", "mpc": "custody:mpc"}
TERMINAL = ("finalized", "refunded")


class InsufficientTakerFunds(InsufficientBalance):
    pass


class AlreadyLocked(FluxError):
    pass


class RecordNotLocked(FluxError):
    pass


class AlreadyVoted(FluxError):
    pass


class ValidatorSlashed(FluxError):
    pass


class UnknownValidator(FluxError):
    pass


class NotTimedOut(FluxError):
    pass


class AlreadyFinalized(FluxError):
    pass


class AlreadyRefunded(FluxError):
    pass


class UnknownSigner(FluxError):
    pass


class MpcDenied(FluxError):
    pass


@dataclass
class Validator:
    id: str
    restake: int
    status: str = "active"
    behavior: str = "honest"  # honest | offline | equivocating
    latency_ticks: int = 1

    @property
    def active(self) -> bool:
        return self.status == "active"


@dataclass(frozen=True)
class QuorumRule:
    threshold_num: int = 2
    threshold_den: int = 3
    timeout_ticks: int = 50

    def __post_init__(self):
        t = Fraction(self.threshold_num, self.threshold_den)
        if not Fraction(1, 2) < t <= 1:
            raise ValueError("quorum threshold must be in (1/2, 1]")
        if self.timeout_ticks <= 0:
            raise ValueError("timeout_ticks must be positive")

    @property
    def threshold(self) -> Fraction:
        return Fraction(self.threshold_num, self.threshold_den)


@dataclass(frozen=True)
class MpcPolicy:
    signers: tuple[str, ...]
    t: int

    def __post_init__(self):
        if not 1 <= self.t <= len(set(self.signers)):
            raise ValueError("MPC threshold must satisfy 1 <= t <= n")


def mpc_authorize(policy: MpcPolicy, approvals: Iterable[str]) -> bool:
    approved = set(approvals)
    unknown = approved - set(policy.signers)
    if unknown:
        raise UnknownSigner(", ".join(sorted(unknown)))
    return len(approved) >= policy.t


@dataclass(frozen=True)
class SettlementLeg:
    chain: int
    asset: str
    amount: int
    payer: str
    payee: str


@dataclass
class SettlementRecord:
    id: int
    intent_id: Optional[int]
    taker: str
    sell_leg: SettlementLeg  # maker -> taker
    buy_leg: SettlementLeg  # taker -> maker
    custody: str = "escrow"
    created_tick: int = 0
    state: str = "new"
    attestations: dict[str, bool] = field(default_factory=dict)
    equivocators: set[str] = field(default_factory=set)
    finalized_tick: Optional[int] = None
    refunded_tick: Optional[int] = None

    @property
    def custody_account(self) -> str:
        return CUSTODY[self.custody]

    @property
    def terminal(self) -> bool:
        return self.state in TERMINAL

    @property
    def latency(self) -> Optional[int]:
        if self.finalized_tick is None:
            return None
        return self.finalized_tick - self.created_tick

    @property
    def chains(self) -> tuple[int, int]:
        return self.sell_leg.chain, self.buy_leg.chain


def lock(record: SettlementRecord, ledger: Ledger, now: int, maker_source: str = ESCROW) -> SettlementRecord:
    """Move both legs into custody. Taker funds are checked before anything moves."""
    if record.state != "new":
        raise AlreadyLocked(f"record {record.id} is {record.state}")
    b, s = record.buy_leg, record.sell_leg
    have = ledger.balance(b.payer, b.chain, b.asset)
    if have < b.amount:
        raise InsufficientTakerFunds(f"{b.payer} holds {have} {b.asset}, needs {b.amount}")
    if ledger.balance(maker_source, s.chain, s.asset) < s.amount:
        raise InsufficientBalance(f"{maker_source} cannot cover sell leg of record {record.id}")
    ledger.transfer(maker_source, record.custody_account, s.chain, s.asset, s.amount, now)
    ledger.transfer(b.payer, record.custody_account, b.chain, b.asset, b.amount, now)
    record.state = "locked"
    return record


def total_active_stake(validators: Mapping[str, Validator]) -> int:
    return sum(v.restake for v in validators.values() if v.active)


def yes_stake(record: SettlementRecord, validators: Mapping[str, Validator]) -> int:
    return sum(
        validators[vid].restake
        for vid, vote in record.attestations.items()
        if vote and validators[vid].active
    )


def quorum_reached(record: SettlementRecord, validators: Mapping[str, Validator], rule: QuorumRule) -> bool:
    total = total_active_stake(validators)
    if total <= 0:
        return False
    return yes_stake(record, validators) * rule.threshold_den >= rule.threshold_num * total


def slash_equivocation(
    validators: dict[str, Validator], validator_id: str, fraction: Fraction = Fraction(1)
) -> dict[str, Validator]:
    v = validators[validator_id]
    fraction = Fraction(fraction)
    cut = v.restake * fraction.numerator // fraction.denominator
    v.restake -= cut
    v.status = "slashed"
    log.info("slashed %s by %s (stake now %d)", validator_id, fraction, v.restake)
    return validators


def attest(
    record: SettlementRecord,
    validators: dict[str, Validator],
    validator_id: str,
    vote: bool,
    slash_fraction: Fraction = Fraction(1),
) -> SettlementRecord:
    """Record one vote. A conflicting second vote is equivocation and slashes."""
    v = validators.get(validator_id)
    if v is None:
        raise UnknownValidator(validator_id)
    if not v.active:
        raise ValidatorSlashed(validator_id)
    if record.state not in ("locked", "attested"):
        raise RecordNotLocked(f"record {record.id} is {record.state}")
    prev = record.attestations.get(validator_id)
    if prev is None:
        record.attestations[validator_id] = bool(vote)
        return record
    if prev == bool(vote):
        raise AlreadyVoted(f"{validator_id} already voted {prev} on record {record.id}")
    record.equivocators.add(validator_id)
    del record.attestations[validator_id]
    slash_equivocation(validators, validator_id, slash_fraction)
    return record


def _release(record: SettlementRecord, ledger: Ledger, now: int, refund: bool) -> None:
    src = record.custody_account
    for leg in (record.sell_leg, record.buy_leg):
        to = leg.payer if refund else leg.payee
        if leg.amount:
            ledger.transfer(src, to, leg.chain, leg.asset, leg.amount, now)


def _mpc_ok(record, mpc: Optional[Mapping[int, tuple[MpcPolicy, Iterable[str]]]]) -> bool:
    if record.custody != "mpc":
        return True
    if not mpc:
        return False
    for chain in set(record.chains):
        if chain in mpc:
            policy, approvals = mpc[chain]
            if not mpc_authorize(policy, approvals):
                return False
    return True


def finalize(
    record: SettlementRecord,
    validators: Mapping[str, Validator],
    rule: QuorumRule,
    ledger: Ledger,
    now: int,
    mpc: Optional[Mapping[int, tuple[MpcPolicy, Iterable[str]]]] = None,
) -> bool:
    """Release both legs if the quorum is met. Returns True once finalized."""
    if record.state == "finalized":
        return True
    if record.state not in ("locked", "attested"):
        raise RecordNotLocked(f"record {record.id} is {record.state}")
    if not quorum_reached(record, validators, rule):
        return False
    record.state = "attested"
    if not _mpc_ok(record, mpc):
        return False
    _release(record, ledger, now, refund=False)
    record.state = "finalized"
    record.finalized_tick = now
    return True


def refund_on_timeout(
    record: SettlementRecord,
    rule: QuorumRule,
    ledger: Ledger,
    now: int,
    mpc: Optional[Mapping[int, tuple[MpcPolicy, Iterable[str]]]] = None,
) -> SettlementRecord:
    if record.state == "finalized":
        raise AlreadyFinalized(f"record {record.id}")
    if record.state == "refunded":
        raise AlreadyRefunded(f"record {record.id}")
    if record.state not in ("locked", "attested"):
        raise RecordNotLocked(f"record {record.id} is {record.state}")
    if now - record.created_tick < rule.timeout_ticks:
        raise NotTimedOut(f"record {record.id}: {now - record.created_tick} < {rule.timeout_ticks}")
    if not _mpc_ok(record, mpc):
        raise MpcDenied(f"record {record.id}: MPC signers did not authorize the refund")
    _release(record, ledger, now, refund=True)
    record.state = "refunded"
    record.refunded_tick = now
    return record


def baseline_latency(record: SettlementRecord, chains: Mapping[int, Chain], bridge_delay: int) -> int:
    return chains[record.sell_leg.chain].finality_ticks + bridge_delay


def baseline_bridge_settle(
    record: SettlementRecord, ledger: Ledger, chains: Mapping[int, Chain], bridge_delay: int, now: int
) -> bool:
    """Slow-bridge comparator: release once source finality plus delay has elapsed."""
    if record.state == "finalized":
        return True
    if record.state != "locked":
        raise RecordNotLocked(f"record {record.id} is {record.state}")
    if now - record.created_tick < baseline_latency(record, chains, bridge_delay):
        return False
    _release(record, ledger, now, refund=False)
    record.state = "finalized"
    record.finalized_tick = now
    return True


class SettlementEngine:
    """Owns validators and records for one run and steps them each tick."""

    def __init__(
        self,
        ledger: Ledger,
        chains: Mapping[int, Chain],
        validators: Iterable[Validator] = (),
        rule: QuorumRule = QuorumRule(),
        mpc: Optional[Mapping[int, tuple[MpcPolicy, Iterable[str]]]] = None,
        mode: str = "fluxlayer",
        bridge_delay: int = 0,
        slash_fraction: Fraction = Fraction(1),
    ):
        if mode not in ("fluxlayer", "baseline"):
            raise ValueError(f"unknown settlement mode {mode!r}")
        self.ledger = ledger
        self.chains = dict(chains)
        self.validators = {v.id: v for v in validators}
        self.rule = rule
        self.mpc = {c: (p, tuple(a)) for c, (p, a) in (mpc or {}).items()}
        self.mode = mode
        self.bridge_delay = bridge_delay
        self.slash_fraction = Fraction(slash_fraction)
        self.records: dict[int, SettlementRecord] = {}
        self._pending: list[int] = []
        self._next_id = 1

    def custody_for(self, *chains: int) -> str:
        if any(self.chains[c].no_smart_contracts for c in chains):
            return "mpc"
        return "escrow"

    def open_fill(self, intent: Intent, taker: str, amount: int, buy_amount: int, now: int) -> SettlementRecord:
        """Create and lock the record for one matched fill.

        Raises InsufficientTakerFunds before registering anything.
        """
        record = SettlementRecord(
            id=self._next_id,
            intent_id=intent.id,
            taker=taker,
            sell_leg=SettlementLeg(intent.sell.chain, intent.sell.asset, amount, intent.funding_account, taker),
            buy_leg=SettlementLeg(intent.buy.chain, intent.buy.asset, buy_amount, taker, intent.funding_account),
            custody=self.custody_for(intent.sell.chain, intent.buy.chain),
            created_tick=now,
        )
        lock(record, self.ledger, now)
        self.records[record.id] = record
        self._pending.append(record.id)
        self._next_id += 1
        return record

    def _cast_votes(self, record: SettlementRecord, now: int) -> None:
        for v in self.validators.values():
            if not v.active or v.behavior == "offline":
                continue
            if now - record.created_tick < v.latency_ticks or v.id in record.attestations:
                continue
            if v.id in record.equivocators:
                continue
            attest(record, self.validators, v.id, True, self.slash_fraction)
            if v.behavior == "equivocating":
                attest(record, self.validators, v.id, False, self.slash_fraction)

    def step(self, now: int) -> tuple[list[SettlementRecord], list[SettlementRecord]]:
        """Advance every pending record; returns (finalized, refunded) this tick."""
        done, refunded = [], []
        still = []
        for rid in self._pending:
            rec = self.records[rid]
            if self.mode == "baseline":
                if baseline_bridge_settle(rec, ledger=self.ledger, chains=self.chains,
                                          bridge_delay=self.bridge_delay, now=now):
                    done.append(rec)
                else:
                    still.append(rid)
                continue
            self._cast_votes(rec, now)
            if finalize(rec, self.validators, self.rule, self.ledger, now, self.mpc):
                done.append(rec)
            elif now - rec.created_tick >= self.rule.timeout_ticks and _mpc_ok(rec, self.mpc):
                refund_on_timeout(rec, self.rule, self.ledger, now, self.mpc)
                refunded.append(rec)
            else:
                still.append(rid)
        self._pending = still
        return done, refunded

    def pending(self) -> list[SettlementRecord]:
        return [self.records[r] for r in self._pending]
