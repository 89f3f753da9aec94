"""Intent order book: funded cross-chain swap orders filled by takers.

Intents are escrowed in full at submission. Takers queue offers against an
intent; once per tick ``match_tick`` allocates the queue in price-time
priority (best price first, then earliest offer). Every accepted
(taker, amount) pair is handed to ``on_fill``, which is expected to lock the
fill into settlement custody and return a settlement id.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Optional, Union

from .errors import FluxError, InsufficientBalance, ZeroAmount
from .ledger import Ledger

log = logging.getLogger(__name__)

ESCROW = "escrow:intents"
MATCHED = "escrow:matched"


class InsufficientFunds(InsufficientBalance):
    pass


class DeadlineInPast(FluxError):
    pass


class PriceBelowLimit(FluxError):
    pass


class FragmentTooSmall(FluxError):
    pass


class IntentClosed(FluxError):
    pass


class UnknownIntent(FluxError):
    pass


@dataclass(frozen=True)
class Leg:
    chain: int
    asset: str
    amount: int = 0


@dataclass(frozen=True)
class AllOrNothing:
    pass


@dataclass(frozen=True)
class Fragmentable:
    min_fragment: int

    def __post_init__(self):
        if self.min_fragment <= 0:
            raise ValueError("min_fragment must be positive")


FillPolicy = Union[AllOrNothing, Fragmentable]


@dataclass(frozen=True)
class OwnFunds:
    pass


@dataclass(frozen=True)
class VaultLoan:
    position_id: int
    account: str


Funding = Union[OwnFunds, VaultLoan]

OPEN_STATES = ("open", "partially_filled")


@dataclass
class Fill:
    taker: str
    amount: int
    price: Fraction
    buy_amount: int
    settlement_id: Optional[int] = None


@dataclass
class Intent:
    maker: str
    sell: Leg
    buy: Leg  # buy.amount is ignored; the floor comes from limit_price
    limit_price: Fraction  # minimum buy units per sell unit
    fill_policy: FillPolicy = field(default_factory=AllOrNothing)
    deadline_tick: int = 0
    funding: Funding = field(default_factory=OwnFunds)
    created_tick: int = 0
    id: Optional[int] = None
    state: str = "open"
    remaining: int = 0
    fills: list[Fill] = field(default_factory=list)

    def __post_init__(self):
        self.limit_price = Fraction(self.limit_price)
        if self.remaining == 0 and self.state == "open":
            self.remaining = self.sell.amount

    @property
    def amount(self) -> int:
        return self.sell.amount

    @property
    def min_total_out(self) -> int:
        q = self.limit_price * self.sell.amount
        return -((-q.numerator) // q.denominator)

    @property
    def filled_amount(self) -> int:
        return self.sell.amount - self.remaining

    @property
    def funding_account(self) -> str:
        if isinstance(self.funding, VaultLoan):
            return self.funding.account
        return self.maker

    @property
    def is_open(self) -> bool:
        return self.state in OPEN_STATES


@dataclass(frozen=True)
class FillOffer:
    taker: str
    intent_id: int
    take_amount: int
    price: Fraction
    offered_tick: int
    seq: int = 0

    def priority(self):
        return (-self.price, self.offered_tick, self.seq)


@dataclass
class MatchResult:
    intent_id: int
    fills: list[Fill]
    fully_filled: bool

    @property
    def settlement_ids(self) -> list[int]:
        return [f.settlement_id for f in self.fills if f.settlement_id is not None]


@dataclass(frozen=True)
class Refund:
    intent_id: int
    account: str
    chain: int
    asset: str
    amount: int
    reason: str


def fill_buy_amount(amount: int, price: Fraction) -> int:
    q = price * amount
    return -((-q.numerator) // q.denominator)


def allocate(intent: Intent, queue: list[FillOffer]) -> list[tuple[FillOffer, int]]:
    """Greedy price-time allocation of ``queue`` (already in priority order).

    Each offer in turn gets the largest amount that keeps the intent in a
    legal state: for Fragmentable(m) the remainder must end at 0 or >= m,
    and every fill is >= m; AllOrNothing fills only when the queue covers
    the whole remainder.
    """
    r = intent.remaining
    out: list[tuple[FillOffer, int]] = []
    if isinstance(intent.fill_policy, AllOrNothing):
        if sum(o.take_amount for o in queue) < r:
            return []
        for o in queue:
            if r == 0:
                break
            a = min(o.take_amount, r)
            out.append((o, a))
            r -= a
        return out
    m = intent.fill_policy.min_fragment
    for o in queue:
        if r == 0:
            break
        a = min(o.take_amount, r)
        if 0 < r - a < m:
            a = r - m
        if a < m:
            continue
        out.append((o, a))
        r -= a
    return out


OnFill = Callable[[Intent, FillOffer, int, int], Optional[int]]
CanFill = Callable[[Intent, FillOffer, int], bool]


class IntentBook:
    def __init__(self):
        self.intents: dict[int, Intent] = {}
        self.queues: dict[int, list[FillOffer]] = {}
        self._next_id = 1
        self._next_seq = 1

    def get(self, intent_id: int) -> Intent:
        try:
            return self.intents[intent_id]
        except KeyError:
            raise UnknownIntent(intent_id) from None

    def submit_intent(self, intent: Intent, ledger: Ledger, now: int, vault=None) -> int:
        if intent.sell.amount <= 0:
            raise ZeroAmount("intent sell amount must be positive")
        if intent.deadline_tick <= now:
            raise DeadlineInPast(f"deadline {intent.deadline_tick} <= now {now}")
        if intent.limit_price < 0:
            raise ValueError("limit_price must be >= 0")
        policy = intent.fill_policy
        if isinstance(policy, Fragmentable) and policy.min_fragment > intent.sell.amount:
            raise ValueError("min_fragment exceeds the sell amount")
        if isinstance(intent.funding, VaultLoan) and vault is not None:
            pos = vault.positions.get(intent.funding.position_id)
            if pos is None or pos.state != "open" or vault.loan_account(pos.id) != intent.funding.account:
                raise InsufficientFunds(f"vault position {intent.funding.position_id} is not an open loan")
        src = intent.funding_account
        have = ledger.balance(src, intent.sell.chain, intent.sell.asset)
        if have < intent.sell.amount:
            raise InsufficientFunds(f"{src} holds {have} {intent.sell.asset}, needs {intent.sell.amount}")
        ledger.transfer(src, ESCROW, intent.sell.chain, intent.sell.asset, intent.sell.amount, now)
        intent.id = self._next_id
        self._next_id += 1
        intent.created_tick = now
        intent.state = "open"
        intent.remaining = intent.sell.amount
        intent.fills = []
        self.intents[intent.id] = intent
        self.queues[intent.id] = []
        return intent.id

    def submit_offer(self, offer: FillOffer) -> FillOffer:
        intent = self.get(offer.intent_id)
        if not intent.is_open or offer.offered_tick >= intent.deadline_tick:
            raise IntentClosed(f"intent {intent.id} is {intent.state}")
        if offer.take_amount <= 0:
            raise ZeroAmount("take_amount must be positive")
        if offer.price < intent.limit_price:
            raise PriceBelowLimit(f"{offer.price} < limit {intent.limit_price}")
        policy = intent.fill_policy
        if isinstance(policy, Fragmentable) and offer.take_amount < policy.min_fragment:
            raise FragmentTooSmall(f"{offer.take_amount} < min_fragment {policy.min_fragment}")
        queued = FillOffer(offer.taker, offer.intent_id, offer.take_amount, Fraction(offer.price),
                           offer.offered_tick, self._next_seq)
        self._next_seq += 1
        q = self.queues[intent.id]
        q.append(queued)
        q.sort(key=FillOffer.priority)
        return queued

    def match_tick(
        self,
        now: int,
        on_fill: Optional[OnFill] = None,
        can_fill: Optional[CanFill] = None,
        ledger: Optional[Ledger] = None,
    ) -> list[MatchResult]:
        """Run one matching batch over every live intent, in id order.

        Without ``on_fill`` but with a ledger, filled amounts are parked in
        the MATCHED account so escrow stays equal to open remainders.
        """
        results = []
        for iid in sorted(self.queues):
            intent = self.intents[iid]
            queue = self.queues[iid]
            if not intent.is_open or not queue or now >= intent.deadline_tick:
                continue
            candidates = queue
            if can_fill is not None:
                candidates = [o for o in queue if can_fill(intent, o, min(o.take_amount, intent.remaining))]
            plan = allocate(intent, candidates)
            if not plan:
                continue
            fills = []
            for offer, amount in plan:
                buy_amount = fill_buy_amount(amount, offer.price)
                sid = None
                if on_fill is not None:
                    sid = on_fill(intent, offer, amount, buy_amount)
                elif ledger is not None:
                    ledger.transfer(ESCROW, MATCHED, intent.sell.chain, intent.sell.asset, amount, now)
                intent.remaining -= amount
                fill = Fill(offer.taker, amount, offer.price, buy_amount, sid)
                intent.fills.append(fill)
                fills.append(fill)
            used = {id(o) for o, _ in plan}
            self.queues[iid] = [o for o in queue if id(o) not in used]
            if intent.remaining == 0:
                intent.state = "filled"
                self.queues[iid] = []
            else:
                intent.state = "partially_filled"
            results.append(MatchResult(iid, fills, intent.remaining == 0))
        return results

    def _close(self, intent: Intent, ledger: Ledger, now: int, state: str) -> Optional[Refund]:
        intent.state = state
        self.queues[intent.id] = []
        amount = intent.remaining
        if amount == 0:
            return None
        ledger.transfer(ESCROW, intent.funding_account, intent.sell.chain, intent.sell.asset, amount, now)
        intent.remaining = 0
        return Refund(intent.id, intent.funding_account, intent.sell.chain, intent.sell.asset, amount, state)

    def cancel(self, intent_id: int, ledger: Ledger, now: int) -> Optional[Refund]:
        intent = self.get(intent_id)
        if not intent.is_open:
            raise IntentClosed(f"intent {intent_id} is {intent.state}")
        return self._close(intent, ledger, now, "cancelled")

    def expire_and_cancel(self, ledger: Ledger, now: int) -> list[Refund]:
        refunds = []
        for iid in sorted(self.intents):
            intent = self.intents[iid]
            if intent.is_open and now >= intent.deadline_tick:
                r = self._close(intent, ledger, now, "expired")
                if r is not None:
                    refunds.append(r)
        return refunds

    def escrow_outstanding(self) -> dict[tuple[int, str], int]:
        """Sum of open remainders per (chain, asset); must equal the escrow balance."""
        out: dict[tuple[int, str], int] = {}
        for intent in self.intents.values():
            if intent.is_open:
                key = (intent.sell.chain, intent.sell.asset)
                out[key] = out.get(key, 0) + intent.remaining
        return out

    def open_intents(self) -> list[Intent]:
        return [self.intents[i] for i in sorted(self.intents) if self.intents[i].is_open]
