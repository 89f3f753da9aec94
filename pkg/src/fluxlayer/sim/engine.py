"""Deterministic tick loop driving venues, agents and the protocol stack.

Each tick runs fixed phases:

1. advance prices, refresh CEX ladders, background arbitrage nudges pools
2. searchers detect gaps and submit funded intents
3. takers queue offers priced off the CEX
4. intent matching; each fill is locked into settlement custody
5. attestation and finalisation (or the slow bridge in baseline mode)
6. vault marking, then repay or liquidate closed positions
7. intent expiry and refunds
8. metrics sample

Arbitrage flow per route (AMM pool on chain D, takers settling on chain T):

* ``buy_x`` (pool cheap): swap USDT->BTC on the pool at once, then sell
  the BTC through an intent for USDT on T.
* ``sell_x`` (pool rich): buy BTC through an intent paying USDT on T; when
  the settlement releases the BTC on D, sell it into the pool. Whatever the
  pool pays at that moment is the realised result, so a gap that closes
  before finality turns into a loss. On routes with ``hedge`` set, each
  fill is also shorted for cash on the CEX until it settles. The short
  covers the share of a CEX move the pool is expected to follow before
  settlement, ``1 - 2**(-latency / half_life)``, so what remains is the
  venue gap at finality rather than an outright bet on the price.

Each opportunity runs out of its own funding account (``opp:N`` for own
funds, ``loan:N`` for vault loans) so its PnL is just the account's final
value minus what went in.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from decimal import Decimal, localcontext
from fractions import Fraction
from typing import Optional

from ..errors import InsufficientBalance
from ..intent import (
    ESCROW,
    AllOrNothing,
    FillOffer,
    Fragmentable,
    Intent,
    IntentBook,
    Leg,
    OwnFunds,
    VaultLoan,
    fill_buy_amount,
)
from ..ledger import Asset, Chain, ChainClock, Ledger, advance_clock
from ..markets import BPS, AmmPool, CexBook, amm_out, cex_fill, execute_amm_swap, optimal_arb_size
from ..settlement import MpcPolicy, QuorumRule, SettlementEngine, SettlementRecord, Validator
from ..vault import Shortfall, Vault
from .prices import PriceProcess, build_ladder
from .report import MetricsReport, latency_stats, to_decimal
from .scenario import Scenario

log = logging.getLogger(__name__)

TREASURY = "treasury"
BACKGROUND = "background"


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


@dataclass(frozen=True)
class Route:
    pool: str
    cex: str
    pool_chain: int
    taker_chain: int
    hedge: bool = False


@dataclass(frozen=True)
class Detection:
    route: Route
    direction: str  # buy_x | sell_x
    amount_in: int
    gross_profit: int
    fees: int
    net_profit: int

    @property
    def funding_chain(self) -> int:
        return self.route.pool_chain if self.direction == "buy_x" else self.route.taker_chain


@dataclass
class Opportunity:
    id: int
    searcher: str
    route: Route
    direction: str
    tick: int
    chain: int
    account: str
    funded: int
    expected_net: int
    position_id: Optional[int] = None
    intent_id: Optional[int] = None
    records: list[int] = field(default_factory=list)
    hedges: dict[int, tuple[int, int]] = field(default_factory=dict)  # record -> (btc short, usdt raised)
    hedge_pnl: int = 0
    fees_paid: int = 0
    state: str = "open"
    captured: bool = False
    pnl: int = 0
    maker_pnl: int = 0
    close_tick: Optional[int] = None


@dataclass
class Searcher:
    id: str
    min_profit: int
    uses_vault: bool
    fill_policy: str
    min_fragment_bps: int
    ttl: int


@dataclass
class Taker:
    id: str
    spread_bps: int
    max_take_notional: Optional[int]


class World:
    def __init__(self, scenario: Scenario, debug: bool = False):
        self.scenario = s = scenario
        self.debug = debug
        self.mode = s.mode
        self.tick = -1
        chains = [Chain(c.id, c.name, c.block_interval_ticks, c.native_finality_blocks, c.no_smart_contracts)
                  for c in s.chains]
        self.ledger = Ledger(chains, [(a.chain, Asset(a.symbol, a.decimals)) for a in s.assets])
        self.clock = ChainClock(tuple(chains), 0)
        self.symbol_decimals = {a.symbol: a.decimals for a in s.assets}
        self.fee_asset = s.fees.asset
        self.fee_unit = 10 ** self.symbol_decimals.get(self.fee_asset, 0)
        self.gas = {c.id: 0 for c in s.chains}
        for g in s.fees.gas:
            self.gas[g.chain] = s.base_units(g.chain, self.fee_asset, g.amount)
        fee_chain = next((a.chain for a in s.assets if a.symbol == self.fee_asset), None)
        self.settlement_fee = s.base_units(fee_chain, self.fee_asset, s.fees.settlement_fee) if fee_chain else 0

        for m in s.mints:
            self.ledger.mint(m.owner, m.chain, m.symbol, s.base_units(m.chain, m.symbol, m.amount))

        self.pools: dict[str, AmmPool] = {}
        for p in s.pools:
            pool = AmmPool(p.id, p.chain, p.asset_x, p.asset_y,
                           s.base_units(p.chain, p.asset_x, p.reserve_x),
                           s.base_units(p.chain, p.asset_y, p.reserve_y), p.fee_bps)
            self.ledger.mint(pool.account, p.chain, p.asset_x, pool.reserve_x)
            self.ledger.mint(pool.account, p.chain, p.asset_y, pool.reserve_y)
            self.pools[p.id] = pool

        self.processes = {(pp.base, pp.quote): PriceProcess(pp, s.seed, i)
                          for i, pp in enumerate(s.price_processes)}
        self.cex_specs = {b.id: b for b in s.cex_books}
        self.books: dict[str, CexBook] = {}
        self._refresh_books()

        self.routes = [Route(r.pool, r.cex, self.pools[r.pool].chain, r.taker_chain, r.hedge)
                       for r in s.routes]
        for b in s.cex_books:
            if b.hedge_liquidity > 0:
                for (cid, sym) in sorted(self.ledger.assets):
                    if sym == self.fee_asset:
                        self.ledger.mint(self.cex_account(b.id), cid, sym, s.base_units(cid, sym, b.hedge_liquidity))

        q = s.quorum
        mpc = {}
        for m in s.mpc_policies:
            online = m.online if m.online is not None else m.signers
            mpc[m.chain] = (MpcPolicy(tuple(m.signers), m.t), tuple(online))
        self.settlement = SettlementEngine(
            self.ledger,
            self.ledger.chains,
            [Validator(v.id, v.restake, behavior=v.behavior, latency_ticks=v.latency_ticks) for v in s.validators],
            QuorumRule(q.threshold_num, q.threshold_den, q.timeout_ticks),
            mpc,
            mode=s.mode,
            bridge_delay=s.bridge.delay_ticks,
            slash_fraction=Fraction(q.slash_fraction),
        )
        self.book = IntentBook()

        self.vault: Optional[Vault] = None
        if s.vault is not None and s.vault.enabled:
            v = s.vault
            self.vault = Vault(v.asset, {lp.chain for lp in v.lps}, Fraction(v.max_leverage),
                               v.maintenance_margin_bps, v.interest_rate_bps_per_epoch, v.epoch_ticks,
                               v.profit_share_bps)
            for lp in v.lps:
                amt = s.base_units(lp.chain, v.asset, lp.amount)
                self.ledger.mint(lp.id, lp.chain, v.asset, amt)
                self.vault.deposit(self.ledger, lp.id, lp.chain, amt, 0)

        self.searchers: list[Searcher] = []
        self.initial_capital = 0
        for spec in s.agents.searchers:
            for k in range(spec.count):
                sid = spec.id if spec.count == 1 else f"{spec.id}{k + 1}"
                for h in spec.capital:
                    amt = s.base_units(h.chain, h.symbol, h.amount)
                    self.ledger.mint(sid, h.chain, h.symbol, amt)
                    if h.symbol == self.fee_asset:
                        self.initial_capital += amt
                threshold = int(Decimal(spec.min_profit_threshold).scaleb(self.symbol_decimals[self.fee_asset]))
                self.searchers.append(Searcher(sid, threshold, spec.uses_vault, spec.fill_policy,
                                               spec.min_fragment_bps, spec.intent_ttl_ticks))
        self.takers: list[Taker] = []
        for spec in s.agents.takers:
            for k in range(spec.count):
                tid = spec.id if spec.count == 1 else f"{spec.id}{k + 1}"
                for h in spec.inventory:
                    self.ledger.mint(tid, h.chain, h.symbol, s.base_units(h.chain, h.symbol, h.amount))
                cap = None
                if spec.max_take_notional is not None:
                    cap = int(Decimal(spec.max_take_notional).scaleb(self.symbol_decimals[self.fee_asset]))
                self.takers.append(Taker(tid, spec.spread_bps, cap))
        self.bg = s.agents.background
        if self.bg is not None:
            for h in self.bg.inventory:
                self.ledger.mint(BACKGROUND, h.chain, h.symbol, s.base_units(h.chain, h.symbol, h.amount))

        self.preloaded = sorted(enumerate(s.intents), key=lambda t: (t[1].submit_tick, t[0]))
        self.opps: dict[int, Opportunity] = {}
        self.open_by_pool: dict[tuple[str, str], int] = {}
        self.opp_by_intent: dict[int, int] = {}
        self._next_opp = 1

        # metrics accumulators
        self.detected = 0
        self.fees_paid = 0
        self.slippages: list[int] = []
        self.latencies: list[int] = []
        self.mev_cum = 0
        self.realized = 0
        self.maker_pnl = 0
        self.refunded = 0
        self.liquidations = 0
        self.series: list[tuple] = []
        if self.debug:
            self.check()

    # -- helpers ------------------------------------------------------------

    def _decimals(self, symbol: str) -> int:
        return self.symbol_decimals[symbol]

    def mid(self, base: str, quote: str) -> Fraction:
        proc = self.processes[(base, quote)]
        units = max(1, round(proc.price * 10 ** self._decimals(quote)))
        return Fraction(units, 10 ** self._decimals(base))

    def value_in_fee_asset(self, symbol: str, amount: int) -> Fraction:
        if symbol == self.fee_asset:
            return Fraction(amount)
        if (symbol, self.fee_asset) in self.processes:
            return self.mid(symbol, self.fee_asset) * amount
        return Fraction(0)

    def _refresh_books(self) -> None:
        for bid, spec in self.cex_specs.items():
            proc = self.processes[(spec.base, spec.quote)]
            self.books[bid] = build_ladder(spec, proc.price, self._decimals(spec.base), self._decimals(spec.quote))

    def _pay_fee(self, account: str, chain: int, amount: int) -> int:
        amount = min(amount, self.ledger.balance(account, chain, self.fee_asset))
        if amount > 0:
            self.ledger.transfer(account, TREASURY, chain, self.fee_asset, amount, self.tick)
            self.fees_paid += amount
        return max(amount, 0)

    def min_taker_spread(self) -> int:
        return min((t.spread_bps for t in self.takers), default=0)

    # -- venue valuation (shared by searchers and takers) -------------------

    def cex_proceeds(self, book: CexBook, q: int, spread_bps: int) -> int:
        """Quote units a taker pays for ``q`` base units, hedged on the CEX bid side."""
        if q <= 0:
            return 0
        quote, _ = cex_fill(book, "sell", q)
        if quote.partial:
            return 0
        return quote.amount_out * (BPS - spread_bps) // BPS

    def cex_cost(self, book: CexBook, q: int, spread_bps: int) -> Optional[int]:
        """Quote units a taker charges to deliver ``q`` base units, or None without depth."""
        if q <= 0:
            return 0
        gross = _ceil_div(q * BPS, BPS - book.taker_fee_bps)
        quote, _ = cex_fill(book, "buy", gross)
        if quote.partial:
            return None
        return _ceil_div(quote.amount_in * (BPS + spread_bps), BPS)

    def max_base_for(self, book: CexBook, budget: int, spread_bps: int, hi: int) -> int:
        """Largest base amount whose delivered cost fits in ``budget``."""
        lo = 0
        while lo < hi:
            mid = (lo + hi + 1) // 2
            c = self.cex_cost(book, mid, spread_bps)
            if c is not None and c <= budget:
                lo = mid
            else:
                hi = mid - 1
        return lo

    @staticmethod
    def cex_account(book_id: str) -> str:
        return f"cex:{book_id}"

    def hedge_entry(self, book: CexBook, q: int) -> tuple[int, int]:
        """(base shorted, quote raised) for a cash-settled short of ``q`` at the bid."""
        if q <= 0:
            return 0, 0
        quote, _ = cex_fill(book, "sell", q)
        return quote.amount_in, quote.amount_out

    def hedge_exit_cost(self, book: CexBook, q: int) -> int:
        """Quote units to buy back ``q`` base units; beyond the ladder, at its last ask."""
        if q <= 0:
            return 0
        gross = _ceil_div(q * BPS, BPS - book.taker_fee_bps)
        quote, _ = cex_fill(book, "buy", gross)
        cost = quote.amount_in
        if quote.partial:
            filled = sum(size for _, size in book.asks)
            last = book.asks[-1][0]
            cost += _ceil_div((gross - filled) * last.numerator, last.denominator)
        return cost

    def hedge_round_trip(self, book: CexBook, q: int) -> int:
        short, raised = self.hedge_entry(book, q)
        return self.hedge_exit_cost(book, short) - raised

    def expected_latency(self, sell_chain: int) -> int:
        """Settlement delay a searcher plans for: bridge finality, or the
        tick by which honest validators carrying a quorum have all voted."""
        eng = self.settlement
        if self.mode == "baseline":
            return self.ledger.chains[sell_chain].finality_ticks + eng.bridge_delay
        total = sum(v.restake for v in eng.validators.values() if v.active)
        voters = sorted((v.latency_ticks, v.restake) for v in eng.validators.values()
                        if v.active and v.behavior == "honest")
        yes = 0
        for latency, stake in voters:
            yes += stake
            if yes * eng.rule.threshold_den >= eng.rule.threshold_num * total:
                return latency
        return eng.rule.timeout_ticks

    def hedge_ratio(self, sell_chain: int) -> Fraction:
        if self.bg is None or self.bg.half_life_ticks is None:
            return Fraction(0)  # nothing pulls the pool toward the CEX
        follow = 1 - 0.5 ** (self.expected_latency(sell_chain) / self.bg.half_life_ticks)
        return Fraction(round(follow * 10**6), 10**6)

    def hedge_size(self, sell_chain: int, q: int) -> int:
        r = self.hedge_ratio(sell_chain)
        return q * r.numerator // r.denominator

    def route_fees(self, route: Route, direction: str) -> int:
        if direction == "buy_x":
            return 2 * self.gas[route.pool_chain] + self.settlement_fee
        return self.gas[route.taker_chain] + self.gas[route.pool_chain] + self.settlement_fee

    def evaluate(self, route: Route, direction: str, amount_in: int, spread_bps: int) -> Optional[tuple[int, int]]:
        """(gross, net) profit in fee-asset base units for a trade of ``amount_in``."""
        pool, book = self.pools[route.pool], self.books[route.cex]
        if amount_in <= 0:
            return None
        if direction == "buy_x":
            q = amm_out(pool.reserve_y, pool.reserve_x, amount_in, pool.fee_bps)
            gross = self.cex_proceeds(book, q, spread_bps) - amount_in
        else:
            cost = self.cex_cost(book, amount_in, spread_bps)
            if cost is None:
                return None
            gross = amm_out(pool.reserve_x, pool.reserve_y, amount_in, pool.fee_bps) - cost
            if route.hedge:
                # the short is opened and closed against the same ladder, so today's
                # round trip is what the hedge is expected to cost
                hedge = self.hedge_size(route.taker_chain, amount_in)
                return gross, gross - self.route_fees(route, direction) - self.hedge_round_trip(book, hedge)
        return gross, gross - self.route_fees(route, direction)

    # -- phase 1 ------------------------------------------------------------

    def _advance_prices(self) -> None:
        if self.tick > 0:
            for proc in self.processes.values():
                proc.step()
            self._refresh_books()
        if self.bg is None or self.bg.half_life_ticks is None:
            return
        phi = 1 - 0.5 ** (1 / self.bg.half_life_ticks)
        for route in self.routes:
            pool = self.pools[route.pool]
            target = self.processes[(pool.asset_x, pool.asset_y)].price
            scale = 10 ** (self._decimals(pool.asset_y) - self._decimals(pool.asset_x))
            spot = pool.reserve_y / pool.reserve_x / scale
            goal = spot * (target / spot) ** phi
            k = pool.reserve_x * pool.reserve_y
            new_x = math.sqrt(k / (goal * scale))
            if goal > spot:
                asset_in, amount = pool.asset_y, int(k / new_x - pool.reserve_y)
            else:
                asset_in, amount = pool.asset_x, int(new_x - pool.reserve_x)
            if amount <= 0 or self.ledger.balance(BACKGROUND, pool.chain, asset_in) < amount:
                continue
            if amm_out(*(pool._orient(asset_in)), amount, pool.fee_bps) <= 0:
                continue
            self.pools[route.pool], _ = execute_amm_swap(self.ledger, pool, BACKGROUND, asset_in, amount, self.tick)

    # -- phase 2 ------------------------------------------------------------

    def detect(self) -> list[Detection]:
        return detect_opportunities(self, self.min_taker_spread())

    def _submit_preloaded(self) -> None:
        s = self.scenario
        while self.preloaded and self.preloaded[0][1].submit_tick <= self.tick:
            _, it = self.preloaded.pop(0)
            if it.submit_tick < self.tick:
                continue
            amount = s.base_units(it.sell_chain, it.sell_asset, it.sell_amount)
            scale = Fraction(10 ** self._decimals(it.buy_asset), 10 ** self._decimals(it.sell_asset))
            policy = AllOrNothing()
            if it.fill_policy == "fragmentable":
                policy = Fragmentable(s.base_units(it.sell_chain, it.sell_asset, it.min_fragment))
            intent = Intent(it.maker, Leg(it.sell_chain, it.sell_asset, amount), Leg(it.buy_chain, it.buy_asset),
                            Fraction(it.limit_price) * scale, policy, it.deadline_tick)
            try:
                self.book.submit_intent(intent, self.ledger, self.tick)
            except InsufficientBalance as e:
                log.warning("preloaded intent by %s rejected: %s", it.maker, e)

    def _searchers_act(self, detections: list[Detection]) -> None:
        spread = self.min_taker_spread()
        for searcher in self.searchers:
            for det in detections:
                key = (searcher.id, det.route.pool)
                if key in self.open_by_pool:
                    continue
                self._try_open(searcher, det, spread)

    def _budget(self, searcher: Searcher, chain: int) -> tuple[int, int]:
        """(own funds, max notional incl. borrowing) on ``chain``."""
        own = self.ledger.balance(searcher.id, chain, self.fee_asset)
        if not (searcher.uses_vault and self.vault is not None and self.vault.asset == self.fee_asset):
            return own, own
        cash = self.vault.cash(self.ledger, chain)
        lev_cap = own * self.vault.max_leverage
        return own, min(math.floor(lev_cap), own + cash)

    def _try_open(self, searcher: Searcher, det: Detection, spread: int) -> None:
        route, chain = det.route, det.funding_chain
        fees_now = self.route_fees(route, det.direction)
        if det.direction == "sell_x":
            fees_now -= self.gas[route.pool_chain]  # paid later from the pool proceeds
        own, cap = self._budget(searcher, chain)
        amount_in = det.amount_in
        book = self.books[route.cex]
        if det.direction == "buy_x":
            need = amount_in + fees_now
            if need > cap:
                amount_in = cap - fees_now
        else:
            cost = self.cex_cost(book, amount_in, spread)
            if cost is None:
                return
            if cost + fees_now > cap:
                amount_in = self.max_base_for(book, cap - fees_now, spread, amount_in)
        if amount_in <= 0:
            return
        ev = self.evaluate(route, det.direction, amount_in, spread)
        if ev is None or ev[1] < max(searcher.min_profit, 1):
            return
        if det.direction == "buy_x":
            notional = amount_in + fees_now
        else:
            notional = self.cex_cost(book, amount_in, spread) + fees_now
        self._open(searcher, det, amount_in, notional, fees_now, own, ev[1])

    def _open(self, searcher: Searcher, det: Detection, amount_in: int, notional: int, fees_now: int,
              own: int, expected: int) -> None:
        route, chain = det.route, det.funding_chain
        oid = self._next_opp
        self._next_opp += 1
        position_id = None
        if notional <= own:
            account = f"opp:{oid}"
            self.ledger.transfer(searcher.id, account, chain, self.fee_asset, notional, self.tick)
            funding = OwnFunds()
        else:
            v = self.vault
            collateral = max(_ceil_div(notional * v.max_leverage.denominator, v.max_leverage.numerator),
                             notional - v.cash(self.ledger, chain))
            collateral = min(collateral, own)
            pos = v.borrow(self.ledger, searcher.id, chain, collateral, notional - collateral, self.tick)
            position_id = pos.id
            account = v.loan_account(pos.id)
            funding = VaultLoan(pos.id, account)
        opp = Opportunity(oid, searcher.id, route, det.direction, self.tick, chain, account, notional,
                          expected, position_id)
        opp.fees_paid += self._pay_fee(account, chain, fees_now)
        pool = self.pools[route.pool]
        book = self.books[route.cex]
        spread = self.min_taker_spread()
        if det.direction == "buy_x":
            self.pools[route.pool], q = execute_amm_swap(self.ledger, pool, account, pool.asset_y, amount_in,
                                                         self.tick)
            self.slippages.append(q.slippage_bps)
            sell = Leg(route.pool_chain, pool.asset_x, q.amount_out)
            buy = Leg(route.taker_chain, pool.asset_y)
            limit = Fraction(notional, q.amount_out)
        else:
            cost = self.ledger.balance(account, chain, self.fee_asset)
            sell = Leg(route.taker_chain, pool.asset_y, cost)
            buy = Leg(route.pool_chain, pool.asset_x)
            limit = Fraction(self._breakeven_base(pool, notional + self.gas[route.pool_chain], amount_in), cost)
        if isinstance(funding, OwnFunds):
            maker = account
        else:
            maker = searcher.id
        policy = AllOrNothing()
        if searcher.fill_policy == "fragmentable":
            policy = Fragmentable(max(1, sell.amount * searcher.min_fragment_bps // BPS))
        intent = Intent(maker, sell, buy, limit, policy, self.tick + searcher.ttl, funding)
        self.book.submit_intent(intent, self.ledger, self.tick, self.vault)
        opp.intent_id = intent.id
        self.opps[oid] = opp
        self.opp_by_intent[intent.id] = oid
        self.open_by_pool[(searcher.id, route.pool)] = oid

    def _breakeven_base(self, pool: AmmPool, target: int, hi: int) -> int:
        """Smallest x amount whose pool sale returns at least ``target`` y."""
        if amm_out(pool.reserve_x, pool.reserve_y, hi, pool.fee_bps) < target:
            return hi
        lo = 1
        while lo < hi:
            mid = (lo + hi) // 2
            if amm_out(pool.reserve_x, pool.reserve_y, mid, pool.fee_bps) >= target:
                hi = mid
            else:
                lo = mid + 1
        return lo

    # -- phase 3 ------------------------------------------------------------

    def _book_for(self, a: str, b: str) -> Optional[CexBook]:
        for book in self.books.values():
            if {book.base, book.quote} == {a, b}:
                return book
        return None

    def _takers_offer(self) -> None:
        for intent in self.book.open_intents():
            if self.tick >= intent.deadline_tick:
                continue
            book = self._book_for(intent.sell.asset, intent.buy.asset)
            if book is None:
                continue
            queued = {o.taker for o in self.book.queues[intent.id]}
            for taker in self.takers:
                if taker.id in queued:
                    continue
                offer = self._price_offer(taker, intent, book)
                if offer is not None:
                    self.book.submit_offer(offer)

    def _price_offer(self, taker: Taker, intent: Intent, book: CexBook) -> Optional[FillOffer]:
        take = intent.remaining
        if taker.max_take_notional is not None:
            if intent.sell.asset == self.fee_asset:
                take = min(take, taker.max_take_notional)
            else:
                per_unit = self.mid(intent.sell.asset, self.fee_asset)
                take = min(take, int(taker.max_take_notional / per_unit))
        policy = intent.fill_policy
        if isinstance(policy, Fragmentable) and take < policy.min_fragment:
            return None
        if take <= 0:
            return None
        if intent.sell.asset == book.base:
            pay = self.cex_proceeds(book, take, taker.spread_bps)
            if pay <= 0:
                return None
            price = Fraction(pay, take)
        else:
            hi = take * book.asks[0][0].denominator // max(1, book.asks[0][0].numerator) + 1
            b = self.max_base_for(book, take, taker.spread_bps, hi)
            if b <= 0:
                return None
            price = Fraction(b, take)
        if price < intent.limit_price:
            return None
        if self.ledger.balance(taker.id, intent.buy.chain, intent.buy.asset) < fill_buy_amount(take, price):
            return None
        return FillOffer(taker.id, intent.id, take, price, self.tick)

    # -- phase 4 ------------------------------------------------------------

    def _match(self) -> None:
        def can_fill(intent, offer, amount):
            need = fill_buy_amount(amount, offer.price)
            return self.ledger.balance(offer.taker, intent.buy.chain, intent.buy.asset) >= need

        def on_fill(intent, offer, amount, buy_amount):
            rec = self.settlement.open_fill(intent, offer.taker, amount, buy_amount, self.tick)
            oid = self.opp_by_intent.get(intent.id)
            if oid is not None:
                opp = self.opps[oid]
                opp.records.append(rec.id)
                if opp.direction == "sell_x" and opp.route.hedge:
                    size = self.hedge_size(intent.sell.chain, buy_amount)
                    if size > 0:
                        opp.hedges[rec.id] = self.hedge_entry(self.books[opp.route.cex], size)
            return rec.id

        self.book.match_tick(self.tick, on_fill=on_fill, can_fill=can_fill)

    # -- phase 5 ------------------------------------------------------------

    def _settle(self) -> None:
        done, refunded = self.settlement.step(self.tick)
        self.refunded += len(refunded)
        for rec in refunded:
            oid = self.opp_by_intent.get(rec.intent_id)
            if oid is not None:
                self._close_hedge(self.opps[oid], rec.id)
        for rec in done:
            self.latencies.append(rec.latency)
            oid = self.opp_by_intent.get(rec.intent_id)
            if oid is None:
                continue
            opp = self.opps[oid]
            opp.captured = True
            if opp.direction == "sell_x":
                self._sell_into_pool(opp, rec.buy_leg.amount)
                self._close_hedge(opp, rec.id)

    def _close_hedge(self, opp: Opportunity, record_id: int) -> None:
        """Buy back the short and settle its PnL in cash with the exchange."""
        if record_id not in opp.hedges:
            return
        short, raised = opp.hedges.pop(record_id)
        pnl = raised - self.hedge_exit_cost(self.books[opp.route.cex], short)
        cex = self.cex_account(opp.route.cex)
        payer, payee = (cex, opp.account) if pnl > 0 else (opp.account, cex)
        owed = abs(pnl)
        chains = [opp.route.pool_chain, opp.route.taker_chain]
        chains += [c for c in sorted(self.ledger.chains) if c not in chains]
        paid = 0
        for c in chains:
            if paid == owed or (c, self.fee_asset) not in self.ledger.assets:
                continue
            amt = min(owed - paid, self.ledger.balance(payer, c, self.fee_asset))
            if amt > 0:
                self.ledger.transfer(payer, payee, c, self.fee_asset, amt, self.tick)
                paid += amt
        if paid < owed:
            log.warning("hedge on record %d settled %d of %d", record_id, paid, owed)
        opp.hedge_pnl += paid if pnl > 0 else -paid

    def _sell_into_pool(self, opp: Opportunity, amount: int) -> None:
        pool = self.pools[opp.route.pool]
        if amount <= 0 or amm_out(pool.reserve_x, pool.reserve_y, amount, pool.fee_bps) <= 0:
            return
        self.pools[pool.id], q = execute_amm_swap(self.ledger, pool, opp.account, pool.asset_x, amount, self.tick)
        self.slippages.append(q.slippage_bps)
        opp.fees_paid += self._pay_fee(opp.account, pool.chain, self.gas[pool.chain])

    # -- phase 6 / 7 --------------------------------------------------------

    def position_value(self, opp: Opportunity) -> Fraction:
        total = Fraction(0)
        for cid in self.ledger.chains:
            for sym in (self.fee_asset, self.pools[opp.route.pool].asset_x):
                if (cid, sym) in self.ledger.assets:
                    total += self.value_in_fee_asset(sym, self.ledger.balance(opp.account, cid, sym))
        intent = self.book.intents.get(opp.intent_id)
        if intent is not None and intent.is_open:
            total += self.value_in_fee_asset(intent.sell.asset, intent.remaining)
        for rid in opp.records:
            rec = self.settlement.records[rid]
            if not rec.terminal:
                total += self.value_in_fee_asset(rec.buy_leg.asset, rec.buy_leg.amount)
        book = self.books[opp.route.cex]
        for short, raised in opp.hedges.values():
            total += raised - self.hedge_exit_cost(book, short)
        return total

    def _mark_vault(self) -> None:
        if self.vault is None:
            return
        by_position = {o.position_id: o for o in self.opps.values()
                       if o.position_id is not None and o.state == "open"}

        def valuation(pos):
            opp = by_position.get(pos.id)
            return self.position_value(opp) if opp else Fraction(self.vault.holdings(self.ledger, pos))

        self.vault.mark_and_accrue(self.ledger, self.tick, valuation)
        for pos in self.vault.unhealthy():
            opp = by_position.get(pos.id)
            if opp is None:
                continue
            intent = self.book.intents[opp.intent_id]
            if intent.is_open:
                self.book.cancel(intent.id, self.ledger, self.tick)

    def _ready(self, opp: Opportunity) -> bool:
        intent = self.book.intents[opp.intent_id]
        if intent.is_open:
            return False
        return all(self.settlement.records[r].terminal for r in opp.records)

    def _close_ready(self) -> None:
        for oid in sorted(self.opps):
            opp = self.opps[oid]
            if opp.state == "open" and self._ready(opp):
                self._close(opp)

    def _close(self, opp: Opportunity) -> None:
        pool = self.pools[opp.route.pool]
        leftover = self.ledger.balance(opp.account, pool.chain, pool.asset_x)
        if leftover:
            if amm_out(pool.reserve_x, pool.reserve_y, leftover, pool.fee_bps) > 0:
                self._sell_into_pool(opp, leftover)
            else:
                pass  # dust below one output unit stays with the account owner
        final = sum(self.ledger.balance(opp.account, c, self.fee_asset)
                    for c in self.ledger.chains if (c, self.fee_asset) in self.ledger.assets)
        opp.pnl = final - opp.funded
        if opp.position_id is None:
            for c in sorted(self.ledger.chains):
                if (c, self.fee_asset) not in self.ledger.assets:
                    continue
                bal = self.ledger.balance(opp.account, c, self.fee_asset)
                if bal:
                    self.ledger.transfer(opp.account, opp.searcher, c, self.fee_asset, bal, self.tick)
            if self.ledger.balance(opp.account, pool.chain, pool.asset_x):
                self.ledger.transfer(opp.account, opp.searcher, pool.chain, pool.asset_x,
                                     self.ledger.balance(opp.account, pool.chain, pool.asset_x), self.tick)
            opp.maker_pnl = opp.pnl
        else:
            pos = self.vault.positions[opp.position_id]
            try:
                residual = self.vault.repay(self.ledger, pos.id, self.tick)
            except Shortfall:
                self.vault.liquidate(self.ledger, pos.id, self.tick, force=True)
                self.liquidations += 1
                residual = {}
            if self.ledger.balance(opp.account, pool.chain, pool.asset_x):
                self.ledger.transfer(opp.account, opp.searcher, pool.chain, pool.asset_x,
                                     self.ledger.balance(opp.account, pool.chain, pool.asset_x), self.tick)
            opp.maker_pnl = sum(residual.values()) - pos.collateral
        opp.state = "closed"
        opp.close_tick = self.tick
        self.realized += opp.pnl
        self.maker_pnl += opp.maker_pnl
        if opp.captured:
            self.mev_cum += opp.pnl
        self.open_by_pool.pop((opp.searcher, opp.route.pool), None)

    # -- tick ---------------------------------------------------------------

    def step(self, tick: int) -> None:
        self.tick = tick
        self.clock = advance_clock(self.clock, tick - self.clock.tick)
        self._advance_prices()
        self._submit_preloaded()
        dets = self.detect()
        self.detected += len(dets)
        self._searchers_act(dets)
        self._takers_offer()
        self._match()
        self._settle()
        self._mark_vault()
        self._close_ready()
        self.book.expire_and_cancel(self.ledger, tick)
        self._close_ready()
        self._sample()
        if self.debug:
            self.check()

    def _sample(self) -> None:
        mean = Fraction(sum(self.latencies), len(self.latencies)) if self.latencies else Fraction(0)
        slip = Fraction(sum(self.slippages), len(self.slippages)) if self.slippages else Fraction(0)
        util = self.vault.utilization(self.ledger) if self.vault else Fraction(0)
        price = self.vault.share_price if self.vault else Fraction(1)
        self.series.append((self.tick, Fraction(self.mev_cum, self.fee_unit), len(self.latencies),
                            mean, util, price, slip))

    def check(self) -> None:
        self.ledger.check_invariants()
        for key, owed in self.book.escrow_outstanding().items():
            held = self.ledger.balance(ESCROW, key[0], key[1])
            if held != owed:
                raise AssertionError(f"escrow {key}: holds {held}, open intents need {owed}")
        for pid, pool in self.pools.items():
            if self.ledger.balance(pool.account, pool.chain, pool.asset_x) != pool.reserve_x or \
                    self.ledger.balance(pool.account, pool.chain, pool.asset_y) != pool.reserve_y:
                raise AssertionError(f"pool {pid} reserves drifted from its ledger account")
        if self.vault is not None:
            self.vault.check_identity(self.ledger)
        for rec in self.settlement.records.values():
            if rec.finalized_tick is not None and rec.refunded_tick is not None:
                raise AssertionError(f"record {rec.id} both finalized and refunded")

    def report(self) -> MetricsReport:
        s = self.scenario
        unit = self.fee_unit
        mean, median, p95 = latency_stats(self.latencies)
        closed = [o for o in self.opps.values() if o.state == "closed"]
        intents = list(self.book.intents.values())
        fill_rate = (sum(Fraction(i.filled_amount, i.amount) for i in intents) / len(intents)
                     if intents else Fraction(0))
        filled = [i for i in intents if i.fills]
        frags = Fraction(sum(len(i.fills) for i in filled), len(filled)) if filled else Fraction(0)
        r = MetricsReport(mode=s.mode, seed=s.seed, horizon_ticks=s.horizon_ticks)
        r.mev_captured_total = Fraction(self.mev_cum, unit)
        r.realized_pnl_total = Fraction(self.realized, unit)
        r.opportunities_detected = self.detected
        r.opportunities_submitted = len(self.opps)
        r.opportunities_captured = sum(1 for o in closed if o.captured)
        r.opportunities_open_at_end = sum(1 for o in self.opps.values() if o.state == "open")
        r.intents_submitted = len(intents)
        r.settlements_finalized = len(self.latencies)
        r.settlements_refunded = self.refunded
        r.settlements_pending_at_end = len(self.settlement.pending())
        r.latency_mean, r.latency_median, r.latency_p95 = mean, median, p95
        r.total_fees_paid = Fraction(self.fees_paid, unit)
        r.slippage_mean_bps = (Fraction(sum(self.slippages), len(self.slippages))
                               if self.slippages else Fraction(0))
        r.fill_rate = fill_rate
        r.fragments_per_order = frags
        if self.vault is not None:
            r.lp_share_price = self.vault.share_price
            r.lp_apy = annualise(self.vault.share_price, s.horizon_ticks, s.ticks_per_year)
            r.vault_utilization = self.vault.utilization(self.ledger)
            r.vault_interest_earned = Fraction(self.vault.interest_earned, unit)
            r.vault_losses = Fraction(self.vault.losses, unit)
            r.loans_opened = len(self.vault.positions)
        r.liquidations = self.liquidations
        r.maker_pnl = Fraction(self.maker_pnl, unit)
        r.maker_roi = Fraction(self.maker_pnl, self.initial_capital) if self.initial_capital else Fraction(0)
        r.validators_slashed = sum(1 for v in self.settlement.validators.values() if not v.active)
        r.series = list(self.series)
        return r


def annualise(share_price: Fraction, horizon: int, ticks_per_year: int) -> Fraction:
    if horizon <= 0 or share_price <= 0:
        return Fraction(0)
    with localcontext() as ctx:
        ctx.prec = 40
        growth = (to_decimal(share_price).ln() * Decimal(ticks_per_year) / Decimal(horizon)).exp() - 1
        return Fraction(growth.quantize(Decimal("1e-12")))


def detect_opportunities(world: World, spread_bps: int = 0) -> list[Detection]:
    """Every route whose optimally sized trade clears all fees, best first.

    The trade is sized with the closed-form pool optimum against the CEX
    top of book (net of the CEX taker fee and the assumed taker spread),
    then re-evaluated by walking the actual ladder.
    """
    out = []
    for route in world.routes:
        pool, book = world.pools[route.pool], world.books[route.cex]
        if not book.bids or not book.asks:
            continue
        keep_fee = Fraction(BPS - book.taker_fee_bps, BPS)
        sell_px = book.best_bid * keep_fee * Fraction(BPS - spread_bps, BPS)
        buy_px = book.best_ask / keep_fee * Fraction(BPS + spread_bps, BPS)
        for px, want in ((sell_px, "buy_x"), (buy_px, "sell_x")):
            plan = optimal_arb_size(pool, px)
            if plan.direction != want:
                continue
            ev = world.evaluate(route, want, plan.amount_in, spread_bps)
            if ev is None:
                continue
            gross, net = ev
            if net > 0:
                out.append(Detection(route, want, plan.amount_in, gross, gross - net, net))
    out.sort(key=lambda d: (-d.net_profit, d.route.pool, d.direction))
    return out


def run(scenario: Scenario, debug: bool = False) -> MetricsReport:
    world = World(scenario, debug=debug)
    for t in range(scenario.horizon_ticks):
        world.step(t)
    return world.report()


def paired_compare(scenario: Scenario, debug: bool = False):
    from .report import deltas

    flux = run(scenario.with_overrides(mode="fluxlayer"), debug)
    base = run(scenario.with_overrides(mode="baseline"), debug)
    return flux, base, deltas(flux, base)
