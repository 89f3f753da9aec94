"""Scenario file schema, strict parsing and cross-reference validation.

Scenarios are JSON objects with a ``schema_version``. Unknown fields are
rejected. Amounts are written in whole units (decimal strings or numbers)
and converted to integer base units using each asset's decimals.
"""

from __future__ import annotations

import json
from decimal import Decimal
from pathlib import Path
from typing import Literal, Optional, Union

import pydantic
from pydantic import BaseModel, ConfigDict, Field, model_validator

from ..errors import FluxError

SCHEMA_VERSION = 1


class ScenarioError(FluxError):
    exit_code = 2


class ParseError(ScenarioError):
    def __init__(self, message: str, line: Optional[int] = None, field: Optional[str] = None):
        self.line = line
        self.field = field
        where = f"line {line}" if line is not None else (field or "?")
        super().__init__(f"{where}: {message}")


class ValidationError(ScenarioError):
    def __init__(self, field: str, reason: str):
        self.field = field
        self.reason = reason
        super().__init__(f"{field}: {reason}")


Amount = Decimal


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ChainSpec(_Strict):
    id: int
    name: str
    block_interval_ticks: int = Field(ge=1)
    native_finality_blocks: int = Field(default=0, ge=0)
    no_smart_contracts: bool = False


class AssetSpec(_Strict):
    chain: int
    symbol: str
    decimals: int = Field(ge=0, le=18)


class PoolSpec(_Strict):
    id: str
    chain: int
    asset_x: str
    asset_y: str
    reserve_x: Amount = Field(gt=0)
    reserve_y: Amount = Field(gt=0)
    fee_bps: int = Field(default=30, ge=0, le=1000)


class CexSpec(_Strict):
    id: str
    base: str
    quote: str
    taker_fee_bps: int = Field(default=10, ge=0, le=1000)
    half_spread_bps: int = Field(default=1, ge=0)
    levels: int = Field(default=5, ge=1)
    level_size: Amount = Field(gt=0)
    level_step_bps: int = Field(default=5, ge=1)
    # USDT the exchange holds on every chain to settle cash hedges
    hedge_liquidity: Amount = Field(default=Decimal(0), ge=0)


class PriceProcessSpec(_Strict):
    base: str
    quote: str
    initial_price: Amount = Field(gt=0)
    drift: float = 0.0
    volatility: float = Field(default=0.0, ge=0)
    jump_probability: float = Field(default=0.0, ge=0, le=1)
    jump_size: float = Field(default=0.0, ge=0, lt=1)


class ValidatorSpec(_Strict):
    id: str
    restake: int = Field(gt=0)
    behavior: Literal["honest", "offline", "equivocating"] = "honest"
    latency_ticks: int = Field(default=1, ge=0)


class QuorumSpec(_Strict):
    threshold_num: int = 2
    threshold_den: int = 3
    timeout_ticks: int = Field(default=50, gt=0)
    slash_fraction: Amount = Field(default=Decimal(1), ge=0, le=1)


class MpcSpec(_Strict):
    chain: int
    signers: list[str]
    t: int = Field(ge=1)
    online: Optional[list[str]] = None


class BridgeSpec(_Strict):
    delay_ticks: int = Field(default=0, ge=0)


class LpSpec(_Strict):
    id: str
    chain: int
    amount: Amount = Field(gt=0)


class VaultSpec(_Strict):
    enabled: bool = True
    asset: str = "USDT"
    max_leverage: Amount = Field(default=Decimal(10), ge=1)
    maintenance_margin_bps: int = Field(default=500, ge=0, le=10_000)
    interest_rate_bps_per_epoch: int = Field(default=10, ge=0)
    epoch_ticks: int = Field(default=10, gt=0)
    profit_share_bps: int = Field(default=0, ge=0, le=10_000)
    lps: list[LpSpec] = []


class Holding(_Strict):
    chain: int
    symbol: str
    amount: Amount = Field(ge=0)


class SearcherSpec(_Strict):
    id: str
    count: int = Field(default=1, ge=1)
    capital: list[Holding] = []
    min_profit_threshold: Amount = Field(default=Decimal(0), ge=0)
    uses_vault: bool = False
    fill_policy: Literal["all_or_nothing", "fragmentable"] = "fragmentable"
    min_fragment_bps: int = Field(default=1000, gt=0, le=10_000)
    intent_ttl_ticks: int = Field(default=10, gt=0)


class TakerSpec(_Strict):
    id: str
    count: int = Field(default=1, ge=1)
    inventory: list[Holding] = []
    spread_bps: int = Field(default=5, ge=0, lt=10_000)
    max_take_notional: Optional[Amount] = Field(default=None, gt=0)


class BackgroundSpec(_Strict):
    half_life_ticks: Optional[float] = Field(default=50.0, gt=0)
    inventory: list[Holding] = []


class AgentsSpec(_Strict):
    searchers: list[SearcherSpec] = []
    takers: list[TakerSpec] = []
    background: Optional[BackgroundSpec] = None


class GasSpec(_Strict):
    chain: int
    amount: Amount = Field(ge=0)


class FeeSpec(_Strict):
    asset: str = "USDT"
    gas: list[GasSpec] = []
    settlement_fee: Amount = Field(default=Decimal(0), ge=0)


class RouteSpec(_Strict):
    pool: str
    cex: str
    taker_chain: int
    hedge: bool = False


class IntentSpec(_Strict):
    maker: str
    sell_chain: int
    sell_asset: str
    sell_amount: Amount = Field(gt=0)
    buy_chain: int
    buy_asset: str
    limit_price: Amount = Field(ge=0)
    fill_policy: Literal["all_or_nothing", "fragmentable"] = "all_or_nothing"
    min_fragment: Optional[Amount] = None
    submit_tick: int = Field(default=0, ge=0)
    deadline_tick: int


class MintSpec(_Strict):
    owner: str
    chain: int
    symbol: str
    amount: Amount = Field(ge=0)


class Scenario(_Strict):
    schema_version: Literal[1]
    name: str = ""
    seed: int = Field(ge=0, lt=2**64)
    horizon_ticks: int = Field(ge=0)
    mode: Literal["fluxlayer", "baseline"] = "fluxlayer"
    ticks_per_year: int = Field(default=2_628_000, gt=0)
    chains: list[ChainSpec]
    assets: list[AssetSpec]
    pools: list[PoolSpec] = []
    cex_books: list[CexSpec] = []
    price_processes: list[PriceProcessSpec] = []
    validators: list[ValidatorSpec] = []
    quorum: QuorumSpec = QuorumSpec()
    mpc_policies: list[MpcSpec] = []
    bridge: BridgeSpec = BridgeSpec()
    vault: Optional[VaultSpec] = None
    agents: AgentsSpec = AgentsSpec()
    fees: FeeSpec = FeeSpec()
    routes: list[RouteSpec] = []
    intents: list[IntentSpec] = []
    mints: list[MintSpec] = []

    @model_validator(mode="after")
    def _cross_refs(self):
        _validate_refs(self)
        return self

    # -- helpers used by the engine ----------------------------------------

    def decimals(self, chain: int, symbol: str) -> int:
        for a in self.assets:
            if a.chain == chain and a.symbol == symbol:
                return a.decimals
        raise KeyError((chain, symbol))

    def base_units(self, chain: int, symbol: str, amount: Decimal) -> int:
        return to_base_units(amount, self.decimals(chain, symbol))

    def with_overrides(self, **changes) -> "Scenario":
        data = self.model_dump(mode="python")
        data.update(changes)
        return Scenario.model_validate(data)


def to_base_units(amount: Decimal, decimals: int) -> int:
    scaled = Decimal(amount).scaleb(decimals)
    if scaled != scaled.to_integral_value():
        raise ValueError(f"{amount} has more than {decimals} decimal places")
    return int(scaled)


class _RefError(ValueError):
    def __init__(self, field: str, reason: str):
        self.field = field
        super().__init__(f"{field}: {reason}")


def _validate_refs(s: Scenario) -> None:
    def fail(field, reason):
        raise _RefError(field, reason)

    chain_ids = set()
    for i, c in enumerate(s.chains):
        if c.id in chain_ids:
            fail(f"chains[{i}].id", f"duplicate chain id {c.id}")
        chain_ids.add(c.id)
    if not s.chains:
        fail("chains", "at least one chain is required")
    assets = set()
    for i, a in enumerate(s.assets):
        if a.chain not in chain_ids:
            fail(f"assets[{i}].chain", f"unknown chain {a.chain}")
        if (a.chain, a.symbol) in assets:
            fail(f"assets[{i}]", f"duplicate asset {a.symbol} on chain {a.chain}")
        assets.add((a.chain, a.symbol))
    decimals = {(a.chain, a.symbol): a.decimals for a in s.assets}

    def need_asset(field, chain, symbol):
        if chain not in chain_ids:
            fail(field, f"unknown chain {chain}")
        if (chain, symbol) not in assets:
            fail(field, f"unknown asset {symbol} on chain {chain}")

    def need_units(field, chain, symbol, amount):
        need_asset(field, chain, symbol)
        try:
            to_base_units(amount, decimals[(chain, symbol)])
        except ValueError as e:
            fail(field, str(e))

    pool_ids = set()
    for i, p in enumerate(s.pools):
        if p.id in pool_ids:
            fail(f"pools[{i}].id", f"duplicate pool id {p.id}")
        pool_ids.add(p.id)
        need_units(f"pools[{i}].asset_x", p.chain, p.asset_x, p.reserve_x)
        need_units(f"pools[{i}].asset_y", p.chain, p.asset_y, p.reserve_y)
        if p.asset_x == p.asset_y:
            fail(f"pools[{i}]", "pool assets must differ")
    symbols = {a.symbol for a in s.assets}
    pairs = {(pp.base, pp.quote) for pp in s.price_processes}
    if len(pairs) != len(s.price_processes):
        fail("price_processes", "duplicate pair")
    for i, pp in enumerate(s.price_processes):
        for f in ("base", "quote"):
            if getattr(pp, f) not in symbols:
                fail(f"price_processes[{i}].{f}", f"unknown asset {getattr(pp, f)}")
    cex_ids = set()
    for i, b in enumerate(s.cex_books):
        if b.id in cex_ids:
            fail(f"cex_books[{i}].id", f"duplicate book id {b.id}")
        cex_ids.add(b.id)
        for f in ("base", "quote"):
            if getattr(b, f) not in symbols:
                fail(f"cex_books[{i}].{f}", f"unknown asset {getattr(b, f)}")
        if (b.base, b.quote) not in pairs:
            fail(f"cex_books[{i}]", f"no price process for {b.base}/{b.quote}")
    vids = set()
    for i, v in enumerate(s.validators):
        if v.id in vids:
            fail(f"validators[{i}].id", f"duplicate validator {v.id}")
        vids.add(v.id)
    q = s.quorum
    if q.threshold_den <= 0 or not (2 * q.threshold_num > q.threshold_den and q.threshold_num <= q.threshold_den):
        fail("quorum", "threshold must be in (1/2, 1]")
    for i, m in enumerate(s.mpc_policies):
        if m.chain not in chain_ids:
            fail(f"mpc_policies[{i}].chain", f"unknown chain {m.chain}")
        if m.t > len(set(m.signers)):
            fail(f"mpc_policies[{i}].t", "threshold exceeds signer count")
        if m.online is not None and not set(m.online) <= set(m.signers):
            fail(f"mpc_policies[{i}].online", "online signers must be a subset of signers")
    mpc_chains = {m.chain for m in s.mpc_policies}
    for c in s.chains:
        if c.no_smart_contracts and c.id not in mpc_chains:
            fail("mpc_policies", f"chain {c.id} has no smart contracts and needs an MPC policy")
    if s.vault is not None:
        for i, lp in enumerate(s.vault.lps):
            need_units(f"vault.lps[{i}].chain", lp.chain, s.vault.asset, lp.amount)
    agent_ids = set()
    for group in ("searchers", "takers"):
        for i, a in enumerate(getattr(s.agents, group)):
            if a.id in agent_ids:
                fail(f"agents.{group}[{i}].id", f"duplicate agent id {a.id}")
            agent_ids.add(a.id)
            holdings = a.capital if group == "searchers" else a.inventory
            for j, h in enumerate(holdings):
                need_units(f"agents.{group}[{i}].{'capital' if group == 'searchers' else 'inventory'}[{j}]",
                           h.chain, h.symbol, h.amount)
    if s.agents.background is not None:
        for j, h in enumerate(s.agents.background.inventory):
            need_units(f"agents.background.inventory[{j}]", h.chain, h.symbol, h.amount)
    for i, g in enumerate(s.fees.gas):
        need_units(f"fees.gas[{i}]", g.chain, s.fees.asset, g.amount)
    for i, r in enumerate(s.routes):
        pool = next((p for p in s.pools if p.id == r.pool), None)
        if pool is None:
            fail(f"routes[{i}].pool", f"unknown pool {r.pool}")
        book = next((b for b in s.cex_books if b.id == r.cex), None)
        if book is None:
            fail(f"routes[{i}].cex", f"unknown book {r.cex}")
        if (pool.asset_x, pool.asset_y) != (book.base, book.quote):
            fail(f"routes[{i}]", "pool pair must match the book's base/quote")
        need_asset(f"routes[{i}].taker_chain", r.taker_chain, pool.asset_y)
        need_asset(f"routes[{i}].taker_chain", r.taker_chain, s.fees.asset)
        if pool.asset_y != s.fees.asset:
            fail(f"routes[{i}]", f"pool quote asset must be the fee asset {s.fees.asset}")
        if r.hedge and book.hedge_liquidity <= 0:
            fail(f"routes[{i}].hedge", f"book {book.id} has no hedge_liquidity")
    for i, b in enumerate(s.cex_books):
        if b.hedge_liquidity > 0:
            for c in chain_ids:
                if (c, s.fees.asset) in assets:
                    need_units(f"cex_books[{i}].hedge_liquidity", c, s.fees.asset, b.hedge_liquidity)
    for i, it in enumerate(s.intents):
        need_units(f"intents[{i}].sell_asset", it.sell_chain, it.sell_asset, it.sell_amount)
        need_asset(f"intents[{i}].buy_asset", it.buy_chain, it.buy_asset)
        if it.deadline_tick <= it.submit_tick:
            fail(f"intents[{i}].deadline_tick", "deadline must be after submit_tick")
        if it.fill_policy == "fragmentable":
            if it.min_fragment is None:
                fail(f"intents[{i}].min_fragment", "required for fragmentable intents")
            need_units(f"intents[{i}].min_fragment", it.sell_chain, it.sell_asset, it.min_fragment)
    for i, m in enumerate(s.mints):
        need_units(f"mints[{i}]", m.chain, m.symbol, m.amount)


def _field_path(loc) -> str:
    out = ""
    for part in loc:
        if isinstance(part, int):
            out += f"[{part}]"
        else:
            out += ("." if out else "") + str(part)
    return out or "<root>"


def parse_scenario(text: str) -> Scenario:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(e.msg, line=e.lineno) from None
    if not isinstance(data, dict):
        raise ParseError("scenario must be a JSON object", field="<root>")
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ValidationError("schema_version", f"expected {SCHEMA_VERSION}, got {version!r}")
    try:
        return Scenario.model_validate(data)
    except pydantic.ValidationError as e:
        err = e.errors()[0]
        ctx = err.get("ctx") or {}
        inner = ctx.get("error")
        if isinstance(inner, _RefError):
            raise ValidationError(inner.field, str(inner).split(": ", 1)[1]) from None
        field = _field_path(err["loc"])
        msg = err["msg"]
        if err["type"] == "extra_forbidden":
            msg = "unknown field"
        raise ValidationError(field, msg) from None


def load_scenario(path: Union[str, Path]) -> Scenario:
    p = Path(path)
    try:
        text = p.read_text()
    except FileNotFoundError:
        raise ParseError(f"no such file: {p}", field="scenario") from None
    return parse_scenario(text)
