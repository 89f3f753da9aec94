"""Multi-chain token ledger.

Every balance in the system lives here: trader wallets, AMM reserves, intent
escrow, settlement custody, vault cash. Amounts are integers in base units.
A cross-chain movement is never one transfer; it is two same-chain transfers
tied together by a settlement record.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Iterator

from .errors import (
    InsufficientBalance,
    InvalidAmount,
    UnknownAccount,
    UnknownAsset,
    UnknownChain,
    ZeroAmount,
)

__all__ = [
    "Asset",
    "Chain",
    "ChainClock",
    "Ledger",
    "Transfer",
    "advance_clock",
]


@dataclass(frozen=True)
class Chain:
    id: int
    name: str
    block_interval_ticks: int
    native_finality_blocks: int = 0
    no_smart_contracts: bool = False

    def __post_init__(self):
        if self.block_interval_ticks < 1:
            raise ValueError(f"chain {self.id}: block_interval_ticks must be >= 1")
        if self.native_finality_blocks < 0:
            raise ValueError(f"chain {self.id}: native_finality_blocks must be >= 0")

    @property
    def finality_ticks(self) -> int:
        return self.native_finality_blocks * self.block_interval_ticks


@dataclass(frozen=True)
class Asset:
    symbol: str
    decimals: int

    def __post_init__(self):
        if not 0 <= self.decimals <= 18:
            raise ValueError(f"{self.symbol}: decimals must be in [0, 18]")

    @property
    def unit(self) -> int:
        return 10**self.decimals


@dataclass
class Transfer:
    from_owner: str
    to_owner: str
    chain: int
    asset: str
    amount: int
    tick_submitted: int = 0
    status: str = "pending"


@dataclass(frozen=True)
class ChainClock:
    """Global tick plus the per-chain block schedule it implies.

    Heights are derived from the absolute tick, so advancing 6 then 6 lands
    on the same heights as advancing 12 once.
    """

    chains: tuple[Chain, ...]
    tick: int = 0

    @property
    def heights(self) -> dict[int, int]:
        return {c.id: self.tick // c.block_interval_ticks for c in self.chains}

    def height(self, chain_id: int) -> int:
        for c in self.chains:
            if c.id == chain_id:
                return self.tick // c.block_interval_ticks
        raise UnknownChain(chain_id)


def advance_clock(clock: ChainClock, ticks: int) -> ChainClock:
    if ticks < 0:
        raise ValueError("ticks must be >= 0")
    return ChainClock(clock.chains, clock.tick + ticks)


class Ledger:
    """Balances keyed by (owner, chain) then asset symbol.

    Debits never underflow: a transfer that would overdraw is rejected and
    leaves the ledger untouched. Destination accounts are opened on first
    credit; source accounts must already exist.
    """

    def __init__(self, chains=(), assets=()):
        self.chains: dict[int, Chain] = {}
        self.assets: dict[tuple[int, str], Asset] = {}
        self._balances: dict[tuple[str, int], dict[str, int]] = {}
        self._minted: dict[tuple[int, str], int] = {}
        self.transfers_applied = 0
        for c in chains:
            self.add_chain(c)
        for chain_id, asset in assets:
            self.add_asset(chain_id, asset)

    # -- registry -----------------------------------------------------------

    def add_chain(self, chain: Chain) -> None:
        if chain.id in self.chains:
            raise ValueError(f"duplicate chain id {chain.id}")
        self.chains[chain.id] = chain

    def add_asset(self, chain_id: int, asset: Asset) -> None:
        if chain_id not in self.chains:
            raise UnknownChain(chain_id)
        key = (chain_id, asset.symbol)
        if key in self.assets:
            raise ValueError(f"duplicate asset {asset.symbol} on chain {chain_id}")
        self.assets[key] = asset
        self._minted[key] = 0

    def asset(self, chain_id: int, symbol: str) -> Asset:
        try:
            return self.assets[(chain_id, symbol)]
        except KeyError:
            raise UnknownAsset(f"{symbol} on chain {chain_id}") from None

    def open_account(self, owner: str, chain_id: int) -> None:
        if chain_id not in self.chains:
            raise UnknownChain(chain_id)
        self._balances.setdefault((owner, chain_id), {})

    def has_account(self, owner: str, chain_id: int) -> bool:
        return (owner, chain_id) in self._balances

    # -- balances -----------------------------------------------------------

    def balance(self, owner: str, chain_id: int, symbol: str) -> int:
        self.asset(chain_id, symbol)
        return self._balances.get((owner, chain_id), {}).get(symbol, 0)

    def mint(self, owner: str, chain_id: int, symbol: str, amount: int) -> None:
        """Scenario-level issuance; the only way supply grows."""
        self.asset(chain_id, symbol)
        if amount < 0:
            raise InvalidAmount("mint amount must be >= 0")
        acct = self._balances.setdefault((owner, chain_id), {})
        acct[symbol] = acct.get(symbol, 0) + amount
        self._minted[(chain_id, symbol)] += amount

    def minted(self, chain_id: int, symbol: str) -> int:
        self.asset(chain_id, symbol)
        return self._minted[(chain_id, symbol)]

    def apply_transfer(self, transfer: Transfer) -> Transfer:
        try:
            self._check(transfer)
        except Exception:
            transfer.status = "rejected"
            raise
        src = self._balances[(transfer.from_owner, transfer.chain)]
        src[transfer.asset] -= transfer.amount
        dst = self._balances.setdefault((transfer.to_owner, transfer.chain), {})
        dst[transfer.asset] = dst.get(transfer.asset, 0) + transfer.amount
        transfer.status = "applied"
        self.transfers_applied += 1
        return transfer

    def _check(self, t: Transfer) -> None:
        if t.amount <= 0:
            raise ZeroAmount("transfer amount must be positive")
        self.asset(t.chain, t.asset)
        src = self._balances.get((t.from_owner, t.chain))
        if src is None:
            raise UnknownAccount(f"{t.from_owner} on chain {t.chain}")
        have = src.get(t.asset, 0)
        if have < t.amount:
            raise InsufficientBalance(
                f"{t.from_owner} holds {have} {t.asset} on chain {t.chain}, needs {t.amount}"
            )

    def transfer(self, frm: str, to: str, chain_id: int, symbol: str, amount: int, tick: int = 0) -> Transfer:
        return self.apply_transfer(Transfer(frm, to, chain_id, symbol, amount, tick))

    # -- conservation -------------------------------------------------------

    def holders(self, chain_id: int, symbol: str) -> Iterator[tuple[str, int]]:
        for (owner, cid), bal in self._balances.items():
            if cid == chain_id and bal.get(symbol, 0):
                yield owner, bal[symbol]

    def total_supply(self, chain_id: int, symbol: str) -> int:
        self.asset(chain_id, symbol)
        return sum(amount for _, amount in self.holders(chain_id, symbol))

    def accounts(self) -> Iterator[tuple[str, int, dict[str, int]]]:
        for (owner, cid), bal in self._balances.items():
            yield owner, cid, dict(bal)

    def check_invariants(self) -> None:
        """Raise AssertionError on a negative balance or a supply mismatch."""
        for (owner, cid), bal in self._balances.items():
            for sym, amt in bal.items():
                if amt < 0:
                    raise AssertionError(f"negative balance {owner}@{cid} {sym}={amt}")
        for (cid, sym), minted in self._minted.items():
            total = self.total_supply(cid, sym)
            if total != minted:
                raise AssertionError(f"supply drift {sym}@{cid}: {total} != minted {minted}")

    def copy(self) -> "Ledger":
        return copy.deepcopy(self)
