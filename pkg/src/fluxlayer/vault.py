"""Under-collateralised leverage vault.

LPs deposit a single asset and receive shares. Makers post collateral and
borrow up to ``max_leverage`` times it; the loan lands in a per-position
account that only the protocol moves (intent escrow, AMM legs, repayment),
so borrowed funds never leave custody. Repaid interest raises the share
price; unrecovered shortfalls lower it.

The vault is omni-chain: it can hold its asset on several chains and takes
repayment wherever the position's proceeds ended up.

Accounting is exact. With ``cash`` the vault's balances and ``receivables``
the open principal plus accrued interest, ``shares * share_price`` equals
``cash + receivables`` after every operation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Iterable, Optional

from .errors import FluxError, InsufficientBalance, ZeroAmount
from .ledger import Ledger

BPS = 10_000


class LeverageExceeded(FluxError):
    pass


class InsufficientVaultLiquidity(FluxError):
    pass


class VaultIlliquid(FluxError):
    pass


class InsufficientShares(FluxError):
    pass


class Shortfall(FluxError):
    pass


class PositionHealthy(FluxError):
    pass


class PositionClosed(FluxError):
    pass


def _ceil(q: Fraction) -> int:
    return -((-q.numerator) // q.denominator)


@dataclass
class LoanPosition:
    id: int
    maker: str
    chain: int
    collateral: int
    principal: int
    opened_tick: int
    maintenance_margin_bps: int = 500
    state: str = "open"
    accrued_interest: Fraction = Fraction(0)
    value: Fraction = Fraction(0)
    repaid_amount: int = 0
    loss: int = 0

    @property
    def notional(self) -> int:
        return self.collateral + self.principal

    @property
    def leverage(self) -> Fraction:
        return Fraction(self.notional, self.collateral)

    @property
    def equity(self) -> Fraction:
        return self.value - self.principal - self.accrued_interest

    @property
    def equity_ratio(self) -> Fraction:
        return self.equity / self.notional


def compound_interest(principal: int, rate_bps: int, epochs: int) -> Fraction:
    return principal * (Fraction(BPS + rate_bps, BPS) ** epochs - 1)


class Vault:
    def __init__(
        self,
        asset: str,
        chains: Iterable[int],
        max_leverage: Fraction = Fraction(10),
        maintenance_margin_bps: int = 500,
        interest_rate_bps_per_epoch: int = 10,
        epoch_ticks: int = 10,
        profit_share_bps: int = 0,
    ):
        if Fraction(max_leverage) < 1:
            raise ValueError("max_leverage must be >= 1")
        if epoch_ticks <= 0:
            raise ValueError("epoch_ticks must be positive")
        self.asset = asset
        self.chains = sorted(set(chains))
        self.max_leverage = Fraction(max_leverage)
        self.maintenance_margin_bps = maintenance_margin_bps
        self.rate_bps = interest_rate_bps_per_epoch
        self.epoch_ticks = epoch_ticks
        self.profit_share_bps = profit_share_bps
        self.lp_shares: dict[str, Fraction] = {}
        self.share_price = Fraction(1)
        self.positions: dict[int, LoanPosition] = {}
        self.total_borrowed = 0
        self.interest_earned = 0
        self.losses = 0
        self._next_id = 1

    @property
    def account(self) -> str:
        return f"vault:{self.asset}"

    @staticmethod
    def loan_account(position_id: int) -> str:
        return f"loan:{position_id}"

    # -- derived state ------------------------------------------------------

    def cash(self, ledger: Ledger, chain: Optional[int] = None) -> int:
        chains = self.chains if chain is None else [chain]
        return sum(ledger.balance(self.account, c, self.asset) for c in chains)

    def total_deposits(self, ledger: Ledger) -> int:
        return self.cash(ledger) + self.total_borrowed

    def utilization(self, ledger: Ledger) -> Fraction:
        deposits = self.total_deposits(ledger)
        return Fraction(self.total_borrowed, deposits) if deposits else Fraction(0)

    def receivables(self) -> Fraction:
        return sum(
            (p.principal + p.accrued_interest for p in self.positions.values() if p.state == "open"),
            Fraction(0),
        )

    def equity(self, ledger: Ledger) -> Fraction:
        return self.cash(ledger) + self.receivables()

    @property
    def total_shares(self) -> Fraction:
        return sum(self.lp_shares.values(), Fraction(0))

    def check_identity(self, ledger: Ledger) -> None:
        eq = self.equity(ledger)
        if self.total_shares * self.share_price != eq:
            raise AssertionError(f"share identity broken: {self.total_shares}*{self.share_price} != {eq}")
        if self.total_borrowed != sum(p.principal for p in self.positions.values() if p.state == "open"):
            raise AssertionError("total_borrowed drifted from open principal")
        for p in self.positions.values():
            if p.state == "open" and p.leverage > self.max_leverage:
                raise AssertionError(f"position {p.id} over max leverage")

    def _reprice(self, ledger: Ledger) -> None:
        shares = self.total_shares
        if shares:
            self.share_price = self.equity(ledger) / shares

    def _open(self, position_id: int) -> LoanPosition:
        p = self.positions[position_id]
        if p.state != "open":
            raise PositionClosed(f"position {position_id} is {p.state}")
        return p

    # -- LP side ------------------------------------------------------------

    def deposit(self, ledger: Ledger, lp: str, chain: int, amount: int, now: int = 0) -> Fraction:
        if amount <= 0:
            raise ZeroAmount("deposit must be positive")
        if chain not in self.chains:
            raise ValueError(f"vault does not operate on chain {chain}")
        ledger.transfer(lp, self.account, chain, self.asset, amount, now)
        minted = amount / self.share_price
        self.lp_shares[lp] = self.lp_shares.get(lp, Fraction(0)) + minted
        return minted

    def withdraw(self, ledger: Ledger, lp: str, chain: int, shares: Fraction, now: int = 0) -> int:
        shares = Fraction(shares)
        held = self.lp_shares.get(lp, Fraction(0))
        if shares <= 0 or shares > held:
            raise InsufficientShares(f"{lp} holds {held} shares, asked {shares}")
        last = shares == self.total_shares
        payout = math.floor(shares * self.share_price)
        if last:
            eq = self.equity(ledger)
            if eq != self.cash(ledger, chain):
                raise VaultIlliquid("final withdrawal needs every receivable settled on one chain")
            payout = int(eq)
        if payout > self.cash(ledger, chain):
            raise VaultIlliquid(f"vault holds {self.cash(ledger, chain)} on chain {chain}, owes {payout}")
        if payout:
            ledger.transfer(self.account, lp, chain, self.asset, payout, now)
        self.lp_shares[lp] = held - shares
        if not self.lp_shares[lp]:
            del self.lp_shares[lp]
        if last:
            self.share_price = Fraction(1)
        else:
            self._reprice(ledger)
        return payout

    # -- borrower side ------------------------------------------------------

    def borrow(
        self, ledger: Ledger, maker: str, chain: int, collateral: int, principal: int, now: int = 0
    ) -> LoanPosition:
        if collateral <= 0:
            raise ZeroAmount("collateral must be positive")
        if principal < 0:
            raise ValueError("principal must be >= 0")
        lev = Fraction(collateral + principal, collateral)
        if lev > self.max_leverage:
            raise LeverageExceeded(f"leverage {lev} > {self.max_leverage}")
        if Fraction(collateral, collateral + principal) * BPS < self.maintenance_margin_bps:
            raise LeverageExceeded("opening equity below maintenance margin")
        if principal > self.cash(ledger, chain):
            raise InsufficientVaultLiquidity(f"vault holds {self.cash(ledger, chain)} on chain {chain}")
        if ledger.balance(maker, chain, self.asset) < collateral:
            raise InsufficientBalance(f"{maker} cannot post {collateral} collateral")
        pid = self._next_id
        self._next_id += 1
        acct = self.loan_account(pid)
        ledger.transfer(maker, acct, chain, self.asset, collateral, now)
        if principal:
            ledger.transfer(self.account, acct, chain, self.asset, principal, now)
        pos = LoanPosition(pid, maker, chain, collateral, principal, now, self.maintenance_margin_bps,
                           value=Fraction(collateral + principal))
        self.positions[pid] = pos
        self.total_borrowed += principal
        return pos

    def epochs_elapsed(self, position: LoanPosition, now: int) -> int:
        return (now - position.opened_tick) // self.epoch_ticks

    def interest_due(self, position: LoanPosition, now: int) -> int:
        """Interest owed on repayment: whole epochs rounded up, at least one."""
        elapsed = now - position.opened_tick
        epochs = max(1, -(-elapsed // self.epoch_ticks))
        return _ceil(compound_interest(position.principal, self.rate_bps, epochs))

    def holdings(self, ledger: Ledger, position: LoanPosition) -> int:
        acct = self.loan_account(position.id)
        return sum(ledger.balance(acct, c, self.asset) for c in ledger.chains if (c, self.asset) in ledger.assets)

    def mark_and_accrue(
        self,
        ledger: Ledger,
        now: int,
        valuation: Optional[Callable[[LoanPosition], Fraction]] = None,
    ) -> Fraction:
        """Accrue whole-epoch interest, revalue open positions, reprice shares.

        ``valuation`` maps a position to the current value of everything it
        holds (in the vault asset); by default only the loan account's own
        vault-asset balance counts.
        """
        for p in self.positions.values():
            if p.state != "open":
                continue
            p.accrued_interest = compound_interest(p.principal, self.rate_bps, self.epochs_elapsed(p, now))
            p.value = Fraction(valuation(p)) if valuation else Fraction(self.holdings(ledger, p))
        self._reprice(ledger)
        return self.share_price

    def unhealthy(self) -> list[LoanPosition]:
        return [
            p for p in self.positions.values()
            if p.state == "open" and p.equity_ratio * BPS < p.maintenance_margin_bps
        ]

    def _chain_order(self, ledger: Ledger, position: LoanPosition) -> list[int]:
        chains = [c for c in sorted(ledger.chains) if (c, self.asset) in ledger.assets]
        return sorted(chains, key=lambda c: c != position.chain)

    def _collect(self, ledger: Ledger, position: LoanPosition, amount: int, now: int) -> int:
        acct = self.loan_account(position.id)
        got = 0
        for c in self._chain_order(ledger, position):
            if got == amount:
                break
            take = min(ledger.balance(acct, c, self.asset), amount - got)
            if take:
                if c not in self.chains:
                    self.chains = sorted(self.chains + [c])
                ledger.transfer(acct, self.account, c, self.asset, take, now)
                got += take
        return got

    def _release_residual(self, ledger: Ledger, position: LoanPosition, now: int) -> dict[int, int]:
        acct = self.loan_account(position.id)
        out = {}
        for c in self._chain_order(ledger, position):
            left = ledger.balance(acct, c, self.asset)
            if left:
                ledger.transfer(acct, position.maker, c, self.asset, left, now)
                out[c] = left
        return out

    def amount_due(self, ledger: Ledger, position: LoanPosition, now: int) -> int:
        due = position.principal + self.interest_due(position, now)
        pnl = self.holdings(ledger, position) - position.notional
        if self.profit_share_bps and pnl > 0:
            due += pnl * self.profit_share_bps // BPS
        return due

    def repay(self, ledger: Ledger, position_id: int, now: int) -> dict[int, int]:
        """Pull principal plus interest from the loan account; the rest goes to the maker.

        Returns the maker's residual per chain. Raises Shortfall, leaving
        everything untouched, when the loan account cannot cover the debt.
        """
        p = self._open(position_id)
        due = self.amount_due(ledger, p, now)
        have = self.holdings(ledger, p)
        if have < due:
            raise Shortfall(f"position {p.id} holds {have}, owes {due}")
        self._collect(ledger, p, due, now)
        residual = self._release_residual(ledger, p, now)
        p.state = "repaid"
        p.repaid_amount = due
        p.accrued_interest = Fraction(0)
        self.total_borrowed -= p.principal
        self.interest_earned += due - p.principal
        self._reprice(ledger)
        return residual

    def liquidate(self, ledger: Ledger, position_id: int, now: int, force: bool = False) -> int:
        """Seize the loan account toward the debt; returns the loss the LPs absorb.

        Without ``force`` the position must be below maintenance margin on
        its last mark (strictly). ``force`` is the shortfall-on-repay path.
        """
        p = self._open(position_id)
        if not force and p.equity_ratio * BPS >= p.maintenance_margin_bps:
            raise PositionHealthy(f"position {p.id} equity ratio {p.equity_ratio}")
        due = p.principal + self.interest_due(p, now)
        got = self._collect(ledger, p, min(due, self.holdings(ledger, p)), now)
        self._release_residual(ledger, p, now)
        loss = due - got
        p.state = "liquidated"
        p.repaid_amount = got
        p.loss = max(0, p.principal - got)
        p.accrued_interest = Fraction(0)
        self.total_borrowed -= p.principal
        self.losses += p.loss
        self.interest_earned += max(0, got - p.principal)
        self._reprice(ledger)
        return max(0, loss)
