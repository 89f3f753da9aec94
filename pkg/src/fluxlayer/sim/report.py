"""Metrics bundle and stable text formatting for run outputs."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from decimal import Decimal, localcontext
from fractions import Fraction
from typing import Any, Union

Number = Union[int, Fraction]

SERIES_COLUMNS = (
    "tick",
    "mev_cum",
    "settlements_finalized",
    "mean_latency",
    "utilization",
    "share_price",
    "slippage_mean_bps",
)


def fmt_rational(x: Number, places: int = 9) -> str:
    """Exact decimal rendering with ``places`` digits, ties to even."""
    q = Fraction(x) * 10**places
    n, d = q.numerator, q.denominator
    whole, rem = divmod(n, d)
    if 2 * rem > d or (2 * rem == d and whole % 2):
        whole += 1
    sign = "-" if whole < 0 else ""
    whole = abs(whole)
    s = str(whole).rjust(places + 1, "0")
    return f"{sign}{s[:-places]}.{s[-places:]}" if places else f"{sign}{s}"


def to_decimal(x: Number, prec: int = 50) -> Decimal:
    x = Fraction(x)
    with localcontext() as ctx:
        ctx.prec = prec
        return Decimal(x.numerator) / Decimal(x.denominator)


def dump_json(obj: Any, indent: int = 2) -> str:
    """JSON with sorted keys, fractions as fixed 9-place numeric literals."""

    def enc(o, depth):
        pad = " " * (indent * (depth + 1))
        end = " " * (indent * depth)
        if isinstance(o, dict):
            if not o:
                return "{}"
            items = [f'{pad}"{k}": {enc(o[k], depth + 1)}' for k in sorted(o)]
            return "{\n" + ",\n".join(items) + "\n" + end + "}"
        if isinstance(o, (list, tuple)):
            if not o:
                return "[]"
            return "[\n" + ",\n".join(pad + enc(v, depth + 1) for v in o) + "\n" + end + "]"
        if isinstance(o, bool):
            return "true" if o else "false"
        if o is None:
            return "null"
        if isinstance(o, int):
            return str(o)
        if isinstance(o, (Fraction, Decimal)):
            return fmt_rational(Fraction(o))
        if isinstance(o, str):
            return json.dumps(o)
        raise TypeError(f"cannot serialise {type(o).__name__}")

    return enc(obj, 0) + "\n"


@dataclass
class MetricsReport:
    """Everything one run measures. Money is in whole units of the fee asset."""

    mode: str = "fluxlayer"
    seed: int = 0
    horizon_ticks: int = 0
    mev_captured_total: Fraction = Fraction(0)
    realized_pnl_total: Fraction = Fraction(0)
    opportunities_detected: int = 0
    opportunities_submitted: int = 0
    opportunities_captured: int = 0
    opportunities_open_at_end: int = 0
    intents_submitted: int = 0
    settlements_finalized: int = 0
    settlements_refunded: int = 0
    settlements_pending_at_end: int = 0
    latency_mean: Fraction = Fraction(0)
    latency_median: Fraction = Fraction(0)
    latency_p95: int = 0
    total_fees_paid: Fraction = Fraction(0)
    slippage_mean_bps: Fraction = Fraction(0)
    fill_rate: Fraction = Fraction(0)
    fragments_per_order: Fraction = Fraction(0)
    lp_share_price: Fraction = Fraction(1)
    lp_apy: Fraction = Fraction(0)
    vault_utilization: Fraction = Fraction(0)
    vault_interest_earned: Fraction = Fraction(0)
    vault_losses: Fraction = Fraction(0)
    loans_opened: int = 0
    liquidations: int = 0
    maker_pnl: Fraction = Fraction(0)
    maker_roi: Fraction = Fraction(0)
    validators_slashed: int = 0
    series: list[tuple] = field(default_factory=list, repr=False)

    def summary(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "series"}

    def series_csv(self, mode_column: bool = False) -> str:
        head = (("mode",) if mode_column else ()) + SERIES_COLUMNS
        lines = [",".join(head)]
        for row in self.series:
            cells = [str(row[0])] + [
                str(v) if isinstance(v, int) else fmt_rational(v) for v in row[1:]
            ]
            if mode_column:
                cells.insert(0, self.mode)
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"


def latency_stats(latencies: list[int]) -> tuple[Fraction, Fraction, int]:
    if not latencies:
        return Fraction(0), Fraction(0), 0
    xs = sorted(latencies)
    n = len(xs)
    mean = Fraction(sum(xs), n)
    median = Fraction(xs[n // 2]) if n % 2 else Fraction(xs[n // 2 - 1] + xs[n // 2], 2)
    rank = -(-95 * n // 100)  # nearest rank
    return mean, median, xs[max(rank, 1) - 1]


def deltas(flux: MetricsReport, base: MetricsReport) -> dict:
    out = {
        "latency_mean_flux": flux.latency_mean,
        "latency_mean_baseline": base.latency_mean,
        "latency_reduction_ticks": base.latency_mean - flux.latency_mean,
        "latency_reduction_fraction": (
            1 - flux.latency_mean / base.latency_mean if base.latency_mean else Fraction(0)
        ),
        "mev_captured_delta": flux.mev_captured_total - base.mev_captured_total,
        "opportunities_captured_delta": flux.opportunities_captured - base.opportunities_captured,
        "intents_submitted_delta": flux.intents_submitted - base.intents_submitted,
        "fees_delta": flux.total_fees_paid - base.total_fees_paid,
        "settlements_finalized_delta": flux.settlements_finalized - base.settlements_finalized,
    }
    return out
