"""Batch front-end: ``fluxlayer run --scenario s.json --mode paired --out r/``.

Exit codes: 0 success, 1 runtime failure, 2 bad flags or scenario.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields
from decimal import Decimal, localcontext
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence

from .sim.engine import paired_compare, run
from .sim.report import MetricsReport, dump_json, fmt_rational
from .sim.scenario import Scenario, ScenarioError, load_scenario

log = logging.getLogger("fluxlayer")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

# fields that identify a run rather than measure it
_NOT_AGGREGATED = {"mode", "seed", "horizon_ticks", "series"}


class ConfigError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fluxlayer", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run a scenario and write metrics")
    r.add_argument("--scenario", required=True, type=Path, help="scenario JSON file")
    r.add_argument("--mode", choices=("single", "paired", "sweep"), default="single")
    r.add_argument("--seeds", default=None,
                   help="sweep seeds: a count n (scenario seed + 0..n-1) or a comma list")
    r.add_argument("--out", required=True, type=Path, help="output directory")
    r.add_argument("--quiet", action="store_true", help="no summary on stdout")
    r.add_argument("--figures", action="store_true", help="also write PNG charts of the series")
    r.add_argument("--check-invariants", action="store_true",
                   help="assert conservation and vault identity after every tick (slow)")
    return parser


def parse_seeds(text: Optional[str], base_seed: int) -> list[int]:
    if text is None:
        raise ConfigError("--mode sweep needs --seeds")
    text = text.strip()
    try:
        if "," in text:
            seeds = [int(s) for s in text.split(",") if s.strip()]
        else:
            n = int(text)
            if n < 1:
                raise ConfigError("--seeds count must be >= 1")
            seeds = [base_seed + i for i in range(n)]
    except ValueError:
        raise ConfigError(f"--seeds must be a count or a comma-separated list, got {text!r}") from None
    if not seeds:
        raise ConfigError("--seeds list is empty")
    if any(s < 0 or s >= 2**64 for s in seeds):
        raise ConfigError("seeds must fit in an unsigned 64-bit integer")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("--seeds list has duplicates")
    return sorted(seeds)


def thread_cap(n_jobs: int) -> int:
    raw = os.environ.get("FLUXLAYER_THREADS")
    cap = os.cpu_count() or 1
    if raw:
        try:
            cap = int(raw)
        except ValueError:
            raise ConfigError(f"FLUXLAYER_THREADS must be an integer, got {raw!r}") from None
        if cap < 1:
            raise ConfigError("FLUXLAYER_THREADS must be >= 1")
    return max(1, min(cap, n_jobs))


def _stddev(values: list[Fraction], mean: Fraction) -> Fraction:
    if len(values) < 2:
        return Fraction(0)
    var = sum((v - mean) ** 2 for v in values) / (len(values) - 1)
    with localcontext() as ctx:
        ctx.prec = 40
        root = (Decimal(var.numerator) / Decimal(var.denominator)).sqrt()
    return Fraction(root)


def aggregate(reports: Sequence[MetricsReport]) -> dict:
    """Mean and sample standard deviation of every numeric metric."""
    out = {"runs": len(reports), "seeds": [r.seed for r in reports], "metrics": {}}
    for f in fields(MetricsReport):
        if f.name in _NOT_AGGREGATED:
            continue
        vals = [Fraction(getattr(r, f.name)) for r in reports]
        mean = sum(vals, Fraction(0)) / len(vals)
        out["metrics"][f.name] = {"mean": mean, "stddev": _stddev(vals, mean)}
    return out


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8", newline="\n")


def _print_summary(label: str, r: MetricsReport) -> None:
    print(f"[{label}] seed={r.seed} mode={r.mode} ticks={r.horizon_ticks}")
    print(f"  mev captured {fmt_rational(r.mev_captured_total, 2)}"
          f" over {r.opportunities_captured}/{r.opportunities_detected} opportunities")
    print(f"  settlements {r.settlements_finalized} finalized, {r.settlements_refunded} refunded,"
          f" latency mean {fmt_rational(r.latency_mean, 2)} p95 {r.latency_p95}")
    print(f"  fees {fmt_rational(r.total_fees_paid, 2)}, LP share price {fmt_rational(r.lp_share_price, 6)},"
          f" maker roi {fmt_rational(r.maker_roi, 4)}")


def cmd_run(args) -> int:
    scenario = load_scenario(args.scenario)
    out: Path = args.out
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"cannot create output directory {out}: {e}") from None
    if not os.access(out, os.W_OK):
        raise ConfigError(f"output directory {out} is not writable")
    if args.mode != "sweep" and args.seeds is not None:
        raise ConfigError("--seeds only applies to --mode sweep")
    debug = args.check_invariants

    if args.mode == "single":
        report = run(scenario, debug)
        _write(out / "summary.json", dump_json(report.summary()))
        _write(out / "series.csv", report.series_csv())
        if args.figures:
            from .sim.figures import render_series

            render_series([report], out / "series.png")
        if not args.quiet:
            _print_summary("single", report)
        return EXIT_OK

    if args.mode == "paired":
        flux, base, deltas = paired_compare(scenario, debug)
        _write(out / "summary.json", dump_json({"fluxlayer": flux.summary(), "baseline": base.summary()}))
        csv_flux = flux.series_csv(mode_column=True)
        csv_base = base.series_csv(mode_column=True)
        _write(out / "series.csv", csv_flux + csv_base.split("\n", 1)[1])
        _write(out / "deltas.json", dump_json(deltas))
        if args.figures:
            from .sim.figures import render_series

            render_series([flux, base], out / "series.png")
        if not args.quiet:
            _print_summary("fluxlayer", flux)
            _print_summary("baseline", base)
            print(f"  latency reduction {fmt_rational(deltas['latency_reduction_fraction'] * 100, 2)}%,"
                  f" extra mev {fmt_rational(deltas['mev_captured_delta'], 2)}")
        return EXIT_OK

    seeds = parse_seeds(args.seeds, scenario.seed)
    jobs = [scenario.with_overrides(seed=s) for s in seeds]
    with ThreadPoolExecutor(max_workers=thread_cap(len(jobs))) as pool:
        reports = list(pool.map(lambda sc: run(sc, debug), jobs))
    for r in reports:
        _write(out / f"summary_seed_{r.seed}.json", dump_json(r.summary()))
    agg = aggregate(reports)
    _write(out / "aggregate.json", dump_json(agg))
    if args.figures:
        from .sim.figures import render_series

        for r in reports:
            render_series([r], out / f"series_seed_{r.seed}.png")
    if not args.quiet:
        m = agg["metrics"]
        print(f"[sweep] {len(reports)} seeds: mev captured mean {fmt_rational(m['mev_captured_total']['mean'], 2)}"
              f" sd {fmt_rational(m['mev_captured_total']['stddev'], 2)}")
    return EXIT_OK


def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return cmd_run(args)
    except (ScenarioError, ConfigError) as e:
        print(f"fluxlayer: error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # any failure inside a run
        log.exception("run failed")
        print(f"fluxlayer: runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
