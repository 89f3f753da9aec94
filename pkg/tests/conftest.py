import re
from pathlib import Path

import pytest

from fluxlayer.ledger import Asset, Chain, Ledger

ROOT = Path(__file__).resolve().parent.parent
SCENARIOS = ROOT / "scenarios"

_criteria: dict[int, tuple[str, str]] = {}


def make_ledger(*, chains=((1, 12), (2, 12)), symbols=(("BTC", 8), ("USDT", 6))) -> Ledger:
    cs = [Chain(cid, f"c{cid}", interval, 64) for cid, interval in chains]
    return Ledger(cs, [(c.id, Asset(sym, dec)) for c in cs for sym, dec in symbols])


@pytest.fixture
def ledger() -> Ledger:
    return make_ledger()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    m = re.search(r"test_criterion_(\d+)_", report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    title = report.nodeid.split("::")[-1].split("_", 3)[-1].replace("_", " ")
    _criteria[n] = (report.outcome.upper(), title)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        outcome, title = _criteria[n]
        verdict = "PASS" if outcome == "PASSED" else "FAIL"
        terminalreporter.write_line(f"criterion {n}: {verdict}  {title}")
