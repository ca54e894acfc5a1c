import json
from pathlib import Path

import pytest

DATA = Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def golden() -> dict:
    return json.loads((DATA / "golden_vectors.json").read_text())


_ACCEPTANCE_TITLES = {
    "test_ac1": "AC1 round-trip arithmetic vs measured medians",
    "test_ac2": "AC2 fallback bound and loss sweep",
    "test_ac3": "AC3 reassembly oracle equivalence",
    "test_ac4": "AC4 amplification safety under hostile flood",
    "test_ac5": "AC5 eviction policy at ttl +/- 1 ms",
    "test_ac6": "AC6 client state-machine exhaustiveness",
    "test_ac7": "AC7 wire/discovery codecs",
    "test_ac8": "AC8 real-socket loopback smoke",
}


def pytest_terminal_summary(terminalreporter):
    outcomes = {}
    for status in ("passed", "failed", "error", "skipped"):
        for report in terminalreporter.stats.get(status, []):
            nodeid = getattr(report, "nodeid", "")
            if "test_acceptance.py::" not in nodeid:
                continue
            name = nodeid.split("::")[-1].split("[")[0]
            key = name[:8]
            if key not in _ACCEPTANCE_TITLES:
                continue
            previous = outcomes.get(key, "passed")
            outcomes[key] = status if previous == "passed" else previous
    if not outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for key, title in _ACCEPTANCE_TITLES.items():
        if key in outcomes:
            mark = "PASS" if outcomes[key] == "passed" else outcomes[key].upper()
            terminalreporter.write_line(f"[{mark}] {title}")
