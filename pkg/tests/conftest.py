from __future__ import annotations

from collections import defaultdict

import pytest
from hypothesis import settings

# unit-level property tests run small; acceptance tests set their own example counts
settings.register_profile("fast", max_examples=30, deadline=None)
settings.load_profile("fast")

# criterion number -> [(nodeid, outcome)]
_CRITERIA: dict[int, list[tuple[str, str]]] = defaultdict(list)
_NUMBER: dict[str, int] = {}

CRITERION_TITLES = {
    1: "yield-table reproduction",
    2: "forward-invariance property suite",
    3: "vectorization equivalence",
    4: "projection oracle equivalence",
    5: "minimal-deviation identity",
    6: "determinism",
    7: "commitment integrity",
    8: "crash-safe checkpointing",
    9: "halt-demo end-to-end",
    10: "termination-taxonomy regression",
    11: "fast-suite budget",
}


def pytest_collection_modifyitems(items):
    for item in items:
        marker = item.get_closest_marker("acceptance")
        if marker is not None:
            _NUMBER[item.nodeid] = int(marker.args[0])


def pytest_runtest_logreport(report):
    number = _NUMBER.get(report.nodeid)
    if number is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _CRITERIA[number].append((report.nodeid, "skipped" if report.skipped else report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        results = _CRITERIA[number]
        failed = [nodeid.split("::")[-1] for nodeid, outcome in results if outcome == "failed"]
        ran = [r for r in results if r[1] != "skipped"]
        if failed:
            verdict = "FAIL"
        elif not ran:
            verdict = "SKIP"
        else:
            verdict = "PASS"
        line = f"criterion {number:>2} {verdict}  {CRITERION_TITLES.get(number, '')} ({len(ran)} test(s))"
        if failed:
            line += "  failing: " + ", ".join(failed)
        terminalreporter.write_line(line)


@pytest.fixture
def rng():
    import numpy as np

    return np.random.default_rng(12345)
