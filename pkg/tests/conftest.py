"""Prints one PASS/FAIL line per acceptance criterion at the end of the run."""

import re

import pytest

DETAILS: dict[int, str] = {}
_OUTCOMES: dict[int, str] = {}
_PATTERN = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_")


@pytest.fixture
def record():
    """``record(n, detail)`` attaches a one-line measurement to criterion ``n``."""
    def _record(n, detail):
        DETAILS[n] = detail
    return _record


def pytest_runtest_logreport(report):
    m = _PATTERN.search(report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    if report.when == "call" or report.outcome != "passed":
        if _OUTCOMES.get(n) != "FAIL":
            _OUTCOMES[n] = "PASS" if report.outcome == "passed" else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_OUTCOMES):
        detail = DETAILS.get(n, "")
        terminalreporter.write_line(f"criterion {n}: {_OUTCOMES[n]}" + (f"  {detail}" if detail else ""))
