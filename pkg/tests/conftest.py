"""Shared pytest hooks: the acceptance suite's per-criterion summary."""
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

# criterion label -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def record(label: str, passed: bool, detail: str) -> None:
    ACCEPTANCE[label] = (bool(passed), detail)
    print(f"criterion {label}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker and report.when == "call" and report.failed and marker.args[0] not in ACCEPTANCE:
        record(marker.args[0], False, f"error: {call.excinfo.typename}: {str(call.excinfo.value)[:160]}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(ACCEPTANCE, key=lambda s: (int(s.rstrip("abc")), s)):
        passed, detail = ACCEPTANCE[label]
        terminalreporter.write_line(f"criterion {label:>3}: {'PASS' if passed else 'FAIL'}  {detail}")
