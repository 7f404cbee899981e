"""Collects one PASS/FAIL line per acceptance criterion and prints them after the run."""
import pytest

RESULTS = {}


@pytest.fixture
def record():
    def _record(number, title, passed, detail=""):
        RESULTS[number] = (title, bool(passed), detail)
        return bool(passed)

    return _record


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        title, passed, detail = RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if passed else 'FAIL'}  {title}  {detail}")
