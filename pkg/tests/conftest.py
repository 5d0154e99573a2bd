"""Collects the acceptance verdicts and prints them after the run."""

import pytest

ACCEPTANCE = {}


@pytest.fixture
def verdict():
    """``verdict(n, ok, detail)`` records and prints one criterion line."""

    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])
