import pytest

# (number, title, passed, detail) rows filled in by test_acceptance
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n, title, ok, detail in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(f"criterion {n} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
