"""Shared test infrastructure.

The acceptance suite reports one pass/fail line per criterion.  Pytest's
default fd-level capture swallows writes even to sys.__stdout__, so the
lines are collected here and replayed through the terminal reporter after
capture has ended.
"""

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("-", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
