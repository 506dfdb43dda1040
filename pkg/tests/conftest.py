"""Shared pytest hooks.

The acceptance tests register one PASS/FAIL line each; printing them from
the terminal-summary hook keeps the report visible under pytest's output
capture (plain prints inside passing tests are swallowed).
"""

from __future__ import annotations

import sys


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "REPORT_LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
