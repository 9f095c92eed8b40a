import os

import pytest

# one line per acceptance criterion, filled in by tests/test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_configure(config):
    os.environ.setdefault("GACTGAN_THREADS", "1")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
