"""Shared fixtures, plus the PASS/FAIL summary of the acceptance criteria."""

import re

import numpy as np
import pytest

ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def acceptance(request):
    """Call with (number, passed, detail) to log one criterion verdict."""
    def record(number, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}"
        request.config.stash[ACCEPTANCE].append(line)
        print(line)
    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(lines, key=lambda s: int(re.search(r"criterion (\d+)", s).group(1))):
        terminalreporter.write_line(line)
