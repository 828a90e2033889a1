import os
import sys

import pytest

# oracles.py sits next to the tests and is imported as a plain module
sys.path.insert(0, os.path.dirname(__file__))


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running acceptance checks")


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(LINES):
            terminalreporter.write_line(LINES[number])


@pytest.fixture
def rng():
    import numpy as np

    return np.random.default_rng(12345)
