import warnings

import numpy as np
import pytest

from bdq.lattice import LatticeSpec


@pytest.fixture
def spec8():
    return LatticeSpec(8, 1.0, 1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_configure(config):
    warnings.filterwarnings("ignore", message=".*acceptance.*", category=RuntimeWarning)


def pytest_terminal_summary(terminalreporter, config):
    from test_acceptance import ACCEPTANCE_KEY

    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
