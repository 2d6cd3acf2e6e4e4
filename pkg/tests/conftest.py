import sys

import numpy as np
import pytest

from dfgr.oracle import random_encoder
from helpers import make_seq


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_encoder(rng):
    return random_encoder(rng, dim=8, heads=2, layers=2, residual=True)


@pytest.fixture
def seq_432():
    return make_seq((4, 3, 2), seed=5)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
