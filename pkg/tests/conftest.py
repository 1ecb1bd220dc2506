import sys

import numpy as np
import pytest

from sparse3d.rng import Rng


@pytest.fixture
def rng():
    return Rng(1234)


def f64(t):
    return np.asarray(t.data, dtype=np.float64)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(lines):
        terminalreporter.write_line(lines[key])
