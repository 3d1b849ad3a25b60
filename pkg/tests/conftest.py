import numpy as np
import pytest

from fedseg.rng import make_rng


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture
def f64_rng():
    return np.random.default_rng(7)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
