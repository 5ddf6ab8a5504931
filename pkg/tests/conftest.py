import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from radiomap.grid import GridSpec


def pytest_configure(config):
    # single-threaded BLAS keeps float results bit-stable across runs
    threadpool_limits(limits=1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def grid4():
    return GridSpec(4, 4, 1.0, 1.0)


@pytest.fixture
def grid32():
    return GridSpec.square(100.0, 32)


# acceptance criteria report one line each; printed after the run
ACCEPTANCE_RESULTS: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        passed, detail = ACCEPTANCE_RESULTS[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
