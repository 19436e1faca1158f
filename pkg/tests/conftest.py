import numpy as np
import pytest

from qsieve.oracle import StationaryLaw
from qsieve.recipes import benchmark, in_span, smooth

ACCEPTANCE_LINES = []


def record_acceptance(number, passed, detail):
    ACCEPTANCE_LINES.append((number, f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def bench():
    return benchmark()


@pytest.fixture(scope="session")
def bench_law(bench):
    return StationaryLaw(bench.mdp, bench.behavior)


@pytest.fixture(scope="session")
def smooth_recipe():
    return smooth()


@pytest.fixture(scope="session")
def span_recipe():
    return in_span(gamma=0.9, noise_sd=0.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
