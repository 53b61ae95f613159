import numpy as np
import pytest

from rmstbart.data import SurvivalDataset
from rmstbart.numerics import RngHandle


@pytest.fixture
def rng():
    return RngHandle(20240601)


def friedman_data(n=200, p=6, r=0.1, seed=0):
    g = np.random.default_rng(seed)
    X = g.random((n, p))
    f = 10 * np.sin(np.pi * X[:, 0] * X[:, 1]) + 20 * (X[:, 2] - 0.5) ** 2 + 10 * X[:, 3] + 5 * X[:, 4]
    T = g.gamma(f * (1 + f), 1 / (1 + f))
    C = g.gamma(3.2, 1 / r, size=n)
    return SurvivalDataset(np.minimum(T, C), (T <= C).astype(int), X)


@pytest.fixture
def small_data():
    return friedman_data()


ACCEPTANCE_LINES = []


@pytest.fixture
def report():
    """Record one PASS/FAIL line for the acceptance summary."""

    def emit(number, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
