import numpy as np
import pytest

from unlearnkit.core import DatasetTable


def make_table(n, p, seed=0, kind="logistic", sep=1.0):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, size=n)
    X = rng.standard_normal((n, p)) + sep * (y[:, None] - 0.5)
    return DatasetTable.from_arrays(X, y)


def normal_equations(X, y, lam, shift=None):
    """Independent ridge oracle built from the augmented design matrix."""
    n, p = X.shape
    A = np.hstack([X, np.ones((n, 1))])
    reg = lam * np.diag(np.r_[np.ones(p), 0.0])
    rhs = A.T @ y / n
    if shift is not None:
        rhs = rhs - shift
    return np.linalg.solve(A.T @ A / n + reg, rhs)


def fd_gradient(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


@pytest.fixture
def table50():
    return make_table(50, 5, seed=1)


@pytest.fixture
def ridge200():
    return make_table(200, 5, seed=7)


# acceptance results, filled by tests/test_acceptance.py and echoed at the end of the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[key])
