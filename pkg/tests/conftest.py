import numpy as np
import pytest

from rmkl import CovarianceGridMeasure, Grid, GridMeasure


def random_psd(grid: Grid, rng, k: int | None = None) -> CovarianceGridMeasure:
    """Well conditioned random covariance: G G^T / k with k >= n."""
    n = grid.n_nodes
    k = 2 * n if k is None else k
    G = rng.standard_normal((n, k))
    S = G @ G.T / k
    return CovarianceGridMeasure(grid, 0.5 * (S + S.T))


def random_measure(grid: Grid, rng) -> GridMeasure:
    return GridMeasure(grid, rng.standard_normal(grid.n_nodes))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def grid1():
    return Grid.regular(1, -5.0, 5.0, 32)


@pytest.fixture
def grid2():
    return Grid.regular(2, -3.0, 3.0, 8)


@pytest.fixture
def unit_grid():
    return Grid((0.0,), (1.0,), (64,))


# criterion number -> (passed, one-line summary), filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, line = ACCEPTANCE[k]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {k:>2}. {line}")
