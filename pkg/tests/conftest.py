from __future__ import annotations

import numpy as np
import pytest
from hypothesis import strategies as st

from dtrdiv.qcore import ActionSet, TabularQFunction


def tab(*rows, weights=None, labels=None) -> TabularQFunction:
    """Tabular Q-function with one grid point per row of q-values."""
    m = len(rows[0])
    actions = ActionSet(tuple(labels or range(1, m + 1)))
    n = len(rows)
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=float)
    return TabularQFunction(actions, np.arange(n, dtype=float)[:, None], w, np.asarray(rows, dtype=float))


def random_pair(rng: np.random.Generator, max_points: int = 5, max_m: int = 4):
    """Two tabular Q-functions on a shared random grid, log q uniform on [-3, 3]."""
    n = int(rng.integers(1, max_points + 1))
    m = int(rng.integers(2, max_m + 1))
    w = rng.dirichlet(np.ones(n))
    actions = ActionSet(tuple(range(1, m + 1)))
    x = np.arange(n, dtype=float)[:, None]
    q0 = TabularQFunction(actions, x, w, np.exp(rng.uniform(-3, 3, (n, m))))
    q1 = TabularQFunction(actions, x, w, np.exp(rng.uniform(-3, 3, (n, m))))
    return q0, q1


@st.composite
def tabular_pairs(draw, max_points: int = 5, max_m: int = 4):
    seed = draw(st.integers(0, 2**32 - 1))
    return random_pair(np.random.default_rng(seed), max_points, max_m)


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
