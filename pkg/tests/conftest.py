import numpy as np
import pytest

from graphbackdoor.graph import AttributedGraph


def random_graph(rng, n, p=0.3, d=4, C=3):
    edges = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < p]
    X = rng.normal(size=(n, d))
    y = rng.integers(0, C, size=n)
    return AttributedGraph.from_edges(n, edges, X, y, C)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_graph(rng):
    return random_graph(rng, 8, 0.4, 4, 3)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
