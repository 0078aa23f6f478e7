from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from egograph.graph import Graph

REPO = Path(__file__).resolve().parents[1]
MUTAG_DIR = REPO / "data" / "MUTAG"


def cycle(n: int) -> Graph:
    return Graph.from_edges(n, [(i, (i + 1) % n) for i in range(n)])


def path(n: int) -> Graph:
    return Graph.from_edges(n, [(i, i + 1) for i in range(n - 1)])


def star(leaves: int) -> Graph:
    return Graph.from_edges(leaves + 1, [(0, i) for i in range(1, leaves + 1)])


def random_graph(rng: np.random.Generator, n: int, p: float, labels: int = 0) -> Graph:
    a = np.triu(rng.random((n, n)) < p, 1)
    u, v = np.nonzero(a)
    node_labels = rng.integers(0, labels, n).tolist() if labels else None
    return Graph.from_edges(n, zip(u.tolist(), v.tolist()), node_labels)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
