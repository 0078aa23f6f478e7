"""1-WL color refinement and rare-neighbor selection.

Each node keeps up to K adjacent neighbors, preferring neighbors whose final
WL color is rare in the graph. The resulting table is fixed for the whole
network: every ego-convolution layer reads the same slots.
"""
from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .graph import Graph

PAD = -1


@dataclass(frozen=True, eq=False)
class WLColoring:
    """Per-iteration canonical colors; ``colors[0]`` comes from node labels.

    Color ids follow the sorted order of a content digest of each node's
    refinement signature, so they do not depend on node numbering.
    """

    colors: tuple[tuple[int, ...], ...]
    color_frequencies: dict[int, int]

    @property
    def final(self) -> tuple[int, ...]:
        return self.colors[-1]

    def num_colors(self, iteration: int = -1) -> int:
        return len(set(self.colors[iteration]))


def _digest(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=8).digest()


def _canonical(digests: list[bytes]) -> tuple[int, ...]:
    order = {d: i for i, d in enumerate(sorted(set(digests)))}
    return tuple(order[d] for d in digests)


def wl_refine(g: Graph, iterations: int = 2) -> WLColoring:
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    digests = [_digest(b"label:%d" % g.label(n)) for n in range(g.node_count)]
    colors = [_canonical(digests)]
    for _ in range(iterations):
        digests = [
            _digest(digests[n] + b"|" + b"".join(sorted(digests[m] for m in g.neighbors(n))))
            for n in range(g.node_count)
        ]
        colors.append(_canonical(digests))
    return WLColoring(tuple(colors), dict(Counter(colors[-1])))


@dataclass(frozen=True, eq=False)
class NeighborTable:
    """``slots[n, k]`` is node n's k-th selected neighbor, or ``PAD``."""

    K: int
    slots: np.ndarray

    @property
    def pad_mask(self) -> np.ndarray:
        return self.slots == PAD

    @property
    def node_count(self) -> int:
        return self.slots.shape[0]

    def neighbors_of(self, n: int) -> list[int]:
        return [int(m) for m in self.slots[n] if m != PAD]

    def truncated(self, k: int) -> "NeighborTable":
        return NeighborTable(k, self.slots[:, :k].copy())


def _neighbor_key(g: Graph, coloring: WLColoring, n: int, m: int):
    c = coloring.final[m]
    return (coloring.color_frequencies[c], -g.weight(n, m), c, m)


def select_neighbors(g: Graph, K: int, coloring: WLColoring | None = None) -> NeighborTable:
    """Rank each node's neighbors and keep the first K.

    Order: rarer final color first, then heavier edge, then canonical color
    id, then node id.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if coloring is None:
        coloring = wl_refine(g)
    slots = np.full((g.node_count, K), PAD, dtype=np.int64)
    for n in range(g.node_count):
        ranked = sorted(g.neighbors(n), key=lambda m: _neighbor_key(g, coloring, n, m))
        for k, m in enumerate(ranked[:K]):
            slots[n, k] = m
    return NeighborTable(K, slots)


def initial_embedding(g: Graph, t: NeighborTable) -> np.ndarray:
    """Adjacency vector H0 (N x K): edge weight to each slot, 0 at PAD."""
    h0 = np.zeros((g.node_count, t.K))
    for n in range(g.node_count):
        for k, m in enumerate(t.slots[n]):
            if m != PAD:
                h0[n, k] = g.weight(n, int(m))
    return h0


def node_ranking(g: Graph, coloring: WLColoring) -> list[int]:
    """Global node order: rare colors first, then canonical color, then id."""
    c = coloring.final
    return sorted(range(g.node_count), key=lambda n: (coloring.color_frequencies[c[n]], c[n], n))
