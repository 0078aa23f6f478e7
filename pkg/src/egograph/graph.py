"""Labeled undirected graphs, benchmark-format I/O and structural statistics.

The benchmark text layout is the one used by the public graph-kernel
collection (``<name>_A.txt``, ``<name>_graph_indicator.txt``, ...). Node ids
in those files are global and 1-indexed; every ``Graph`` built here uses
per-graph 0-indexed ids.
"""
from __future__ import annotations

import math
import os
from collections import Counter, deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DatasetConsistencyError, DatasetFormatError, InsufficientDataError

Edge = tuple[int, int]


def _edge_key(u: int, v: int) -> Edge:
    return (u, v) if u < v else (v, u)


@dataclass(frozen=True)
class Graph:
    """Immutable undirected graph.

    ``edges`` is a sorted tuple of ``(u, v)`` pairs with ``u < v``.
    ``node_labels`` and ``edge_weights`` are optional tuples aligned with the
    node ids and with ``edges`` respectively.
    """

    node_count: int
    edges: tuple[Edge, ...] = ()
    node_labels: tuple[int, ...] | None = None
    edge_weights: tuple[float, ...] | None = None
    _hash: int = field(init=False, repr=False, compare=False, default=0)

    def __post_init__(self):
        # graphs key per-model caches; hashing the edge tuple on every lookup is O(E)
        object.__setattr__(self, "_hash", hash((self.node_count, self.edges, self.node_labels, self.edge_weights)))
        if self.node_count < 0:
            raise ValueError("node_count must be non-negative")
        prev = None
        for u, v in self.edges:
            if not (0 <= u < v < self.node_count):
                raise ValueError(f"edge {(u, v)} is not a normalized pair of valid node ids")
            if prev is not None and (u, v) <= prev:
                raise ValueError("edges must be sorted and free of duplicates")
            prev = (u, v)
        if self.node_labels is not None and len(self.node_labels) != self.node_count:
            raise ValueError("node_labels length must equal node_count")
        if self.edge_weights is not None:
            if len(self.edge_weights) != len(self.edges):
                raise ValueError("edge_weights length must equal the number of edges")
            for w in self.edge_weights:
                if not (math.isfinite(w) and w > 0):
                    raise ValueError(f"edge weight {w!r} is not finite and positive")

    def __hash__(self) -> int:
        return self._hash

    @classmethod
    def from_edges(
        cls,
        node_count: int,
        edges: Iterable[Sequence[int]],
        node_labels: Sequence[int] | Mapping[int, int] | None = None,
        edge_weights: Sequence[float] | Mapping[Edge, float] | None = None,
        drop_self_loops: bool = False,
    ) -> "Graph":
        """Build a graph from arbitrary (possibly directed, duplicated) pairs.

        Reversed duplicates collapse onto one undirected edge; the first weight
        seen for an edge wins.
        """
        edges = [tuple(int(x) for x in e) for e in edges]
        if isinstance(edge_weights, Mapping):
            weight_seq = [edge_weights[e] if e in edge_weights else edge_weights[(e[1], e[0])] for e in edges]
        else:
            weight_seq = None if edge_weights is None else [float(w) for w in edge_weights]
            if weight_seq is not None and len(weight_seq) != len(edges):
                raise ValueError("edge_weights must align with edges")
        seen: dict[Edge, float] = {}
        for i, (u, v) in enumerate(edges):
            if u == v:
                if drop_self_loops:
                    continue
                raise ValueError(f"self-loop at node {u}")
            key = _edge_key(u, v)
            if key not in seen:
                seen[key] = 1.0 if weight_seq is None else weight_seq[i]
        keys = tuple(sorted(seen))
        weights = None if weight_seq is None else tuple(seen[k] for k in keys)
        if isinstance(node_labels, Mapping):
            labels = tuple(int(node_labels[n]) for n in range(node_count))
        else:
            labels = None if node_labels is None else tuple(int(x) for x in node_labels)
        return cls(node_count, keys, labels, weights)

    @cached_property
    def adjacency(self) -> tuple[tuple[int, ...], ...]:
        """Sorted neighbor list of every node."""
        adj: list[list[int]] = [[] for _ in range(self.node_count)]
        for u, v in self.edges:
            adj[u].append(v)
            adj[v].append(u)
        return tuple(tuple(sorted(a)) for a in adj)

    @cached_property
    def _weight_map(self) -> dict[Edge, float]:
        if self.edge_weights is None:
            return {}
        return dict(zip(self.edges, self.edge_weights))

    def neighbors(self, n: int) -> tuple[int, ...]:
        return self.adjacency[n]

    def degree(self, n: int) -> int:
        return len(self.adjacency[n])

    def weight(self, u: int, v: int) -> float:
        """Weight of edge ``u–v`` (1 for unweighted graphs)."""
        key = _edge_key(u, v)
        if self.edge_weights is None:
            if key not in self._edge_set:
                raise KeyError(key)
            return 1.0
        return self._weight_map[key]

    @cached_property
    def _edge_set(self) -> frozenset[Edge]:
        return frozenset(self.edges)

    def has_edge(self, u: int, v: int) -> bool:
        return _edge_key(u, v) in self._edge_set

    def label(self, n: int) -> int:
        return 0 if self.node_labels is None else self.node_labels[n]

    def relabel(self, perm: Sequence[int]) -> "Graph":
        """Return the graph with node ``i`` renamed to ``perm[i]``."""
        perm = [int(p) for p in perm]
        if sorted(perm) != list(range(self.node_count)):
            raise ValueError("perm must be a permutation of the node ids")
        labels = None
        if self.node_labels is not None:
            new = [0] * self.node_count
            for i, lab in enumerate(self.node_labels):
                new[perm[i]] = lab
            labels = new
        edges = [(perm[u], perm[v]) for u, v in self.edges]
        weights = None if self.edge_weights is None else list(self.edge_weights)
        return Graph.from_edges(self.node_count, edges, labels, weights)

    def adjacency_matrix(self) -> np.ndarray:
        a = np.zeros((self.node_count, self.node_count))
        for i, (u, v) in enumerate(self.edges):
            w = 1.0 if self.edge_weights is None else self.edge_weights[i]
            a[u, v] = a[v, u] = w
        return a


@dataclass(frozen=True)
class Dataset:
    graphs: list[Graph]
    class_labels: list[int]
    name: str = "dataset"

    def __post_init__(self):
        if len(self.graphs) != len(self.class_labels):
            raise ValueError("graphs and class_labels must have equal length")
        for c in self.class_labels:
            if c < 0:
                raise ValueError("class labels must be non-negative")

    def __len__(self) -> int:
        return len(self.graphs)

    @property
    def num_classes(self) -> int:
        return max(self.class_labels) + 1 if self.class_labels else 0

    def subset(self, indices: Iterable[int], name: str | None = None) -> "Dataset":
        idx = list(indices)
        return Dataset([self.graphs[i] for i in idx], [self.class_labels[i] for i in idx], name or self.name)


@dataclass(frozen=True)
class EgoNetwork:
    center: int
    radius: int
    member_nodes: frozenset[int]
    induced_edges: frozenset[Edge] = field(default_factory=frozenset)


def ego_network(g: Graph, n: int, l: int) -> EgoNetwork:
    """The ``l``-hop ball around ``n`` together with its induced edges."""
    if not 0 <= n < g.node_count:
        raise ValueError(f"node {n} out of range for graph with {g.node_count} nodes")
    if l < 0:
        raise ValueError("radius must be non-negative")
    dist = {n: 0}
    queue = deque([n])
    while queue:
        u = queue.popleft()
        if dist[u] == l:
            continue
        for v in g.neighbors(u):
            if v not in dist:
                dist[v] = dist[u] + 1
                queue.append(v)
    members = frozenset(dist)
    induced = frozenset(e for e in g.edges if e[0] in members and e[1] in members)
    return EgoNetwork(n, l, members, induced)


def degree_histogram(d: Dataset | Iterable[Graph]) -> dict[int, int]:
    graphs = d.graphs if isinstance(d, Dataset) else d
    counts: Counter[int] = Counter()
    for g in graphs:
        counts.update(len(a) for a in g.adjacency)
    return dict(sorted(counts.items()))


def power_law_fit(hist: Mapping[int, int]) -> tuple[float, float]:
    """Least-squares fit of ``log(count)`` against ``log(degree)``.

    Degree-0 and empty bins are skipped. Returns ``(exponent, r_squared)``
    where exponent is the negated slope.
    """
    pts = [(k, c) for k, c in hist.items() if k > 0 and c > 0]
    if len(pts) < 3:
        raise InsufficientDataError(f"power-law fit needs at least 3 distinct positive degrees, got {len(pts)}")
    x = np.log(np.array([p[0] for p in pts], dtype=float))
    y = np.log(np.array([p[1] for p in pts], dtype=float))
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - float(np.sum(resid**2)) / ss_tot
    return float(-slope), float(min(max(r2, 0.0), 1.0))


# -- benchmark text format ---------------------------------------------------


def _read_lines(path: Path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [ln.strip() for ln in fh if ln.strip()]


def _read_ints(path: Path) -> list[int]:
    out = []
    for i, ln in enumerate(_read_lines(path), 1):
        try:
            out.append(int(ln.split(",")[0]))
        except ValueError as exc:
            raise DatasetFormatError(f"{path.name}:{i}: expected an integer, got {ln!r}") from exc
    return out


def find_dataset_name(directory: str | os.PathLike) -> str:
    """Infer ``<name>`` from the single ``<name>_A.txt`` in ``directory``."""
    hits = sorted(p.name[: -len("_A.txt")] for p in Path(directory).glob("*_A.txt"))
    if len(hits) != 1:
        raise DatasetFormatError(f"expected exactly one *_A.txt in {directory}, found {len(hits)}")
    return hits[0]


def parse_benchmark_dataset(directory: str | os.PathLike, name: str | None = None) -> Dataset:
    directory = Path(directory)
    if name is None:
        name = find_dataset_name(directory)

    def part(suffix):
        return directory / f"{name}_{suffix}.txt"

    for suffix in ("A", "graph_indicator", "graph_labels"):
        if not part(suffix).is_file():
            raise DatasetFormatError(f"missing mandatory file {part(suffix)}")

    indicator = _read_ints(part("graph_indicator"))
    raw_labels = _read_ints(part("graph_labels"))
    n_graphs = len(raw_labels)
    if indicator and (min(indicator) < 1 or max(indicator) > n_graphs):
        raise DatasetConsistencyError("graph indicator references a graph without a label")

    local_id = [0] * len(indicator)
    sizes = [0] * n_graphs
    for node, gid in enumerate(indicator):
        local_id[node] = sizes[gid - 1]
        sizes[gid - 1] += 1

    node_labels = None
    if part("node_labels").is_file():
        node_labels = _read_ints(part("node_labels"))
        if len(node_labels) != len(indicator):
            raise DatasetConsistencyError("node_labels and graph_indicator lengths differ")

    edge_lines = _read_lines(part("A"))
    weights = None
    if part("edge_attributes").is_file():
        wl = _read_lines(part("edge_attributes"))
        if len(wl) != len(edge_lines):
            raise DatasetConsistencyError("edge_attributes and A lengths differ")
        try:
            weights = [float(w.split(",")[0]) for w in wl]
        except ValueError as exc:
            raise DatasetFormatError("malformed edge_attributes line") from exc

    per_graph_edges: list[list[Edge]] = [[] for _ in range(n_graphs)]
    per_graph_weights: list[list[float]] = [[] for _ in range(n_graphs)]
    for i, ln in enumerate(edge_lines):
        try:
            a, b = (int(x) for x in ln.split(","))
        except ValueError as exc:
            raise DatasetFormatError(f"{part('A').name}:{i + 1}: expected 'i, j', got {ln!r}") from exc
        if not (1 <= a <= len(indicator) and 1 <= b <= len(indicator)):
            raise DatasetConsistencyError(f"edge ({a}, {b}) references a node outside the indicator range")
        ga, gb = indicator[a - 1], indicator[b - 1]
        if ga != gb:
            raise DatasetConsistencyError(f"edge ({a}, {b}) connects graphs {ga} and {gb}")
        per_graph_edges[ga - 1].append((local_id[a - 1], local_id[b - 1]))
        if weights is not None:
            per_graph_weights[ga - 1].append(weights[i])

    per_graph_labels: list[list[int]] = [[] for _ in range(n_graphs)]
    if node_labels is not None:
        for node, gid in enumerate(indicator):
            per_graph_labels[gid - 1].append(node_labels[node])

    classes = {raw: i for i, raw in enumerate(sorted(set(raw_labels)))}
    graphs = [
        Graph.from_edges(
            sizes[g],
            per_graph_edges[g],
            per_graph_labels[g] if node_labels is not None else None,
            per_graph_weights[g] if weights is not None else None,
            drop_self_loops=True,
        )
        for g in range(n_graphs)
    ]
    return Dataset(graphs, [classes[r] for r in raw_labels], name)


def write_benchmark_dataset(d: Dataset, directory: str | os.PathLike, name: str | None = None) -> Path:
    """Write ``d`` in the benchmark layout; edges are emitted in both directions."""
    name = name or d.name
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    a_lines, w_lines, ind_lines, lab_lines = [], [], [], []
    weighted = any(g.edge_weights is not None for g in d.graphs)
    labeled = any(g.node_labels is not None for g in d.graphs)
    offset = 0
    for gi, g in enumerate(d.graphs, 1):
        ind_lines.extend([str(gi)] * g.node_count)
        if labeled:
            lab_lines.extend(str(g.label(n)) for n in range(g.node_count))
        for i, (u, v) in enumerate(g.edges):
            w = 1.0 if g.edge_weights is None else g.edge_weights[i]
            a_lines.append(f"{u + offset + 1}, {v + offset + 1}")
            a_lines.append(f"{v + offset + 1}, {u + offset + 1}")
            w_lines.extend([repr(w)] * 2)
        offset += g.node_count

    def dump(suffix, lines):
        (directory / f"{name}_{suffix}.txt").write_text("".join(ln + "\n" for ln in lines), encoding="utf-8")

    dump("A", a_lines)
    dump("graph_indicator", ind_lines)
    dump("graph_labels", [str(c) for c in d.class_labels])
    if labeled:
        dump("node_labels", lab_lines)
    if weighted:
        dump("edge_attributes", w_lines)
    return directory
