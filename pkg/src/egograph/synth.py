"""Generators for toy chemistry datasets and stochastic Kronecker graphs.

Atoms are encoded as node labels ``C=0``, ``H=1``, ``O=2``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import Dataset, Graph

C, H, O = 0, 1, 2
ATOM_LABELS = {"C": C, "H": H, "O": O}
VALENCE = {C: 4, O: 2, H: 1}

DEFAULT_KRONECKER_INITIATORS = (
    ((0.9, 0.5), (0.5, 0.1)),
    ((0.9, 0.45), (0.45, 0.2)),
)


@dataclass(frozen=True)
class CompoundSpec:
    carbon_count: int
    variant: str = "alkane"  # alkane | alcohol | isomer
    branch_position: int | None = None
    include_hydrogens: bool = True
    vertex_permutation_seed: int | None = 0

    def __post_init__(self):
        if self.carbon_count < 1:
            raise ValueError("carbon_count must be >= 1")
        if self.variant not in ("alkane", "alcohol", "isomer"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.variant == "isomer":
            if self.branch_position is None or not 1 <= self.branch_position <= self.carbon_count:
                raise ValueError("isomers need branch_position in 1..carbon_count")


def _finish(labels: list[int], edges: list[tuple[int, int]], spec: CompoundSpec) -> Graph:
    labels = list(labels)
    edges = list(edges)
    if spec.include_hydrogens:
        degree = [0] * len(labels)
        for u, v in edges:
            degree[u] += 1
            degree[v] += 1
        for atom in range(len(labels)):
            for _ in range(VALENCE[labels[atom]] - degree[atom]):
                labels.append(H)
                edges.append((atom, len(labels) - 1))
    g = Graph.from_edges(len(labels), edges, labels)
    if spec.vertex_permutation_seed is None:
        return g
    perm = np.random.default_rng(spec.vertex_permutation_seed).permutation(g.node_count)
    return g.relabel(perm)


def _chain(n: int) -> tuple[list[int], list[tuple[int, int]]]:
    return [C] * n, [(i, i + 1) for i in range(n - 1)]


def gen_alkane(spec: CompoundSpec) -> Graph:
    """Straight-chain CnH(2n+2)."""
    if spec.variant != "alkane":
        raise ValueError("gen_alkane needs variant='alkane'")
    labels, edges = _chain(spec.carbon_count)
    return _finish(labels, edges, spec)


def gen_alcohol(spec: CompoundSpec) -> Graph:
    """Primary alcohol CnH(2n+1)OH: the O sits on the first chain carbon."""
    if spec.variant != "alcohol":
        raise ValueError("gen_alcohol needs variant='alcohol'")
    labels, edges = _chain(spec.carbon_count)
    labels.append(O)
    edges.append((0, len(labels) - 1))
    return _finish(labels, edges, spec)


def gen_isomer(spec: CompoundSpec) -> Graph:
    """Main chain with a methyl branch on carbon ``branch_position`` (1-based)."""
    if spec.variant != "isomer":
        raise ValueError("gen_isomer needs variant='isomer'")
    labels, edges = _chain(spec.carbon_count)
    labels.append(C)
    edges.append((spec.branch_position - 1, len(labels) - 1))
    return _finish(labels, edges, spec)


def is_symmetric_isomer(carbon_count: int, branch_position: int) -> bool:
    return 2 * branch_position == carbon_count + 1


def gen_compound(spec: CompoundSpec) -> Graph:
    return {"alkane": gen_alkane, "alcohol": gen_alcohol, "isomer": gen_isomer}[spec.variant](spec)


def kronecker_probabilities(initiator, power: int) -> np.ndarray:
    theta = np.asarray(initiator, dtype=float)
    if theta.ndim != 2 or theta.shape[0] != theta.shape[1]:
        raise ValueError("initiator must be a square matrix")
    if np.any(theta < 0) or np.any(theta > 1):
        raise ValueError("initiator entries must lie in [0, 1]")
    if power < 1:
        raise ValueError("power must be >= 1")
    p = theta
    for _ in range(power - 1):
        p = np.kron(p, theta)
    return p


def gen_kronecker(initiator, power: int, seed: int = 0) -> Graph:
    """Stochastic Kronecker graph: each ordered pair (i, j) is an edge with
    probability equal to the Kronecker-power entry; the result is symmetrized
    and self-loops are dropped."""
    p = kronecker_probabilities(initiator, power)
    rng = np.random.default_rng(seed)
    hit = rng.random(p.shape) < p
    hit = hit | hit.T
    np.fill_diagonal(hit, False)
    u, v = np.nonzero(np.triu(hit, 1))
    return Graph.from_edges(p.shape[0], zip(u.tolist(), v.tolist()))


def _shuffled(graphs: list[Graph], labels: list[int], rng: np.random.Generator, name: str) -> Dataset:
    order = rng.permutation(len(graphs))
    return Dataset([graphs[i] for i in order], [labels[i] for i in order], name)


def build_alcohol_dataset(sizes=(6, 20), per_class: int = 200, seed: int = 0,
                          include_hydrogens: bool = True) -> Dataset:
    """Alkanes (class 0) vs primary alcohols (class 1)."""
    rng = np.random.default_rng([seed, 10])
    graphs, labels = [], []
    for label, variant in enumerate(("alkane", "alcohol")):
        for _ in range(per_class):
            n = int(rng.integers(sizes[0], sizes[1] + 1))
            spec = CompoundSpec(n, variant, include_hydrogens=include_hydrogens,
                                vertex_permutation_seed=int(rng.integers(2**31)))
            graphs.append(gen_compound(spec))
            labels.append(label)
    return _shuffled(graphs, labels, rng, "ALCOHOL")


def build_isomer_dataset(sizes=(9, 15), per_class: int = 200, seed: int = 0,
                         include_hydrogens: bool = True) -> Dataset:
    """Symmetric (class 0) vs asymmetric (class 1) methyl-branched chains.

    Only odd chain lengths have a central carbon, so both classes draw from
    the odd lengths in ``sizes``; asymmetric branches avoid the chain ends.
    """
    rng = np.random.default_rng([seed, 11])
    lengths = [n for n in range(sizes[0], sizes[1] + 1) if n % 2 == 1 and n >= 5]
    if not lengths:
        raise ValueError("isomer sizes must include an odd chain length >= 5")
    graphs, labels = [], []
    for label in (0, 1):
        for _ in range(per_class):
            n = int(rng.choice(lengths))
            center = (n + 1) // 2
            if label == 0:
                p = center
            else:
                choices = [q for q in range(2, n) if q != center]
                p = int(rng.choice(choices))
            spec = CompoundSpec(n, "isomer", p, include_hydrogens, int(rng.integers(2**31)))
            graphs.append(gen_isomer(spec))
            labels.append(label)
    return _shuffled(graphs, labels, rng, "ISOMER")


def build_compound_datasets(sizes=(6, 20), per_class: int = 200, seed: int = 0,
                            isomer_sizes=(9, 15), include_hydrogens: bool = True) -> tuple[Dataset, Dataset]:
    return (build_alcohol_dataset(sizes, per_class, seed, include_hydrogens),
            build_isomer_dataset(isomer_sizes, per_class, seed, include_hydrogens))


def size_generalization_split(d: Dataset, max_train_nodes: int) -> tuple[Dataset, Dataset]:
    """Split by graph size: train on graphs with at most ``max_train_nodes``
    nodes, test on the larger ones."""
    small = [i for i, g in enumerate(d.graphs) if g.node_count <= max_train_nodes]
    large = [i for i, g in enumerate(d.graphs) if g.node_count > max_train_nodes]
    return d.subset(small, f"{d.name}-train"), d.subset(large, f"{d.name}-test")


def build_kronecker_dataset(powers=(6, 8), per_class: int = 200, seed: int = 0,
                            initiators=DEFAULT_KRONECKER_INITIATORS) -> Dataset:
    """One class per initiator; sizes vary through the Kronecker power."""
    rng = np.random.default_rng([seed, 12])
    graphs, labels = [], []
    for label, theta in enumerate(initiators):
        for _ in range(per_class):
            k = int(rng.integers(powers[0], powers[1] + 1))
            graphs.append(gen_kronecker(theta, k, int(rng.integers(2**31))))
            labels.append(label)
    return _shuffled(graphs, labels, rng, "KRONECKER")
