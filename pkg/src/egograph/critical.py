"""Attention probe and transposed-deconvolution backtracking.

A probe (softmax attention over last-layer node embeddings followed by a
linear head) is trained on top of a frozen Ego-CNN. Its attention scores seed
a backward pass through the ego-convolution filters that lands on slot-level
scores of the input graph, from which node and edge importances are read.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autograd as ag
from .autograd import AdamState, Tensor
from .errors import StateError
from .graph import Dataset, Edge, Graph
from .io_utils import atomic_write_csv, atomic_write_text
from .layers import ego_index
from .model import Model, forward_graph
from .neighbors import PAD

MIN_WIDTH, MAX_WIDTH = 0.2, 4.0


@dataclass(eq=False)
class AttentionProbe:
    score_w: np.ndarray  # (D,)
    head_w: np.ndarray  # (D, C)
    head_b: np.ndarray  # (C,)

    def attention(self, h_last: np.ndarray) -> np.ndarray:
        s = h_last @ self.score_w
        e = np.exp(s - s.max())
        return e / e.sum()

    def logits(self, h_last: np.ndarray) -> np.ndarray:
        return self.attention(h_last) @ h_last @ self.head_w + self.head_b

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {"score_w": self.score_w, "head_w": self.head_w, "head_b": self.head_b}


def last_layer_embeddings(m: Model, graphs) -> list[np.ndarray]:
    """Eval-mode ``H^(L)`` per graph; also fills the model's activation cache."""
    out = []
    for g in graphs:
        forward_graph(m, g, train=False)
        out.append(m.activations[g].layers[-1])
    return out


def fit_attention_probe(m: Model, dataset: Dataset, epochs: int = 300, lr: float = 1e-2,
                        seed: int = 0) -> AttentionProbe:
    """Train attention + linear head with the Ego-CNN weights held fixed.

    Only the probe's own tensors are handed to the optimizer, and the model's
    layer outputs are computed once up front as constants.
    """
    embs = last_layer_embeddings(m, dataset.graphs)
    h = Tensor(np.concatenate(embs))
    seg = np.repeat(np.arange(len(embs)), [e.shape[0] for e in embs])
    labels = np.asarray(dataset.class_labels)
    d, c = h.shape[1], max(m.n_classes, dataset.num_classes)
    rng = np.random.default_rng([seed, 3])
    params = {
        "score_w": Tensor(np.zeros(d), True),
        "head_w": Tensor(rng.normal(0, 1 / np.sqrt(d), (d, c)), True),
        "head_b": Tensor(np.zeros(c), True),
    }
    state = AdamState(lr=lr)
    for _ in range(epochs):
        for p in params.values():
            p.zero_grad()
        gamma = ag.segment_softmax(ag.matvec(h, params["score_w"]), seg, len(embs))
        pooled = ag.weighted_segment_sum(h, gamma, seg, len(embs))
        logits = ag.add_bias(ag.matmul(pooled, params["head_w"]), params["head_b"])
        loss = ag.softmax_cross_entropy(logits, labels)
        loss.backward()
        ag.adam_update(params, state)
    return AttentionProbe(*(params[k].data.copy() for k in ("score_w", "head_w", "head_b")))


def select_important(gamma: np.ndarray, threshold: float | None = None) -> set[int]:
    gamma = np.asarray(gamma)
    if threshold is None:
        threshold = 1.0 / (2 * len(gamma))
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    return {int(n) for n in np.flatnonzero(gamma > threshold)}


@dataclass(eq=False)
class CriticalStructure:
    graph: Graph
    node_importance: np.ndarray
    edge_importance: dict[Edge, float]
    threshold: float | None
    slot_scores: np.ndarray  # signed reconstruction, linear in gamma
    slots: np.ndarray
    gamma: np.ndarray

    def important_nodes(self, rel_floor: float = 1e-6) -> set[int]:
        top = self.node_importance.max(initial=0.0)
        return {int(n) for n in np.flatnonzero(self.node_importance > rel_floor * top)} if top > 0 else set()


def backtrack(m: Model, g: Graph, gamma, threshold: float | None = None) -> CriticalStructure:
    """Push importance-scaled last-layer embeddings back to the input graph."""
    cache = m.activations.get(g)
    if cache is None:
        raise StateError("no cached activations for this graph; run forward_graph first")
    gamma = np.asarray(gamma, dtype=float)
    h_last = cache.layers[-1]
    if gamma.shape != (h_last.shape[0],):
        raise ValueError("gamma needs one entry per node")
    table = cache.prepared.table
    idx = ego_index(table)
    valid = idx != PAD
    h_hat = gamma[:, None] * h_last
    for layer in reversed(m.stack.layers):
        w = layer.filters.data  # (D_out, K+1, D_in)
        e_hat = np.einsum("nd,dri->nri", h_hat, w)
        h_prev = np.zeros((h_hat.shape[0], w.shape[2]))
        np.add.at(h_prev, idx[valid], e_hat[valid])
        h_hat = h_prev
    if m.front is None:
        scores, slots = h_hat, table.slots
    else:
        # Patchy-San front end: fold each reconstructed adjacency onto its slots.
        a_hat = np.einsum("nd,dij->nij", h_hat, m.front.filters.data)
        scores = a_hat.sum(axis=2) + a_hat.sum(axis=1)
        slots = cache.prepared.full_table.slots[:, : m.front.K_base]
    return _importances(g, scores, slots, gamma, threshold)


def _importances(g: Graph, scores: np.ndarray, slots: np.ndarray, gamma, threshold) -> CriticalStructure:
    mag = np.abs(scores)
    node_imp = np.zeros(g.node_count)
    edge_imp: dict[Edge, float] = {e: 0.0 for e in g.edges}
    for n in range(g.node_count):
        for k, nb in enumerate(slots[n]):
            if nb == PAD:
                continue
            nb = int(nb)
            v = float(mag[n, k])
            node_imp[n] += v
            node_imp[nb] += v
            edge_imp[(n, nb) if n < nb else (nb, n)] += v
    return CriticalStructure(g, node_imp, edge_imp, threshold, scores, slots, np.asarray(gamma))


def visualize(m: Model, probe: AttentionProbe, g: Graph, threshold: float | None = None) -> CriticalStructure:
    """Attention, thresholding and backtracking for one graph."""
    forward_graph(m, g, train=False)
    gamma = probe.attention(m.activations[g].layers[-1])
    thr = 1.0 / (2 * g.node_count) if threshold is None else threshold
    masked = np.where(gamma > thr, gamma, 0.0)
    cs = backtrack(m, g, masked, thr)
    cs.gamma = gamma
    return cs


def _scaled(values: np.ndarray) -> np.ndarray:
    top = float(values.max(initial=0.0))
    if top <= 0:
        return np.full(values.shape, MIN_WIDTH)
    rel = values / top
    out = MIN_WIDTH + (MAX_WIDTH - MIN_WIDTH) * rel
    return np.where(values < 1e-6 * top, MIN_WIDTH, out)


def to_dot(cs: CriticalStructure, label_names: Mapping[int, str] | None = None, name: str = "critical") -> str:
    g = cs.graph
    node_w = _scaled(cs.node_importance)
    edges = list(g.edges)
    edge_w = _scaled(np.array([cs.edge_importance.get(e, 0.0) for e in edges]))
    crit_nodes = node_w > MIN_WIDTH
    lines = [f"graph {name} {{", "  graph [overlap=false];",
             "  node [shape=circle, style=filled, fixedsize=true, fontsize=8];"]
    for n in range(g.node_count):
        lab = g.label(n) if g.node_labels is not None else n
        text = label_names.get(lab, str(lab)) if label_names else str(lab)
        color = "grey" if crit_nodes[n] else "white"
        lines.append(f'  {n} [label="{text}", width={node_w[n]:.4f}, fillcolor="{color}", '
                     f'importance="{cs.node_importance[n]:.6g}"];')
    for (u, v), w in zip(edges, edge_w):
        color = "grey" if w > MIN_WIDTH else "black"
        lines.append(f'  {u} -- {v} [penwidth={w:.4f}, color="{color}", '
                     f'importance="{cs.edge_importance[(u, v)]:.6g}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def export_dot(cs: CriticalStructure, path, label_names: Mapping[int, str] | None = None) -> Path:
    return atomic_write_text(Path(path), to_dot(cs, label_names))


def export_csv(cs: CriticalStructure, node_path, edge_path) -> tuple[Path, Path]:
    a = atomic_write_csv(Path(node_path), ["node", "importance"],
                         [(n, repr(float(v))) for n, v in enumerate(cs.node_importance)])
    b = atomic_write_csv(Path(edge_path), ["u", "v", "importance"],
                         [(u, v, repr(float(w))) for (u, v), w in sorted(cs.edge_importance.items())])
    return a, b
