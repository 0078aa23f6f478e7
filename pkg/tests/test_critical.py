from __future__ import annotations

import numpy as np
import pydot
import pytest

from egograph.critical import (MAX_WIDTH, MIN_WIDTH, backtrack, export_csv, export_dot, fit_attention_probe,
                               select_important, to_dot, visualize)
from egograph.errors import StateError
from egograph.graph import Dataset, Graph
from egograph.layers import receptive_field
from egograph.model import ModelConfig, build_model, forward_graph

from .conftest import cycle, random_graph


def desk_model(L=2, front="adjacency", seed=0, **kw):
    cfg = ModelConfig(K=3, L=L, D=5, front_end=front, K_base=3, D_base=5, dense_sizes=[4], dropout_rate=0.0,
                      lr=1e-2, epochs=3, seed=seed, **kw)
    return build_model(cfg, 2, node_budget=5)


def _dot_attrs(text: str):
    (g,) = pydot.graph_from_dot_data(text)
    nodes = {n.get_name(): n.get_attributes() for n in g.get_nodes() if n.get_name() not in ("node", "graph")}
    edges = {(int(e.get_source()), int(e.get_destination())): e.get_attributes() for e in g.get_edges()}
    return nodes, edges


def test_probe_leaves_ego_stack_untouched(rng):
    m = desk_model()
    d = Dataset([random_graph(rng, 8, 0.4) for _ in range(6)], [0, 1] * 3)
    before = {k: v.data.tobytes() for k, v in m.named_parameters().items()}
    bn = [(s.mean.tobytes(), s.var.tobytes()) for s in m.stack.bn_states]
    probe = fit_attention_probe(m, d, epochs=20)
    assert {k: v.data.tobytes() for k, v in m.named_parameters().items()} == before
    assert [(s.mean.tobytes(), s.var.tobytes()) for s in m.stack.bn_states] == bn
    gamma = probe.attention(m.activations[d.graphs[0]].layers[-1])
    assert np.all(gamma >= 0) and abs(gamma.sum() - 1) < 1e-12


def test_singleton_attention_is_one(rng):
    m = desk_model()
    g = Graph.from_edges(1, [])
    d = Dataset([g, random_graph(rng, 5, 0.5)], [0, 1])
    probe = fit_attention_probe(m, d, epochs=5)
    assert probe.attention(m.activations[g].layers[-1]).tolist() == [1.0]


def test_select_important_cases():
    gamma = np.array([0.1, 0.6, 0.3])
    assert select_important(gamma, 0.6) == set()
    assert select_important(gamma, 0.0) == {0, 1, 2}
    assert select_important(np.full(7, 1 / 7)) == set(range(7))
    assert select_important(gamma) == {1, 2}  # default 1/6
    with pytest.raises(ValueError):
        select_important(gamma, -0.1)


def test_backtrack_needs_cached_activations(rng):
    m = desk_model()
    with pytest.raises(StateError):
        backtrack(m, random_graph(rng, 4, 0.5), np.ones(4) / 4)


def test_zero_gamma_gives_zero_importance(rng):
    m = desk_model()
    g = random_graph(rng, 9, 0.4)
    forward_graph(m, g)
    cs = backtrack(m, g, np.zeros(9))
    assert not cs.node_importance.any()
    assert not any(cs.edge_importance.values())


@pytest.mark.parametrize("front", ["adjacency", "patchy_san"])
def test_linearity_and_homogeneity(rng, front):
    m = desk_model(L=3, front=front)
    g = random_graph(rng, 12, 0.35)
    forward_graph(m, g)
    g1, g2 = rng.random(12), rng.random(12)
    a, b, ab = backtrack(m, g, g1), backtrack(m, g, g2), backtrack(m, g, g1 + g2)
    assert np.max(np.abs(ab.slot_scores - (a.slot_scores + b.slot_scores))) <= 1e-9
    c = backtrack(m, g, 2.5 * g1)
    assert np.allclose(c.slot_scores, 2.5 * a.slot_scores, rtol=0, atol=1e-12)
    # magnitudes are positively homogeneous
    assert np.allclose(c.node_importance, 2.5 * a.node_importance, rtol=1e-12, atol=0)


def test_single_layer_hand_unrolled(rng):
    g = Graph.from_edges(4, [(0, 1), (1, 2), (2, 3), (3, 0), (0, 2)])
    m = desk_model(L=1)
    forward_graph(m, g)
    h1 = m.activations[g].layers[-1]
    slots = m.activations[g].prepared.table.slots
    w = m.stack.layers[0].filters.data
    gamma = np.array([0.1, 0.4, 0.2, 0.3])
    expected = np.zeros((4, 3))
    for n in range(4):
        e_hat = np.zeros(w.shape[1:])
        for d in range(w.shape[0]):
            e_hat += gamma[n] * h1[n, d] * w[d]
        expected[n] += e_hat[0]
        for k in range(3):
            if slots[n, k] >= 0:
                expected[slots[n, k]] += e_hat[k + 1]
    cs = backtrack(m, g, gamma)
    assert np.allclose(cs.slot_scores, expected, rtol=0, atol=1e-14)
    edge = {e: 0.0 for e in g.edges}
    for n in range(4):
        for k in range(3):
            if slots[n, k] >= 0:
                nb = int(slots[n, k])
                edge[(min(n, nb), max(n, nb))] += abs(expected[n, k])
    for e, v in edge.items():
        assert cs.edge_importance[e] == pytest.approx(v, rel=1e-12)


def test_support_within_receptive_field(rng):
    m = desk_model(L=2)
    g = random_graph(rng, 25, 0.12)
    forward_graph(m, g)
    table = m.activations[g].prepared.table
    for n in range(0, 25, 3):
        gamma = np.zeros(25)
        gamma[n] = 1.0
        cs = backtrack(m, g, gamma)
        rows = set(np.flatnonzero(np.abs(cs.slot_scores).sum(axis=1)).tolist())
        assert rows <= receptive_field(table, n, 2)
        # a row's entries name edges to its slot neighbors, one hop further out
        assert set(np.flatnonzero(cs.node_importance).tolist()) <= receptive_field(table, n, 3)


def test_dot_is_parseable_and_scaled(rng):
    m = desk_model()
    g = random_graph(rng, 10, 0.4, labels=3)
    forward_graph(m, g)
    cs = backtrack(m, g, rng.random(10))
    nodes, edges = _dot_attrs(to_dot(cs, {0: "C", 1: "H", 2: "O"}))
    assert len(nodes) == 10 and len(edges) == len(g.edges)
    widths = [float(a["width"]) for a in nodes.values()]
    assert MIN_WIDTH <= min(widths) and max(widths) == pytest.approx(MAX_WIDTH)
    # edge ordering survives the round trip
    pens = {e: float(a["penwidth"]) for e, a in edges.items()}
    imp = cs.edge_importance
    for e1 in pens:
        for e2 in pens:
            if imp[e1] > imp[e2] * (1 + 1e-3):
                assert pens[e1] > pens[e2]


def test_all_zero_importance_is_minimal(rng):
    m = desk_model()
    g = cycle(5)
    forward_graph(m, g)
    nodes, edges = _dot_attrs(to_dot(backtrack(m, g, np.zeros(5))))
    assert {float(a["width"]) for a in nodes.values()} == {MIN_WIDTH}
    assert {float(a["penwidth"]) for a in edges.values()} == {MIN_WIDTH}


def test_dominant_edge_has_max_penwidth(rng):
    m = desk_model()
    g = cycle(3)
    forward_graph(m, g)
    cs = backtrack(m, g, np.ones(3) / 3)
    cs.edge_importance = {(0, 1): 10.0, (0, 2): 1.0, (1, 2): 1e-9}
    _, edges = _dot_attrs(to_dot(cs))
    pens = {e: float(a["penwidth"]) for e, a in edges.items()}
    assert pens[(0, 1)] == MAX_WIDTH > pens[(0, 2)] > pens[(1, 2)] == MIN_WIDTH


def test_visualize_high_threshold_is_all_minimal(rng):
    m = desk_model()
    d = Dataset([random_graph(rng, 8, 0.4) for _ in range(4)], [0, 1, 0, 1])
    probe = fit_attention_probe(m, d, epochs=5)
    cs = visualize(m, probe, d.graphs[0], threshold=1.0)
    nodes, _ = _dot_attrs(to_dot(cs))
    assert {float(a["width"]) for a in nodes.values()} == {MIN_WIDTH}
    assert cs.gamma.sum() == pytest.approx(1.0)


def test_exports(rng, tmp_path):
    m = desk_model()
    g = random_graph(rng, 6, 0.5)
    forward_graph(m, g)
    cs = backtrack(m, g, rng.random(6))
    p = export_dot(cs, tmp_path / "g.dot")
    assert pydot.graph_from_dot_file(str(p))
    nodes_csv, edges_csv = export_csv(cs, tmp_path / "n.csv", tmp_path / "e.csv")
    assert nodes_csv.read_text().splitlines()[0] == "node,importance"
    assert len(edges_csv.read_text().splitlines()) == len(g.edges) + 1
    blocker = tmp_path / "plain-file"
    blocker.write_text("")
    with pytest.raises(OSError):
        export_dot(cs, blocker / "g.dot")
