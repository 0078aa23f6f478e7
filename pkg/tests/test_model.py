from __future__ import annotations

import numpy as np
import pytest

from egograph import autograd as ag
from egograph.autograd import finite_diff_check
from egograph.errors import ConfigurationError, TrainingError
from egograph.graph import Dataset, Graph
from egograph.layers import receptive_field
from egograph.model import (ModelConfig, build_model, clone_model, closed_form_parameter_count,
                            cross_validate, dumps_model, forward_graph, graph_digest, load_model,
                            loads_model, save_model, stratified_folds, train)
from egograph.neighbors import wl_refine

from .conftest import path, random_graph


def small_cfg(**kw) -> ModelConfig:
    base = dict(K=3, L=2, D=4, dense_sizes=[6], dropout_rate=0.0, lr=1e-2, epochs=5, batch_size=4,
                patience=50, seed=0)
    base.update(kw)
    return ModelConfig(**base)


def toy_dataset(rng, n=20) -> Dataset:
    graphs, labels = [], []
    for i in range(n):
        y = i % 2
        size = int(rng.integers(5, 10))
        graphs.append(random_graph(rng, size, 0.6 if y else 0.2, labels=2))
        labels.append(y)
    return Dataset(graphs, labels, "TOY")


def test_full_scale_parameter_difference():
    five = ModelConfig(K=16, L=5, D=128)
    one = ModelConfig(K=16, L=1, D=128)
    diff = closed_form_parameter_count(five, 2, 20) - closed_form_parameter_count(one, 2, 20)
    assert diff == 4 * (17 * 128 * 128 + 128) == 1_114_624


@pytest.mark.parametrize("front", ["adjacency", "patchy_san"])
def test_closed_form_matches_enumeration(front):
    cfg = small_cfg(front_end=front, K_base=3, D_base=5, L=3, dense_sizes=[7, 5])
    m = build_model(cfg, 3, node_budget=6)
    assert m.parameter_count() == closed_form_parameter_count(cfg, 3, 6)


def test_tied_counts():
    kw = dict(front_end="patchy_san", K_base=4, D_base=8, D=8, K=4)
    tied5 = build_model(small_cfg(L=5, tied=True, **kw), 2, 5)
    one = build_model(small_cfg(L=1, **kw), 2, 5)
    untied5 = build_model(small_cfg(L=5, **kw), 2, 5)
    assert tied5.parameter_count() == one.parameter_count()
    assert untied5.parameter_count() - one.parameter_count() == 4 * (8 * 5 * 8 + 8)
    assert build_model(small_cfg(L=1, tied=True, **kw), 2, 5).parameter_count() == one.parameter_count()


def test_tied_requires_matching_width():
    with pytest.raises(ConfigurationError):
        build_model(small_cfg(tied=True), 2, 5)


def test_config_validation():
    for bad in (dict(K=0), dict(dropout_rate=1.0), dict(node_budget=0), dict(front_end="gcn")):
        with pytest.raises(ConfigurationError):
            small_cfg(**bad).validate()
    with pytest.raises(ConfigurationError):
        ModelConfig.from_dict({"model": {"K": 3, "bogus": 1}})


def test_config_from_nested_dict():
    cfg = ModelConfig.from_dict({"model": {"K": 4, "L": 2, "D": 8, "front_end": {"kind": "patchy_san", "K_base": 3,
                                                                                  "D_base": 8}},
                                 "training": {"lr": 0.01, "epochs": 3}, "seed": 9})
    assert (cfg.K, cfg.front_end, cfg.K_base, cfg.lr, cfg.seed) == (4, "patchy_san", 3, 0.01, 9)


def test_same_seed_same_init():
    a, b = build_model(small_cfg(), 2, 5), build_model(small_cfg(), 2, 5)
    for (ka, pa), (kb, pb) in zip(a.named_parameters().items(), b.named_parameters().items()):
        assert ka == kb and pa.data.tobytes() == pb.data.tobytes()


def test_empty_graph_is_argument_error():
    m = build_model(small_cfg(), 2, 3)
    with pytest.raises(ValueError):
        forward_graph(m, Graph.from_edges(0, []))


def test_zero_head_gives_uniform_logits(rng):
    m = build_model(small_cfg(head_init="zeros"), 3, 5)
    logits = forward_graph(m, random_graph(rng, 7, 0.4))
    assert np.all(logits == logits[0])


def test_logits_invariant_under_permutation(rng):
    found = 0
    for _ in range(40):
        g = random_graph(rng, 8, 0.4, labels=8)
        if wl_refine(g).num_colors() != 8:
            continue
        found += 1
        m = build_model(small_cfg(), 2, 6)
        h = g.relabel(rng.permutation(8))
        assert np.allclose(forward_graph(m, g), forward_graph(m, h), rtol=0, atol=1e-12)
    assert found >= 3


def test_locality_probe(rng):
    # a long path: with a small node budget, far nodes sit outside every kept receptive field
    g = path(30)
    cfg = small_cfg(L=2, K=2)
    m = build_model(cfg, 2, node_budget=3)
    base = forward_graph(m, g)
    prep = m.prepare(g)
    kept = prep.ranking[:3]
    reach = set().union(*(receptive_field(prep.table, int(n), cfg.L) for n in kept))
    outside = [n for n in range(30) if n not in reach]
    assert outside
    prep.front_input[outside] += 5.0
    assert np.array_equal(forward_graph(m, g), base)
    inside = int(kept[0])
    prep.front_input[inside] += 5.0
    assert not np.array_equal(forward_graph(m, g), base)


# Normalization makes some first-layer gradients ~1e-8, where central-difference
# roundoff alone reaches 1e-5 relative; the relu case therefore runs without it.
@pytest.mark.parametrize("activation,bn", [("tanh", True), ("relu", False)])
def test_end_to_end_gradient_check(rng, activation, bn):
    graphs = [random_graph(rng, int(rng.integers(6, 11)), 0.4) for _ in range(2)]
    cfg = small_cfg(L=2, K=3, D=4, dropout_rate=0.0, activation=activation, batch_norm=bn)
    m = build_model(cfg, 2, node_budget=6)
    # zero biases put all-zero ego rows exactly on the relu kink; move them off it
    for name, p in m.named_parameters().items():
        if name.endswith(".b"):
            p.data[:] = rng.uniform(0.1, 0.5, p.shape) * rng.choice([-1, 1], p.shape)
    labels = np.array([0, 1])

    def f():
        logits, _, _ = m.forward_batch(graphs, train=True)
        return ag.softmax_cross_entropy(logits, labels)

    assert finite_diff_check(f, list(m.named_parameters().values())) < 1e-5


def test_overfits_toy_set(rng):
    d = toy_dataset(rng)
    m = build_model(small_cfg(D=8, dense_sizes=[16], epochs=200), 2, node_budget=9)
    res = train(m, d)
    accs = [r["accuracy"] for r in res.curves if r["split"] == "train"]
    assert max(accs) == 1.0


def test_zero_learning_rate_freezes_parameters(rng):
    d = toy_dataset(rng, 8)
    m = build_model(small_cfg(lr=0.0, epochs=3), 2, node_budget=6)
    before = {k: v.data.copy() for k, v in m.named_parameters().items()}
    train(m, d)
    for k, v in m.named_parameters().items():
        assert np.array_equal(v.data, before[k])


def test_tied_and_untied_both_train(rng):
    d = toy_dataset(rng, 8)
    kw = dict(front_end="patchy_san", K_base=3, D_base=4, L=3, epochs=2)
    tied = train(build_model(small_cfg(tied=True, **kw), 2, 6), d).model
    untied = train(build_model(small_cfg(**kw), 2, 6), d).model
    assert tied.parameter_count() < untied.parameter_count()


def test_single_class_training_rejected(rng):
    d = Dataset([random_graph(rng, 5, 0.5) for _ in range(4)], [0, 0, 0, 0])
    with pytest.raises(ValueError):
        train(build_model(small_cfg(), 2, 4), d)


def test_divergence_raises_training_error(rng):
    d = toy_dataset(rng, 6)
    m = build_model(small_cfg(epochs=1), 2, 6)
    m.dense[-1][0].data[0, 0] = np.nan
    with pytest.raises(TrainingError) as info:
        train(m, d)
    assert info.value.diagnostics["epoch"] == 1


def test_ten_graph_cv_tests_one_graph_per_fold(rng):
    d = toy_dataset(rng, 10)
    with pytest.warns(UserWarning, match="missing"):
        folds = stratified_folds(d, 10)
    assert sorted(len(f) for f in folds) == [1] * 10
    with pytest.warns(UserWarning):
        report = cross_validate(small_cfg(epochs=1, valid_fraction=0.0), d, folds=10)
    assert len(report.fold_accuracies) == 10
    assert all(a in (0.0, 1.0) for a in report.fold_accuracies)


def test_folds_stratified_and_partition(rng):
    d = toy_dataset(rng, 40)
    folds = stratified_folds(d, 4, seed=3)
    assert sorted(np.concatenate(folds).tolist()) == list(range(40))
    for f in folds:
        assert sorted(d.class_labels[i] for i in f) == [0] * 5 + [1] * 5


def test_fold_assignment_ignores_dataset_order(rng):
    d = toy_dataset(rng, 30)
    perm = rng.permutation(30)
    shuffled = d.subset(perm)
    a = [sorted(graph_digest(d.graphs[i]) for i in f) for f in stratified_folds(d, 5, seed=1)]
    b = [sorted(graph_digest(shuffled.graphs[i]) for i in f) for f in stratified_folds(shuffled, 5, seed=1)]
    assert a == b


def test_fold_missing_class_warns(rng):
    d = Dataset([random_graph(rng, 4, 0.5) for _ in range(4)], [0, 0, 0, 1])
    with pytest.warns(UserWarning):
        stratified_folds(d, 2)


def test_cv_needs_enough_graphs(rng):
    with pytest.raises(ValueError):
        stratified_folds(toy_dataset(rng, 4), 10)


def test_cv_report_is_deterministic(rng):
    d = toy_dataset(rng, 12)
    cfg = small_cfg(epochs=3, dropout_rate=0.3)
    a = cross_validate(cfg, d, folds=3)
    b = cross_validate(cfg, d, folds=3)
    assert a.rows == b.rows
    assert a.fold_accuracies == b.fold_accuracies


@pytest.mark.parametrize("tied", [False, True])
def test_serialization_roundtrip(rng, tmp_path, tied):
    d = toy_dataset(rng, 8)
    cfg = small_cfg(front_end="patchy_san", K_base=3, D_base=4, tied=tied, epochs=2)
    m = train(build_model(cfg, 2, 6), d).model
    path_ = save_model(m, tmp_path / "m.bin")
    back = load_model(path_)
    assert dumps_model(back) == dumps_model(m)
    for g in d.graphs:
        assert np.array_equal(forward_graph(back, g), forward_graph(m, g))
    assert clone_model(m).parameter_count() == m.parameter_count()


def test_serialized_header_and_blocks(rng):
    m = build_model(small_cfg(), 2, 4)
    blob = dumps_model(m)
    assert blob[:8] == b"EGOCNN\x00\x01"
    with pytest.raises(ValueError):
        loads_model(b"NOTAMODEL" + blob[9:])
