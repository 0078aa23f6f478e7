"""Full Ego-CNN: front end, ego stack, dense task head, training and CV."""
from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import struct
import time
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autograd as ag
from .autograd import AdamState, BatchNormState, Tensor
from .errors import ConfigurationError, TrainingError
from .graph import Dataset, Graph
from .io_utils import atomic_write_bytes
from .layers import (EgoStack, PatchySanLayer, patchy_san_adjacency, patchy_san_apply,
                     stack_forward)
from .neighbors import PAD, NeighborTable, initial_embedding, node_ranking, select_neighbors, wl_refine

log = logging.getLogger(__name__)

FRONT_ENDS = ("adjacency", "patchy_san")


@dataclass
class ModelConfig:
    K: int = 16
    L: int = 5
    D: int = 128
    front_end: str = "adjacency"
    K_base: int = 10
    D_base: int = 128
    tied: bool = False
    node_budget: int | None = None
    dense_sizes: list[int] = field(default_factory=lambda: [128])
    dropout_rate: float = 0.5
    lr: float = 1e-4
    epochs: int = 300
    batch_size: int = 32
    seed: int = 0
    patience: int = 30
    activation: str = "relu"
    batch_norm: bool = True
    wl_iterations: int = 2
    valid_fraction: float = 0.1
    head_init: str = "uniform"

    def validate(self) -> "ModelConfig":
        if min(self.K, self.L, self.D) < 1:
            raise ConfigurationError("K, L and D must all be >= 1")
        if self.node_budget is not None and self.node_budget < 1:
            raise ConfigurationError("node_budget must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError("dropout_rate must lie in [0, 1)")
        if self.front_end not in FRONT_ENDS:
            raise ConfigurationError(f"front_end must be one of {FRONT_ENDS}")
        if self.front_end == "patchy_san" and min(self.K_base, self.D_base) < 1:
            raise ConfigurationError("K_base and D_base must be >= 1")
        if self.activation not in ag.ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if self.tied and self.front_width != self.D:
            raise ConfigurationError(
                f"weight tying needs the front-end width ({self.front_width}) to equal D ({self.D})")
        if self.batch_size < 1 or self.epochs < 0 or self.wl_iterations < 1:
            raise ConfigurationError("batch_size and wl_iterations must be >= 1, epochs >= 0")
        if self.head_init not in ("uniform", "zeros"):
            raise ConfigurationError("head_init must be 'uniform' or 'zeros'")
        return self

    @property
    def front_width(self) -> int:
        return self.K if self.front_end == "adjacency" else self.D_base

    @property
    def table_K(self) -> int:
        return max(self.K, self.K_base) if self.front_end == "patchy_san" else self.K

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        """Build from a (possibly nested) mapping; unknown keys are rejected."""
        flat = dict(raw.get("model", {}), **raw.get("training", {}))
        flat.update({k: v for k, v in raw.items() if k not in ("model", "training")})
        fe = flat.get("front_end")
        if isinstance(fe, dict):
            flat["front_end"] = fe.get("kind", "patchy_san")
            for key in ("K_base", "D_base"):
                if key in fe:
                    flat[key] = fe[key]
        known = {f.name for f in fields(cls)}
        unknown = set(flat) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**flat).validate()

    def to_dict(self) -> dict:
        return asdict(self)


def closed_form_parameter_count(cfg: ModelConfig, n_classes: int, node_budget: int) -> int:
    total = 0
    if cfg.front_end == "patchy_san":
        total += cfg.D_base * cfg.K_base * cfg.K_base + cfg.D_base
    layer_inputs = [cfg.front_width] + [cfg.D] * (cfg.L - 1)
    conv = [cfg.D * (cfg.K + 1) * d_in + cfg.D for d_in in layer_inputs]
    total += conv[0] if cfg.tied else sum(conv)
    widths = [node_budget * cfg.D, *cfg.dense_sizes, n_classes]
    total += sum(a * b + b for a, b in zip(widths, widths[1:]))
    return total


@dataclass(eq=False)
class PreparedGraph:
    """Per-graph structures that never change during training."""

    graph: Graph
    table: NeighborTable
    front_input: np.ndarray
    ranking: np.ndarray
    full_table: NeighborTable


@dataclass(eq=False)
class Model:
    config: ModelConfig
    n_classes: int
    node_budget: int
    front: PatchySanLayer | None
    stack: EgoStack
    dense: list[tuple[Tensor, Tensor]]
    adam: AdamState
    _prepared: dict = field(default_factory=dict, repr=False)
    activations: dict = field(default_factory=dict, repr=False)

    # -- parameters --------------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        if self.front is not None:
            out["patchy.W"], out["patchy.b"] = self.front.filters, self.front.bias
        for i, layer in enumerate(self.stack.unique_layers(), 1):
            tag = "ego" if self.stack.tied else f"ego{i}"
            out[f"{tag}.W"], out[f"{tag}.b"] = layer.filters, layer.bias
        for j, (w, b) in enumerate(self.dense, 1):
            out[f"dense{j}.W"], out[f"dense{j}.b"] = w, b
        return out

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.named_parameters().values()))

    def ego_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_parameters().items() if not k.startswith("dense")}

    def zero_grad(self):
        for p in self.named_parameters().values():
            p.zero_grad()

    def snapshot(self) -> dict[str, np.ndarray]:
        state = {k: v.data.copy() for k, v in self.named_parameters().items()}
        for i, bn in enumerate(self.stack.bn_states):
            state[f"bn{i + 1}.mean"] = bn.mean.copy()
            state[f"bn{i + 1}.var"] = bn.var.copy()
        return state

    def restore(self, state: dict[str, np.ndarray]):
        for k, p in self.named_parameters().items():
            p.data[...] = state[k]
        for i, bn in enumerate(self.stack.bn_states):
            bn.mean = state[f"bn{i + 1}.mean"].copy()
            bn.var = state[f"bn{i + 1}.var"].copy()
            bn.initialized = True

    # -- forward -------------------------------------------------------------

    def prepare(self, g: Graph) -> PreparedGraph:
        hit = self._prepared.get(g)
        if hit is not None:
            return hit
        if g.node_count == 0:
            raise ValueError("cannot embed an empty graph")
        cfg = self.config
        coloring = wl_refine(g, cfg.wl_iterations)
        table = select_neighbors(g, cfg.table_K, coloring)
        if cfg.front_end == "adjacency":
            front_input = initial_embedding(g, table)
        else:
            front_input = patchy_san_adjacency(g, table, cfg.K_base)
        prep = PreparedGraph(g, table.truncated(cfg.K), front_input,
                             np.asarray(node_ranking(g, coloring), dtype=np.int64), table)
        self._prepared[g] = prep
        return prep

    def forward_batch(self, graphs: Sequence[Graph], train: bool = False,
                      rng: np.random.Generator | None = None) -> tuple[Tensor, list[Tensor], list[PreparedGraph]]:
        """Logits ``(B, C)`` for a batch plus per-layer outputs over all nodes.

        Eval mode (``train=False``) records no autograd graph.
        """
        if not train:
            with ag.no_grad():
                return self._forward(graphs, False, rng)
        return self._forward(graphs, True, rng)

    def _forward(self, graphs, train, rng):
        preps = [self.prepare(g) for g in graphs]
        sizes = [p.graph.node_count for p in preps]
        offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
        slots = np.concatenate([np.where(p.table.slots == PAD, PAD, p.table.slots + o)
                                for p, o in zip(preps, offsets)])
        table = NeighborTable(self.config.K, slots)
        front_in = Tensor(np.concatenate([p.front_input for p in preps]))
        if self.front is not None:
            h0 = patchy_san_apply(front_in, self.front, self.config.activation)
        else:
            h0 = front_in
        outs = stack_forward(h0, table, self.stack, train, rng)
        ridx = np.full((len(preps), self.node_budget), PAD, dtype=np.int64)
        for b, (p, o) in enumerate(zip(preps, offsets)):
            keep = p.ranking[: self.node_budget]
            ridx[b, : len(keep)] = keep + o
        x = ag.gather_rows(outs[-1], ridx)
        x = ag.reshape(x, (len(preps), -1))
        x = ag.dropout(x, self.config.dropout_rate, train, rng)
        for j, (w, b) in enumerate(self.dense):
            x = ag.add_bias(ag.matmul(x, w), b)
            if j < len(self.dense) - 1:
                x = ag.relu(x)
        return x, [h0] + outs, preps


def build_model(cfg: ModelConfig, n_classes: int, node_budget: int | None = None,
                rng_seed: int | None = None) -> Model:
    cfg.validate()
    if n_classes < 2:
        raise ConfigurationError("a classifier needs at least 2 classes")
    budget = node_budget or cfg.node_budget
    if budget is None or budget < 1:
        raise ConfigurationError("node_budget must be given (config or argument) and be >= 1")
    rng = np.random.default_rng(cfg.seed if rng_seed is None else rng_seed)
    front = PatchySanLayer.create(cfg.K_base, cfg.D_base, rng) if cfg.front_end == "patchy_san" else None
    stack = EgoStack.create(cfg.K, cfg.front_width, cfg.D, cfg.L, rng, tied=cfg.tied,
                            activation=cfg.activation, dropout_rate=cfg.dropout_rate, batch_norm=cfg.batch_norm)
    dense = []
    widths = [budget * cfg.D, *cfg.dense_sizes, n_classes]
    for j, (a, b) in enumerate(zip(widths, widths[1:]), 1):
        if cfg.head_init == "zeros":
            w = np.zeros((a, b))
        else:
            w = rng.uniform(-1, 1, size=(a, b)) * np.sqrt(6.0 / (a + b))
        dense.append((Tensor(w, True, f"dense{j}.W"), Tensor(np.zeros(b), True, f"dense{j}.b")))
    return Model(cfg, n_classes, int(budget), front, stack, dense, AdamState(lr=cfg.lr))


def default_node_budget(graphs: Iterable[Graph]) -> int:
    counts = [g.node_count for g in graphs]
    return max(1, int(math.ceil(np.percentile(counts, 90))))


def forward_graph(m: Model, g: Graph, train: bool = False, rng: np.random.Generator | None = None) -> np.ndarray:
    """Class logits for one graph; layer outputs are cached in ``m.activations``."""
    logits, acts, preps = m.forward_batch([g], train, rng)
    m.activations[g] = ActivationCache(preps[0], [a.data.copy() for a in acts])
    return logits.data[0].copy()


@dataclass(eq=False)
class ActivationCache:
    prepared: PreparedGraph
    layers: list[np.ndarray]  # H0 (front-end output) followed by H1..HL


# -- training ----------------------------------------------------------------


def evaluate(m: Model, d: Dataset, batch_size: int | None = None) -> tuple[float, float]:
    """Mean cross-entropy and accuracy in eval mode."""
    bs = batch_size or m.config.batch_size
    total_loss, correct = 0.0, 0
    for start in range(0, len(d), bs):
        graphs = d.graphs[start:start + bs]
        labels = np.asarray(d.class_labels[start:start + bs])
        logits, _, _ = m.forward_batch(graphs, train=False)
        loss = ag.softmax_cross_entropy(logits, labels)
        total_loss += float(loss.data) * len(graphs)
        correct += int((logits.data.argmax(axis=1) == labels).sum())
    return total_loss / len(d), correct / len(d)


def predict(m: Model, graphs: Sequence[Graph], batch_size: int | None = None) -> np.ndarray:
    bs = batch_size or m.config.batch_size
    out = [m.forward_batch(graphs[s:s + bs], train=False)[0].data.argmax(axis=1) for s in range(0, len(graphs), bs)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


@dataclass
class TrainResult:
    model: Model
    curves: list[dict]
    best_epoch: int


def train(m: Model, train_set: Dataset, valid_set: Dataset | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Minimise softmax cross-entropy with Adam; early-stop on validation loss.

    The parameters of the best validation epoch are restored at the end.
    """
    cfg = m.config
    if len(set(train_set.class_labels)) < 2:
        raise ValueError("training needs at least two classes present")
    rng = np.random.default_rng([cfg.seed, 1])
    params = m.named_parameters()
    curves: list[dict] = []
    best = (math.inf, -1, None)
    labels_all = np.asarray(train_set.class_labels)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_set))
        ep_loss, ep_correct = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            graphs = [train_set.graphs[i] for i in idx]
            labels = labels_all[idx]
            m.zero_grad()
            logits, _, _ = m.forward_batch(graphs, train=True, rng=rng)
            loss = ag.softmax_cross_entropy(logits, labels)
            if not np.isfinite(loss.data):
                raise TrainingError("training loss is not finite", {
                    "epoch": epoch, "batch_start": int(start), "loss": float(loss.data),
                    "max_abs_param": {k: float(np.abs(p.data).max()) for k, p in params.items()}})
            loss.backward()
            ag.adam_update(params, m.adam)
            ep_loss += float(loss.data) * len(idx)
            ep_correct += int((logits.data.argmax(axis=1) == labels).sum())
        row = {"epoch": epoch, "split": "train", "loss": ep_loss / len(order), "accuracy": ep_correct / len(order)}
        curves.append(row)
        if on_epoch:
            on_epoch(row)
        if valid_set is not None and len(valid_set):
            vloss, vacc = evaluate(m, valid_set)
            vrow = {"epoch": epoch, "split": "valid", "loss": vloss, "accuracy": vacc}
            curves.append(vrow)
            if on_epoch:
                on_epoch(vrow)
            if vloss < best[0]:
                best = (vloss, epoch, m.snapshot())
            elif epoch - best[1] >= cfg.patience:
                log.info("early stop at epoch %d (best %d)", epoch, best[1])
                break
    if best[2] is not None:
        m.restore(best[2])
    return TrainResult(m, curves, best[1] if best[2] is not None else cfg.epochs)


# -- cross validation ----------------------------------------------------------


def graph_digest(g: Graph) -> str:
    h = hashlib.sha256()
    h.update(repr((g.node_count, g.edges, g.node_labels, g.edge_weights)).encode())
    return h.hexdigest()


def stratified_folds(d: Dataset, folds: int, seed: int = 0) -> list[np.ndarray]:
    """Stratified fold assignment that ignores the order of ``d``.

    Members of each class are sorted by content digest, shuffled with the seed
    and dealt round-robin, continuing the count across classes.
    """
    if len(d) < folds:
        raise ValueError(f"dataset of {len(d)} graphs cannot be split into {folds} folds")
    rng = np.random.default_rng([seed, 2])
    keyed = sorted(range(len(d)), key=lambda i: (d.class_labels[i], graph_digest(d.graphs[i]), i))
    assignment = np.empty(len(d), dtype=np.int64)
    pos = 0
    for c in sorted(set(d.class_labels)):
        members = [i for i in keyed if d.class_labels[i] == c]
        members = [members[j] for j in rng.permutation(len(members))]
        for i in members:
            assignment[i] = pos % folds
            pos += 1
    out = [np.flatnonzero(assignment == f) for f in range(folds)]
    short = [f for f, idx in enumerate(out) if len({d.class_labels[i] for i in idx}) < d.num_classes]
    if short:
        warnings.warn(f"{len(short)} of {folds} folds are missing at least one class (folds {short})",
                      stacklevel=2)
    return out


@dataclass
class CVReport:
    fold_accuracies: list[float]
    mean: float
    std: float
    wall_time: float
    parameter_count: int
    rows: list[dict] = field(default_factory=list)

    def summary_line(self) -> str:
        return (f"folds={len(self.fold_accuracies)} mean_accuracy={self.mean:.4f} std={self.std:.4f} "
                f"params={self.parameter_count} wall_time={self.wall_time:.1f}s")


def cross_validate(cfg: ModelConfig, dataset: Dataset, folds: int = 10,
                   on_fold: Callable[[int, Model], None] | None = None,
                   on_row: Callable[[dict], None] | None = None) -> CVReport:
    """Stratified k-fold CV; each training split also holds out a validation part."""
    cfg.validate()
    t0 = time.perf_counter()
    splits = stratified_folds(dataset, folds, cfg.seed)
    n_classes = dataset.num_classes
    accs, rows, n_params = [], [], 0
    for f, test_idx in enumerate(splits):
        train_idx = np.setdiff1d(np.arange(len(dataset)), test_idx)
        inner = dataset.subset(train_idx)
        valid_idx: np.ndarray = np.zeros(0, dtype=np.int64)
        if cfg.valid_fraction > 0:
            k = max(2, int(round(1 / cfg.valid_fraction)))
            if len(inner) >= k:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    valid_idx = stratified_folds(inner, k, cfg.seed + f)[0]
        fit_idx = np.setdiff1d(np.arange(len(inner)), valid_idx)
        fit_set, valid_set = inner.subset(fit_idx), inner.subset(valid_idx)
        budget = cfg.node_budget or default_node_budget(fit_set.graphs)
        m = build_model(cfg, n_classes, budget, rng_seed=cfg.seed + f)

        def emit(row, f=f):
            row = {"fold": f, **row}
            rows.append(row)
            if on_row:
                on_row(row)

        train(m, fit_set, valid_set if len(valid_set) else None, on_epoch=emit)
        test_loss, test_acc = evaluate(m, dataset.subset(test_idx))
        emit({"epoch": -1, "split": "test", "loss": test_loss, "accuracy": test_acc})
        accs.append(test_acc)
        n_params = m.parameter_count()
        log.info("fold %d: test accuracy %.4f", f, test_acc)
        if on_fold:
            on_fold(f, m)
    return CVReport(accs, float(np.mean(accs)), float(np.std(accs)), time.perf_counter() - t0, n_params, rows)


# -- serialization -------------------------------------------------------------

MAGIC = b"EGOCNN\x00\x01"
FORMAT_VERSION = 1


def dumps_model(m: Model) -> bytes:
    """Binary container: magic, version, JSON header, then float64 LE blocks."""
    header = json.dumps({"config": m.config.to_dict(), "n_classes": m.n_classes,
                         "node_budget": m.node_budget}, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(header)))
    buf.write(header)
    state = m.snapshot()
    buf.write(struct.pack("<I", len(state)))
    for name, arr in state.items():
        nb = name.encode()
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def loads_model(blob: bytes) -> Model:
    view = memoryview(blob)
    if bytes(view[:8]) != MAGIC:
        raise ValueError("not an Ego-CNN model file")
    version, hlen = struct.unpack_from("<II", view, 8)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {version}")
    pos = 16
    header = json.loads(bytes(view[pos:pos + hlen]))
    pos += hlen
    (count,) = struct.unpack_from("<I", view, pos)
    pos += 4
    state = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", view, pos)
        pos += 4
        name = bytes(view[pos:pos + nlen]).decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<I", view, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", view, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        state[name] = np.frombuffer(view[pos:pos + 8 * n], dtype="<f8").reshape(shape).astype(np.float64)
        pos += 8 * n
    cfg = ModelConfig(**header["config"])
    m = build_model(cfg, header["n_classes"], header["node_budget"])
    m.restore(state)
    return m


def save_model(m: Model, path: str | Path) -> Path:
    return atomic_write_bytes(Path(path), dumps_model(m))


def load_model(path: str | Path) -> Model:
    return loads_model(Path(path).read_bytes())


def clone_model(m: Model) -> Model:
    return loads_model(dumps_model(m))
