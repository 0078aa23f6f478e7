"""A small reverse-mode tensor engine over numpy arrays.

Only the primitives the Ego-CNN needs are provided. Every primitive returns a
``Tensor`` that remembers its parents and a closure that pushes the upstream
gradient into them; ``backward`` replays those closures in reverse
topological order (the tape).
"""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

DTYPE = np.float64


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None):
        backward(self, grad)

    def item(self) -> float:
        return float(self.data)


_grad_enabled = True


@contextmanager
def no_grad() -> Iterator[None]:
    """Record nothing; intermediates are freed as soon as they go out of use."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _result(data: np.ndarray, parents: Sequence[Tensor], fn) -> Tensor:
    out = Tensor(data)
    if not _grad_enabled:
        return out
    live = tuple(p for p in parents if p.requires_grad)
    if live:
        out.requires_grad = True
        out._parents = live
        out._backward = fn
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tape(root: Tensor) -> list[Tensor]:
    """Topological order of the recorded graph ending at ``root``."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, grad: np.ndarray | None = None):
    if not root.requires_grad:
        return
    order = tape(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data) if grad is None else np.asarray(grad, DTYPE)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node._accumulate(g)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg


def _check(cond: bool, msg: str):
    if not cond:
        raise ValueError(msg)


# Each backward closure returns one gradient per live parent, in order.


def _grads_for(parents, pairs):
    """Select the gradients that belong to parents that require grad."""
    return [g for p, g in pairs if p.requires_grad]


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check(a.data.ndim == 2 and b.data.ndim == 2 and a.shape[1] == b.shape[0],
           f"matmul shape mismatch {a.shape} @ {b.shape}")

    def fn(g):
        return _grads_for((a, b), [(a, g @ b.data.T if a.requires_grad else None),
                                   (b, a.data.T @ g if b.requires_grad else None)])

    return _result(a.data @ b.data, (a, b), fn)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    _check(b.data.ndim == 1 and x.shape[-1] == b.shape[0], f"bias shape {b.shape} does not fit {x.shape}")

    def fn(g):
        return _grads_for((x, b), [(x, g), (b, g.reshape(-1, b.shape[0]).sum(axis=0))])

    return _result(x.data + b.data, (x, b), fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check(a.shape == b.shape, f"add shape mismatch {a.shape} vs {b.shape}")
    return _result(a.data + b.data, (a, b), lambda g: _grads_for((a, b), [(a, g), (b, g)]))


def scale(x: Tensor, c: float) -> Tensor:
    return _result(x.data * c, (x,), lambda g: [g * c])


def frobenius_batch(x: Tensor, w: Tensor) -> Tensor:
    """``out[n, d] = sum_ij x[n, i, j] * w[d, i, j]``."""
    _check(x.data.ndim == 3 and w.data.ndim == 3 and x.shape[1:] == w.shape[1:],
           f"frobenius_batch shape mismatch {x.shape} vs {w.shape}")
    n, d = x.shape[0], w.shape[0]
    xf = x.data.reshape(n, -1)
    wf = w.data.reshape(d, -1)

    def fn(g):
        return _grads_for((x, w), [(x, (g @ wf).reshape(x.shape) if x.requires_grad else None),
                                   (w, (g.T @ xf).reshape(w.shape) if w.requires_grad else None)])

    return _result(xf @ wf.T, (x, w), fn)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: [g * mask])


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: [g * (1.0 - y * y)])


def identity(x: Tensor) -> Tensor:
    return x


ACTIVATIONS = {"relu": relu, "tanh": tanh, "identity": identity}


def dropout(x: Tensor, rate: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity when not training or when ``rate == 0``."""
    _check(0.0 <= rate < 1.0, "dropout rate must lie in [0, 1)")
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _result(x.data * mask, (x,), lambda g: [g * mask])


@dataclass
class BatchNormState:
    """Running statistics for one normalization site (not trainable)."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5
    initialized: bool = False

    @classmethod
    def create(cls, width: int, momentum: float = 0.9, eps: float = 1e-5) -> "BatchNormState":
        return cls(np.zeros(width), np.ones(width), momentum, eps)


def batch_norm(x: Tensor, state: BatchNormState, train: bool) -> Tensor:
    """Per-channel normalization over the row (node) axis, without affine terms.

    In eval mode the running statistics are used and the map is affine.
    """
    _check(x.data.ndim == 2 and x.shape[1] == state.mean.shape[0], "batch_norm width mismatch")
    if not train:
        inv = 1.0 / np.sqrt(state.var + state.eps)
        return _result((x.data - state.mean) * inv, (x,), lambda g: [g * inv])
    mu = x.data.mean(axis=0)
    var = x.data.var(axis=0)
    if state.initialized:
        state.mean = state.momentum * state.mean + (1 - state.momentum) * mu
        state.var = state.momentum * state.var + (1 - state.momentum) * var
    else:
        state.mean, state.var, state.initialized = mu.copy(), var.copy(), True
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mu) * inv

    def fn(g):
        m = g.shape[0]
        return [inv / m * (m * g - g.sum(axis=0) - xhat * (g * xhat).sum(axis=0))]

    return _result(xhat, (x,), fn)


def softmax_cross_entropy(logits: Tensor, labels: Sequence[int] | np.ndarray) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under row-wise softmax."""
    _check(logits.data.ndim == 2, "logits must be a 2-d (batch x classes) array")
    labels = np.asarray(labels, dtype=np.int64)
    _check(labels.shape == (logits.shape[0],), "one label per logits row is required")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    b = logits.shape[0]
    loss = -logp[np.arange(b), labels].mean()

    def fn(g):
        p = np.exp(logp)
        p[np.arange(b), labels] -= 1.0
        return [g * p / b]

    return _result(np.asarray(loss), (logits,), fn)


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return _result(np.asarray(x.data.sum()), (x,), lambda g: [np.broadcast_to(g, x.shape)])


def concat_rows(xs: Sequence[Tensor]) -> Tensor:
    _check(len(xs) > 0, "concat_rows needs at least one tensor")
    _check(all(x.shape[1:] == xs[0].shape[1:] for x in xs), "concat_rows trailing shapes differ")
    splits = np.cumsum([x.shape[0] for x in xs])[:-1]

    def fn(g):
        parts = np.split(g, splits, axis=0)
        return [p for x, p in zip(xs, parts) if x.requires_grad]

    return _result(np.concatenate([x.data for x in xs], axis=0), xs, fn)


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """``out[..., :] = x[index[...], :]`` with negative indices yielding zero rows."""
    _check(x.data.ndim == 2, "gather_rows expects a 2-d source")
    index = np.asarray(index, dtype=np.int64)
    _check(index.size == 0 or int(index.min()) >= -1, "gather index must be >= -1")
    # a trailing zero row turns PAD (-1) into an ordinary lookup
    padded = np.concatenate([x.data, np.zeros((1, x.shape[1]), dtype=x.data.dtype)])
    out = np.take(padded, index, axis=0)

    def fn(g):
        gx = np.zeros_like(padded)
        np.add.at(gx, index.reshape(-1), g.reshape(-1, x.shape[1]))
        return [gx[:-1]]

    return _result(out, (x,), fn)


CHUNK_ELEMENTS = 1 << 18  # 2 MiB of float64 per gathered chunk


def ego_frobenius(h: Tensor, index: np.ndarray, w: Tensor) -> Tensor:
    """``out[n, d] = sum_kj h[index[n, k], j] * w[d, k, j]`` with ``index == -1`` reading zeros.

    Equal to ``frobenius_batch(gather_rows(h, index), w)`` but never holds the
    whole ``(N, K+1, D_in)`` stack: rows are processed in fixed-size chunks,
    so memory stays bounded and time stays linear in N.
    """
    index = np.asarray(index, dtype=np.int64)
    _check(h.data.ndim == 2 and index.ndim == 2 and w.data.ndim == 3, "ego_frobenius expects 2-d h/index, 3-d w")
    _check(w.shape[1:] == (index.shape[1], h.shape[1]),
           f"ego_frobenius shape mismatch: index {index.shape}, h {h.shape}, w {w.shape}")
    _check(index.size == 0 or int(index.min()) >= -1, "gather index must be >= -1")
    n, d_in = index.shape[0], h.shape[1]
    wf = w.data.reshape(w.shape[0], -1)
    padded = np.concatenate([h.data, np.zeros((1, d_in), dtype=h.data.dtype)])
    step = max(1, CHUNK_ELEMENTS // max(1, wf.shape[1]))
    chunks = [slice(s, min(s + step, n)) for s in range(0, n, step)]
    out = np.empty((n, wf.shape[0]))
    for c in chunks:
        out[c] = np.take(padded, index[c], axis=0).reshape(-1, wf.shape[1]) @ wf.T

    def fn(g):
        gw = np.zeros_like(wf) if w.requires_grad else None
        gh = np.zeros_like(padded) if h.requires_grad else None
        for c in chunks:
            if gw is not None:
                gw += g[c].T @ np.take(padded, index[c], axis=0).reshape(-1, wf.shape[1])
            if gh is not None:
                np.add.at(gh, index[c].reshape(-1), (g[c] @ wf).reshape(-1, d_in))
        return _grads_for((h, w), [(h, None if gh is None else gh[:-1]),
                                   (w, None if gw is None else gw.reshape(w.shape))])

    return _result(out, (h, w), fn)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _result(x.data.reshape(shape), (x,), lambda g: [g.reshape(x.shape)])


def matvec(x: Tensor, w: Tensor) -> Tensor:
    """``x @ w`` for a 2-d ``x`` and 1-d ``w``."""
    _check(x.data.ndim == 2 and w.data.ndim == 1 and x.shape[1] == w.shape[0], "matvec shape mismatch")

    def fn(g):
        return _grads_for((x, w), [(x, np.outer(g, w.data) if x.requires_grad else None),
                                   (w, x.data.T @ g if w.requires_grad else None)])

    return _result(x.data @ w.data, (x, w), fn)


def segment_softmax(scores: Tensor, segments: np.ndarray, n_segments: int) -> Tensor:
    """Softmax of a 1-d score vector within each segment id."""
    segments = np.asarray(segments, dtype=np.int64)
    _check(scores.data.ndim == 1 and segments.shape == scores.shape, "segment_softmax shape mismatch")
    mx = np.full(n_segments, -np.inf)
    np.maximum.at(mx, segments, scores.data)
    e = np.exp(scores.data - mx[segments])
    den = np.bincount(segments, weights=e, minlength=n_segments)
    p = e / den[segments]

    def fn(g):
        dot = np.bincount(segments, weights=g * p, minlength=n_segments)
        return [p * (g - dot[segments])]

    return _result(p, (scores,), fn)


def weighted_segment_sum(x: Tensor, weights: Tensor, segments: np.ndarray, n_segments: int) -> Tensor:
    """``out[s] = sum_{n in s} weights[n] * x[n]``."""
    segments = np.asarray(segments, dtype=np.int64)
    _check(x.data.ndim == 2 and weights.shape == (x.shape[0],), "weighted_segment_sum shape mismatch")
    out = np.zeros((n_segments, x.shape[1]))
    np.add.at(out, segments, x.data * weights.data[:, None])

    def fn(g):
        gs = g[segments]
        return _grads_for((x, weights), [(x, gs * weights.data[:, None] if x.requires_grad else None),
                                         (weights, (gs * x.data).sum(axis=1) if weights.requires_grad else None)])

    return _result(out, (x, weights), fn)


# -- optimisation ------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_update(params: dict[str, Tensor], state: AdamState) -> None:
    """One bias-corrected Adam step using each parameter's ``grad`` (in place).

    Parameters without a gradient are treated as having a zero gradient.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        if m.shape != p.data.shape:
            raise ValueError(f"optimizer state for {name} has shape {m.shape}, parameter has {p.data.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        p.data -= state.lr * mhat / (np.sqrt(vhat) + state.epsilon)


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor], epsilon: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` must rebuild the computation from the current ``params`` values
    each call and be deterministic.
    """
    for p in params:
        p.zero_grad()
    out = f()
    backward(out)
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            hi = float(f().data)
            flat[i] = orig - epsilon
            lo = float(f().data)
            flat[i] = orig
            numeric = (hi - lo) / (2 * epsilon)
            a = float(analytic.reshape(-1)[i])
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
    return worst
