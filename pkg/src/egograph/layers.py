"""Ego-convolution, the Patchy-San base layer, and ego-centric stacking."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import BatchNormState, Tensor
from .errors import ConfigurationError
from .graph import Graph
from .neighbors import PAD, NeighborTable


def _uniform(rng: np.random.Generator, shape, fan_sum: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_sum)
    return rng.uniform(-bound, bound, size=shape)


@dataclass(eq=False)
class PatchySanLayer:
    """``D`` filters over the K_base x K_base adjacency of selected neighbors."""

    K_base: int
    filters: Tensor
    bias: Tensor

    @classmethod
    def create(cls, K_base: int, D: int, rng: np.random.Generator) -> "PatchySanLayer":
        if D < 1:
            raise ConfigurationError("filter count must be >= 1")
        w = _uniform(rng, (D, K_base, K_base), K_base * K_base + D)
        return cls(K_base, Tensor(w, True, "patchy.W"), Tensor(np.zeros(D), True, "patchy.b"))

    @property
    def out_dim(self) -> int:
        return self.filters.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.filters, self.bias]


@dataclass(eq=False)
class EgoConvLayer:
    """Filter bank of shape ``(D_out, K + 1, D_in)`` plus a bias per filter."""

    filters: Tensor
    bias: Tensor

    def __post_init__(self):
        if self.filters.data.ndim != 3:
            raise ValueError("ego-conv filters must be 3-d")
        if self.bias.shape != (self.filters.shape[0],):
            raise ValueError("bias length must equal the filter count")

    @classmethod
    def create(cls, K: int, D_in: int, D_out: int, rng: np.random.Generator, tag: str = "ego") -> "EgoConvLayer":
        w = _uniform(rng, (D_out, K + 1, D_in), (K + 1) * D_in + D_out)
        return cls(Tensor(w, True, f"{tag}.W"), Tensor(np.zeros(D_out), True, f"{tag}.b"))

    @property
    def K(self) -> int:
        return self.filters.shape[1] - 1

    @property
    def d_in(self) -> int:
        return self.filters.shape[2]

    @property
    def d_out(self) -> int:
        return self.filters.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.filters, self.bias]

    def parameter_count(self) -> int:
        return self.d_out * (self.K + 1) * self.d_in + self.d_out


@dataclass(eq=False)
class EgoStack:
    """``L`` ego-convolution layers sharing one neighbor table.

    With ``tied=True`` every entry of ``layers`` is the same object.
    Each layer normalizes (optional) and drops out its input before the
    convolution; ``bn_states`` holds one set of running statistics per layer.
    """

    layers: list[EgoConvLayer]
    tied: bool = False
    activation: str = "relu"
    dropout_rate: float = 0.0
    batch_norm: bool = True
    bn_states: list[BatchNormState] = field(default_factory=list)

    def __post_init__(self):
        if not self.layers:
            raise ConfigurationError("an ego stack needs at least one layer")
        if self.tied:
            first = self.layers[0]
            if any(layer is not first for layer in self.layers):
                raise ConfigurationError("a tied stack must reuse a single layer object")
            if first.d_in != first.d_out:
                raise ConfigurationError(
                    f"tied layers need D_in == D_out, got D_in={first.d_in}, D_out={first.d_out}")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.d_out != b.d_in:
                raise ConfigurationError("consecutive layers have mismatched widths")
        if not self.bn_states:
            self.bn_states = [BatchNormState.create(layer.d_in) for layer in self.layers]

    @classmethod
    def create(cls, K: int, D_in: int, D: int, L: int, rng: np.random.Generator, tied: bool = False,
               **kwargs) -> "EgoStack":
        if L < 1:
            raise ConfigurationError("L must be >= 1")
        if tied:
            if D_in != D:
                raise ConfigurationError(f"tied stack needs input width {D_in} to equal D={D}")
            layer = EgoConvLayer.create(K, D, D, rng, "ego")
            return cls([layer] * L, True, **kwargs)
        layers = []
        for i in range(L):
            layers.append(EgoConvLayer.create(K, D_in if i == 0 else D, D, rng, f"ego{i + 1}"))
        return cls(layers, False, **kwargs)

    @property
    def L(self) -> int:
        return len(self.layers)

    def unique_layers(self) -> list[EgoConvLayer]:
        out, seen = [], set()
        for layer in self.layers:
            if id(layer) not in seen:
                seen.add(id(layer))
                out.append(layer)
        return out

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.unique_layers() for p in layer.parameters()]

    def parameter_count(self) -> int:
        return sum(layer.parameter_count() for layer in self.unique_layers())


def ego_index(t: NeighborTable) -> np.ndarray:
    """``(N, K + 1)`` gather index: the node itself, then its slots (PAD = -1)."""
    return np.concatenate([np.arange(t.node_count)[:, None], t.slots], axis=1)


def ego_conv_forward(h_prev: Tensor, t: NeighborTable, layer: EgoConvLayer, activation: str = "relu") -> Tensor:
    if h_prev.data.ndim != 2 or h_prev.shape[1] != layer.d_in:
        raise ValueError(f"input of shape {h_prev.shape} does not match layer D_in={layer.d_in}")
    if h_prev.shape[0] != t.node_count:
        raise ValueError("input row count differs from the neighbor table")
    if t.K != layer.K:
        raise ValueError(f"neighbor table K={t.K} but layer expects K={layer.K}")
    z = ag.add_bias(ag.ego_frobenius(h_prev, ego_index(t), layer.filters), layer.bias)
    return ag.ACTIVATIONS[activation](z)


def stack_forward(h0: Tensor, t: NeighborTable, stack: EgoStack, train: bool = False,
                  rng: np.random.Generator | None = None) -> list[Tensor]:
    """Apply every layer in turn and return all layer outputs ``H1..HL``."""
    outputs = []
    h = h0
    for layer, bn in zip(stack.layers, stack.bn_states):
        if stack.batch_norm:
            h = ag.batch_norm(h, bn, train)
        h = ag.dropout(h, stack.dropout_rate, train, rng)
        h = ego_conv_forward(h, t, layer, stack.activation)
        outputs.append(h)
    return outputs


def patchy_san_adjacency(g: Graph, t: NeighborTable, K_base: int) -> np.ndarray:
    """``A[n]``: adjacency among n's first ``K_base`` slots (zero rows/cols at PAD)."""
    if t.K < K_base:
        raise ValueError(f"neighbor table K={t.K} is smaller than K_base={K_base}")
    a = np.zeros((g.node_count, K_base, K_base))
    for n in range(g.node_count):
        sel = t.slots[n, :K_base]
        for i, u in enumerate(sel):
            if u == PAD:
                continue
            for j, v in enumerate(sel):
                if v != PAD and i != j and g.has_edge(int(u), int(v)):
                    a[n, i, j] = g.weight(int(u), int(v))
    return a


def patchy_san_apply(adj: np.ndarray | Tensor, layer: PatchySanLayer, activation: str = "relu") -> Tensor:
    z = ag.add_bias(ag.frobenius_batch(ag.as_tensor(adj), layer.filters), layer.bias)
    return ag.ACTIVATIONS[activation](z)


def patchy_san_forward(g: Graph, t: NeighborTable, layer: PatchySanLayer, activation: str = "relu") -> Tensor:
    return patchy_san_apply(patchy_san_adjacency(g, t, layer.K_base), layer, activation)


def receptive_field(t: NeighborTable, n: int, l: int) -> set[int]:
    """Nodes that layer-``l`` neuron of node ``n`` depends on."""
    if l < 1:
        raise ValueError("l must be >= 1")
    seen = {n}
    frontier = [n]
    for _ in range(l):
        nxt = []
        for u in frontier:
            for m in t.slots[u]:
                m = int(m)
                if m != PAD and m not in seen:
                    seen.add(m)
                    nxt.append(m)
        frontier = nxt
    return seen
