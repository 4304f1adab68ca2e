"""The Meta-Net supernet: stem, Normal/Reduction cell pairs with mixed edges, and head."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .core import functional as F
from .core import nn
from .core.tensor import Tensor, add_n, getitem
from .search_space import TIME_STRIDE, SearchSpace, build_operator, fits, shared_activations


class ArchitectureError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    """Raised when architecture weights or losses become NaN."""


@dataclass(frozen=True)
class CellTopology:
    n_nodes: int

    def __post_init__(self):
        if self.n_nodes < 1:
            raise ArchitectureError("a cell needs at least one intermediate node")

    @property
    def edges(self) -> List[Tuple[int, int]]:
        """(source, destination) pairs. Nodes 0, 1 are the cell inputs; 2.. are intermediates."""
        return [(i, j + 2) for j in range(self.n_nodes) for i in range(j + 2)]

    @property
    def num_edges(self) -> int:
        return sum(2 + n for n in range(self.n_nodes))

    def edges_into(self, node: int) -> List[int]:
        return [e for e, (_, dst) in enumerate(self.edges) if dst == node]


@dataclass
class ArchParams:
    normal: Tensor
    reduce: Tensor

    @classmethod
    def init(cls, num_edges: int, num_ops: int, rng: np.random.Generator, std: float = 1e-3,
             dtype=np.float32) -> "ArchParams":
        n = Tensor(rng.normal(0.0, std, size=(num_edges, num_ops)).astype(dtype), requires_grad=True)
        r = Tensor(rng.normal(0.0, std, size=(num_edges, num_ops)).astype(dtype), requires_grad=True)
        return cls(n, r)

    @classmethod
    def from_arrays(cls, normal, reduce, requires_grad: bool = True, dtype=None) -> "ArchParams":
        return cls(Tensor(np.array(normal, dtype=dtype), requires_grad=requires_grad),
                   Tensor(np.array(reduce, dtype=dtype), requires_grad=requires_grad))

    def tensors(self) -> List[Tensor]:
        return [self.normal, self.reduce]

    def arrays(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.normal.data, self.reduce.data

    def copy(self) -> "ArchParams":
        return ArchParams.from_arrays(self.normal.data.copy(), self.reduce.data.copy(),
                                      self.normal.requires_grad, self.normal.dtype)

    def check_finite(self) -> None:
        for name, t in (("normal", self.normal), ("reduce", self.reduce)):
            if np.isnan(t.data).any():
                raise DivergenceError(f"architecture weights ({name}) contain NaN; search diverged")

    def checksum(self) -> str:
        h = hashlib.sha256()
        for a in self.arrays():
            h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
        return h.hexdigest()[:16]


def mixed_edge_forward(x: Tensor, theta_edge: Tensor, ops: Sequence[nn.Module],
                       available: Optional[Sequence[bool]] = None) -> Tensor:
    """Softmax(theta_edge)-weighted sum of every operator applied to ``x``.

    Operators flagged unavailable are masked out of the softmax; zero
    operators contribute nothing and are not evaluated.
    """
    if theta_edge.shape != (len(ops),):
        raise ArchitectureError(f"edge weights have shape {theta_edge.shape}, expected ({len(ops)},)")
    if np.isnan(theta_edge.data).any():
        raise DivergenceError("NaN in architecture weights; search diverged")
    logits = theta_edge
    if available is not None and not all(available):
        mask = np.where(np.asarray(available), 0.0, -np.inf).astype(theta_edge.dtype)
        logits = theta_edge + Tensor(mask)
    probs = F.softmax(logits, axis=-1)
    return weighted_edge(x, probs, ops, available)


def weighted_edge(x: Tensor, probs: Tensor, ops: Sequence[nn.Module],
                  available: Optional[Sequence[bool]] = None) -> Tensor:
    outs = []
    for k, op in enumerate(ops):
        if getattr(op, "is_zero", False) or (available is not None and not available[k]):
            outs.append(None)
        else:
            outs.append(op(x))
    if all(o is None for o in outs):
        zero = next(op for op in ops if getattr(op, "is_zero", False))
        return zero(x)
    return F.weighted_sum(probs, outs)


class MixedEdge(nn.Module):
    def __init__(self, space: SearchSpace, channels: int, stride_time: bool, time_extent: int,
                 rng: np.random.Generator, activation: str = "elu"):
        super().__init__()
        self.available = [fits(spec, time_extent) for spec in space.operators]
        self.ops = [build_operator(spec, channels, reduction=stride_time, rng=rng, activation=activation)
                    for spec in space.operators]

    def forward(self, x: Tensor, probs: Tensor) -> Tensor:
        return weighted_edge(x, probs, self.ops, self.available)


class SearchCell(nn.Module):
    def __init__(self, space: SearchSpace, channels: int, n_nodes: int, reduction: bool,
                 reduction_prev: bool, time_extent: int, rng: np.random.Generator, activation: str = "elu"):
        super().__init__()
        self.topology = CellTopology(n_nodes)
        self.reduction = reduction
        self.reduction_prev = reduction_prev
        inner_extent = -(-time_extent // 2) if reduction else time_extent
        self.edges = []
        for src, _ in self.topology.edges:
            from_input = src < 2
            stride = reduction and from_input
            extent = time_extent if from_input else inner_extent
            self.edges.append(MixedEdge(space, channels, stride, extent, rng, activation))
        self.mask = np.array([e.available for e in self.edges])

    def forward(self, s0: Tensor, s1: Tensor, theta: Tensor) -> Tensor:
        mask = np.where(self.mask, 0.0, -np.inf).astype(theta.dtype)
        logits = theta if self.mask.all() else theta + Tensor(mask)
        probs = F.softmax(logits, axis=-1)
        if self.reduction_prev:
            s0 = F.subsample(s0, TIME_STRIDE)
        states = [s0, s1]
        e = 0
        for _ in range(self.topology.n_nodes):
            terms = []
            for i in range(len(states)):
                terms.append(self.edges[e](states[i], getitem(probs, e)))
                e += 1
            states.append(add_n(terms))
        return add_n(states[2:])


class MetaNet(nn.Module):
    """Supernet over ``[B, C, slices, points]`` trials.

    Channels stay at C throughout. Every Reduction cell halves the time
    (last) axis.
    """

    def __init__(self, space: SearchSpace, channels: int, classes: int, n_pairs: int = 3,
                 n_nodes: int = 2, input_shape: Tuple[int, int] = (8, 400), seed: int = 0,
                 activation: str = "elu"):
        super().__init__()
        if channels != space.channel_count:
            raise ArchitectureError(f"search space is for {space.channel_count} channels, net has {channels}")
        slices, points = input_shape
        if points < 2 ** n_pairs:
            raise ArchitectureError(f"time extent {points} too short for {n_pairs} reductions")
        rng = np.random.default_rng(seed)
        self.space = space
        self.channels = channels
        self.classes = classes
        self.n_pairs = n_pairs
        self.n_nodes = n_nodes
        self.input_shape = (slices, points)
        self.stem_conv = nn.Conv2d(channels, channels, (1, 1), rng=rng)
        self.stem_bn = nn.BatchNorm2d(channels)
        self.cells = []
        extent = points
        reduction_prev = False
        for _ in range(n_pairs):
            for reduction in (False, True):
                self.cells.append(SearchCell(space, channels, n_nodes, reduction, reduction_prev, extent, rng,
                                             activation))
                reduction_prev = reduction
                if reduction:
                    extent = -(-extent // 2)
        self.head = nn.Linear(channels, classes, rng=rng)
        self.topology = CellTopology(n_nodes)

    def weight_parameters(self) -> List[Tensor]:
        return self.parameters()

    def new_arch_params(self, seed: int = 0, std: float = 1e-3, dtype=np.float32) -> ArchParams:
        return ArchParams.init(self.topology.num_edges, len(self.space), np.random.default_rng(seed), std, dtype)

    def check_input(self, batch: Tensor) -> None:
        if batch.ndim != 4 or batch.shape[1] != self.channels or tuple(batch.shape[2:]) != self.input_shape:
            raise ArchitectureError(
                f"expected input [B, {self.channels}, {self.input_shape[0]}, {self.input_shape[1]}], "
                f"got {list(batch.shape)}"
            )

    def forward(self, batch: Tensor, theta: ArchParams) -> Tensor:
        self.check_input(batch)
        expected = (self.topology.num_edges, len(self.space))
        for t in theta.tensors():
            if t.shape != expected:
                raise ArchitectureError(f"architecture weights have shape {t.shape}, expected {expected}")
        theta.check_finite()
        s = self.stem_bn(self.stem_conv(batch))
        s0 = s1 = s
        with shared_activations():
            for cell in self.cells:
                w = theta.reduce if cell.reduction else theta.normal
                s0, s1 = s1, cell(s0, s1, w)
        return self.head(F.global_avg_pool(s1))
