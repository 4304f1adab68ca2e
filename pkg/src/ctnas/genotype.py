"""Discrete architectures: derivation from θ, JSON round-trip, compilation, accounting."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .core import functional as F
from .core import nn
from .core.tensor import Tensor, add_n, no_grad
from .search_space import (TIME_STRIDE, OperatorSpec, SearchSpace, SearchSpaceError, build_operator, fits,
                           param_count)
from .supernet import ArchitectureError, ArchParams, CellTopology

SCHEMA_VERSION = 1

Node = Tuple[Tuple[str, int], ...]


class GenotypeError(ValueError):
    """Malformed genotype document. ``path`` names the offending field."""

    def __init__(self, message: str, path: str = "", offset: Optional[int] = None):
        where = f" at {path}" if path else ""
        if offset is not None:
            where += f" (byte offset {offset})"
        super().__init__(message + where)
        self.path = path
        self.offset = offset


@dataclass(frozen=True)
class Genotype:
    normal: Tuple[Node, ...]
    reduce: Tuple[Node, ...]
    n_pairs: int = 2
    n_nodes: int = 2
    channels: int = 8
    classes: int = 4
    space_id: str = "desk"
    theta_checksum: str = ""

    def __post_init__(self):
        for cell_name in ("normal", "reduce"):
            nodes = tuple(tuple((str(op), int(src)) for op, src in node) for node in getattr(self, cell_name))
            object.__setattr__(self, cell_name, nodes)
        self.validate()

    def validate(self) -> None:
        for cell_name in ("normal", "reduce"):
            nodes = getattr(self, cell_name)
            if len(nodes) != self.n_nodes:
                raise GenotypeError(f"expected {self.n_nodes} nodes, found {len(nodes)}", cell_name)
            for j, node in enumerate(nodes):
                path = f"{cell_name}[{j}]"
                if len(node) != 2:
                    raise GenotypeError(f"each node retains exactly 2 edges, found {len(node)}", path)
                sources = [src for _, src in node]
                if len(set(sources)) != 2:
                    raise GenotypeError("retained edges must come from distinct sources", path)
                for k, (op, src) in enumerate(node):
                    if not 0 <= src < j + 2:
                        raise GenotypeError(f"source {src} violates DAG order (must be < {j + 2})",
                                            f"{path}[{k}].source")
                    try:
                        spec = OperatorSpec.parse(op)
                    except SearchSpaceError as exc:
                        raise GenotypeError(str(exc), f"{path}[{k}].op") from None
                    if spec.kind == "none":
                        raise GenotypeError("'none' cannot be a retained operator", f"{path}[{k}].op")
        for name in ("n_pairs", "n_nodes", "channels", "classes"):
            if getattr(self, name) < 1:
                raise GenotypeError("must be >= 1", f"meta.{name}")

    def operators(self) -> List[str]:
        return [op for cell in (self.normal, self.reduce) for node in cell for op, _ in node]

    def to_dict(self) -> dict:
        def cell(nodes):
            return [[{"op": op, "source": src} for op, src in node] for node in nodes]

        return {
            "schema_version": SCHEMA_VERSION,
            "normal": cell(self.normal),
            "reduce": cell(self.reduce),
            "meta": {
                "n_pairs": self.n_pairs,
                "n_nodes": self.n_nodes,
                "channels": self.channels,
                "classes": self.classes,
                "space_id": self.space_id,
                "theta_checksum": self.theta_checksum,
            },
        }


# ------------------------------------------------------------------ derivation

def _probabilities(theta: np.ndarray) -> np.ndarray:
    z = theta.astype(np.float64) - theta.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def best_operator(theta_edge: np.ndarray, none_index: int) -> int:
    """Index of the largest entry excluding ``none``; lower index wins ties."""
    masked = np.asarray(theta_edge, dtype=np.float64).copy()
    masked[none_index] = -np.inf
    return int(np.argmax(masked))


def derive_cell(theta: np.ndarray, space: SearchSpace, n_nodes: int) -> Tuple[Node, ...]:
    theta = np.asarray(theta)
    topo = CellTopology(n_nodes)
    if theta.shape != (topo.num_edges, len(space)):
        raise ArchitectureError(f"θ has shape {theta.shape}, expected {(topo.num_edges, len(space))}")
    if not np.isfinite(theta).all():
        raise ArchitectureError("θ must be finite to derive a genotype")
    probs = _probabilities(theta)
    none = space.none_index
    nodes = []
    for j in range(n_nodes):
        candidates = []
        for e in topo.edges_into(j + 2):
            k = best_operator(theta[e], none)
            src = topo.edges[e][0]
            candidates.append((-probs[e, k], k, src))
        candidates.sort()
        kept = sorted(candidates[:2], key=lambda c: c[2])
        nodes.append(tuple((space.operators[k].name, src) for _, k, src in kept))
    return tuple(nodes)


def derive(theta: Union[ArchParams, Tuple[np.ndarray, np.ndarray]], space: SearchSpace, n_pairs: int = 2,
           classes: int = 4, channels: Optional[int] = None) -> Genotype:
    """Discretise θ: best non-``none`` operator per edge, top-2 incoming edges per node."""
    if isinstance(theta, ArchParams):
        normal, reduce = theta.arrays()
        checksum = theta.checksum()
    else:
        normal, reduce = (np.asarray(a) for a in theta)
        checksum = ArchParams.from_arrays(normal, reduce, requires_grad=False).checksum()
    num_edges = normal.shape[0]
    n_nodes = 1
    while CellTopology(n_nodes).num_edges < num_edges:
        n_nodes += 1
    if CellTopology(n_nodes).num_edges != num_edges:
        raise ArchitectureError(f"{num_edges} edges does not match any cell size")
    return Genotype(
        normal=derive_cell(normal, space, n_nodes),
        reduce=derive_cell(reduce, space, n_nodes),
        n_pairs=n_pairs,
        n_nodes=n_nodes,
        channels=space.channel_count if channels is None else channels,
        classes=classes,
        space_id=space.space_id,
        theta_checksum=checksum,
    )


# --------------------------------------------------------------- serialization

def serialize(genotype: Genotype) -> bytes:
    return (json.dumps(genotype.to_dict(), indent=2, sort_keys=True) + "\n").encode("utf-8")


def _require(obj, key, kind, path):
    if not isinstance(obj, dict):
        raise GenotypeError("expected an object", path)
    if key not in obj:
        raise GenotypeError(f"missing required field '{key}'", f"{path}.{key}" if path else key)
    value = obj[key]
    if kind is int and isinstance(value, bool) or not isinstance(value, kind):
        raise GenotypeError(f"expected {kind.__name__}", f"{path}.{key}" if path else key)
    return value


def _parse_cell(doc, name) -> List[List[Tuple[str, int]]]:
    nodes = _require(doc, name, list, "")
    out = []
    for j, node in enumerate(nodes):
        if not isinstance(node, list):
            raise GenotypeError("expected a list of edges", f"{name}[{j}]")
        edges = []
        for k, edge in enumerate(node):
            path = f"{name}[{j}][{k}]"
            edges.append((_require(edge, "op", str, path), _require(edge, "source", int, path)))
        out.append(edges)
    return out


def parse(data: Union[bytes, str]) -> Genotype:
    if isinstance(data, bytes):
        try:
            text = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise GenotypeError("not valid UTF-8", offset=exc.start) from None
    else:
        text = data
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GenotypeError(f"invalid JSON: {exc.msg}", offset=len(text[:exc.pos].encode("utf-8"))) from None
    version = _require(doc, "schema_version", int, "")
    if version != SCHEMA_VERSION:
        raise GenotypeError(f"unsupported schema version {version}", "schema_version")
    normal = _parse_cell(doc, "normal")
    reduce = _parse_cell(doc, "reduce")
    meta = _require(doc, "meta", dict, "")
    return Genotype(
        normal=normal,
        reduce=reduce,
        n_pairs=_require(meta, "n_pairs", int, "meta"),
        n_nodes=_require(meta, "n_nodes", int, "meta"),
        channels=_require(meta, "channels", int, "meta"),
        classes=_require(meta, "classes", int, "meta"),
        space_id=_require(meta, "space_id", str, "meta"),
        theta_checksum=meta.get("theta_checksum", ""),
    )


# ----------------------------------------------------------------- compilation

class DerivedCell(nn.Module):
    def __init__(self, nodes: Sequence[Node], channels: int, reduction: bool, reduction_prev: bool,
                 time_extent: int, rng, activation: str, cell_index: int):
        super().__init__()
        self.reduction = reduction
        self.reduction_prev = reduction_prev
        self.sources = []
        self.ops = []
        inner = -(-time_extent // 2) if reduction else time_extent
        cell_name = f"cell {cell_index} ({'reduce' if reduction else 'normal'})"
        for j, node in enumerate(nodes):
            for op_name, src in node:
                spec = OperatorSpec.parse(op_name)
                extent = time_extent if src < 2 else inner
                if not fits(spec, extent):
                    raise ArchitectureError(
                        f"{cell_name}, node {j + 2} edge from {src}: '{op_name}' spans {spec.extent[0]} "
                        f"time samples but the feature map has {extent}")
                self.ops.append(build_operator(spec, channels, reduction=reduction and src < 2, rng=rng,
                                               activation=activation))
                self.sources.append(src)
        self.n_nodes = len(nodes)

    def forward(self, s0: Tensor, s1: Tensor) -> Tensor:
        if self.reduction_prev:
            s0 = F.subsample(s0, TIME_STRIDE)
        states = [s0, s1]
        for j in range(self.n_nodes):
            a, b = 2 * j, 2 * j + 1
            states.append(add_n([self.ops[a](states[self.sources[a]]), self.ops[b](states[self.sources[b]])]))
        return add_n(states[2:])


class DerivedNet(nn.Module):
    """Standalone network built from a genotype; same stem/head layout as the supernet."""

    def __init__(self, genotype: Genotype, channels: int, classes: int, input_shape: Tuple[int, int],
                 seed: int = 0, activation: str = "elu"):
        super().__init__()
        slices, points = input_shape
        if points < 2 ** genotype.n_pairs:
            raise ArchitectureError(f"time extent {points} too short for {genotype.n_pairs} reductions")
        rng = np.random.default_rng(seed)
        self.genotype = genotype
        self.channels = channels
        self.input_shape = (slices, points)
        self.stem_conv = nn.Conv2d(channels, channels, (1, 1), rng=rng)
        self.stem_bn = nn.BatchNorm2d(channels)
        self.cells = []
        extent = points
        reduction_prev = False
        for _ in range(genotype.n_pairs):
            for reduction in (False, True):
                nodes = genotype.reduce if reduction else genotype.normal
                self.cells.append(DerivedCell(nodes, channels, reduction, reduction_prev, extent, rng, activation,
                                              len(self.cells)))
                reduction_prev = reduction
                if reduction:
                    extent = -(-extent // 2)
        self.head = nn.Linear(channels, classes, rng=rng)

    def forward(self, batch: Tensor) -> Tensor:
        if batch.ndim != 4 or batch.shape[1] != self.channels or tuple(batch.shape[2:]) != self.input_shape:
            raise ArchitectureError(
                f"expected input [B, {self.channels}, {self.input_shape[0]}, {self.input_shape[1]}], "
                f"got {list(batch.shape)}")
        s = self.stem_bn(self.stem_conv(batch))
        s0 = s1 = s
        for cell in self.cells:
            s0, s1 = s1, cell(s0, s1)
        return self.head(F.global_avg_pool(s1))


def compile_genotype(genotype: Genotype, channels: Optional[int] = None, classes: Optional[int] = None,
                     input_shape: Tuple[int, int] = (8, 400), seed: int = 0, activation: str = "elu") -> DerivedNet:
    return DerivedNet(genotype, genotype.channels if channels is None else channels,
                      genotype.classes if classes is None else classes, input_shape, seed, activation)


compile = compile_genotype  # noqa: A001 - public name


# ------------------------------------------------------------------ accounting

def count_params(network: nn.Module) -> int:
    return nn.count_parameters(network)


def count_macs(network: nn.Module, input_shape: Sequence[int]) -> int:
    """Multiply-accumulates of one sample through every conv and linear layer."""
    shape = tuple(input_shape)
    if len(shape) == 2:
        shape = (network.channels,) + shape
    was_training = network.training
    network.eval()
    try:
        with no_grad(), F.MacCounter() as counter:
            network(Tensor(np.zeros((1,) + shape, dtype=np.float32)))
    finally:
        network.train(was_training)
    return counter.total


def genotype_param_count(genotype: Genotype, channels: Optional[int] = None, classes: Optional[int] = None) -> int:
    """Closed-form parameter count of ``compile_genotype(genotype)``."""
    c = genotype.channels if channels is None else channels
    k = genotype.classes if classes is None else classes
    base = c * c + 2 * c + c * k + k
    cells = sum(param_count(OperatorSpec.parse(op), c) for cell in (genotype.normal, genotype.reduce)
                for node in cell for op, _ in node)
    return base + genotype.n_pairs * cells


def achievable_counts(space: SearchSpace, n_pairs: int, n_nodes: int, classes: int) -> Tuple[np.ndarray, np.ndarray]:
    """Exact distribution of parameter counts over all derivable genotypes.

    Returns ``(counts, weights)`` where ``weights[i]`` is the number of
    genotypes whose compiled network has ``counts[i]`` parameters.
    """
    c = space.channel_count
    base = c * c + 2 * c + c * classes + classes
    costs = [param_count(o, c) for o in space.operators if o.kind != "none"]
    step = np.gcd.reduce(np.array([x for x in costs if x] or [1]))
    slot = np.zeros(max(costs) // step + 1)
    for x in costs:
        slot[x // step] += 1
    dist = np.array([1.0])
    for _ in range(2 * n_nodes * 2):
        dist = np.convolve(dist, slot)
    edge_choices = 1
    for j in range(n_nodes):
        n_in = j + 2
        edge_choices *= n_in * (n_in - 1) // 2
    dist *= edge_choices ** 2
    support = np.nonzero(dist)[0]
    return base + n_pairs * step * support, dist[support]


def count_percentile(counts: np.ndarray, weights: np.ndarray, q: float) -> float:
    """Smallest count whose cumulative weight reaches fraction ``q``."""
    cum = np.cumsum(weights) / weights.sum()
    return float(counts[np.searchsorted(cum, q - 1e-12)])


def selection_counts(genotype: Genotype) -> Dict[str, int]:
    out: Dict[str, int] = {}
    for op in genotype.operators():
        out[op] = out.get(op, 0) + 1
    return out
