"""Candidate operators, their construction, and normalised resource costs.

Operator names follow the ``time x slices`` convention: ``sep 7x1`` spans
seven samples in time and one slice. Feature maps inside the network are
laid out ``[B, C, slices, time]`` so the long time axis is contiguous in
memory; :func:`layout_kernel` converts a named kernel to that layout.
"""

from __future__ import annotations

import contextlib
import re
import threading
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .core import functional as F
from .core import nn
from .core.tensor import Tensor

KINDS = ("max_pool", "sep_conv", "dil_conv", "skip", "none")

POOL_KERNELS = [(3, 3), (3, 1), (5, 1), (1, 3)]
CONV_KERNELS = [(3, 1), (5, 1), (7, 1), (11, 1), (17, 1), (3, 3), (5, 5), (7, 7), (33, 3), (17, 3),
                (1, 3), (1, 5), (1, 7), (1, 11)]
DILATION = 2

_PREFIX = {"max_pool": "maxpool", "sep_conv": "sep", "dil_conv": "dil"}
_KIND_OF = {v: k for k, v in _PREFIX.items()}


class SearchSpaceError(ValueError):
    pass


@dataclass(frozen=True)
class OperatorSpec:
    kind: str
    kernel: Tuple[int, int] = (1, 1)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SearchSpaceError(f"unknown operator kind {self.kind!r}")
        allowed = {"max_pool": POOL_KERNELS, "sep_conv": CONV_KERNELS, "dil_conv": CONV_KERNELS}
        if self.kind in allowed and tuple(self.kernel) not in allowed[self.kind]:
            raise SearchSpaceError(f"kernel {self.kernel} not available for {self.kind}")
        object.__setattr__(self, "kernel", tuple(int(k) for k in self.kernel))

    @property
    def dilation(self) -> int:
        return DILATION if self.kind == "dil_conv" else 1

    @property
    def extent(self) -> Tuple[int, int]:
        """Receptive extent of one application along (time, slices)."""
        d = self.dilation
        return tuple(d * (k - 1) + 1 for k in self.kernel)

    @property
    def name(self) -> str:
        if self.kind in ("skip", "none"):
            return self.kind
        return f"{_PREFIX[self.kind]} {self.kernel[0]}x{self.kernel[1]}"

    @classmethod
    def parse(cls, name: str) -> "OperatorSpec":
        text = name.strip().lower()
        if text in ("skip", "skip_connect", "skip connection"):
            return cls("skip")
        if text == "none":
            return cls("none")
        m = re.fullmatch(r"(max_?pool|sep(?:_conv)?|dil(?:_conv)?)[ _]+(\d+)\s*[x*\u00d7]\s*(\d+)", text)
        if not m:
            raise SearchSpaceError(f"cannot parse operator name {name!r}")
        prefix = m.group(1).replace("_conv", "").replace("_", "")
        return cls(_KIND_OF[prefix], (int(m.group(2)), int(m.group(3))))

    def __str__(self) -> str:
        return self.name


DESK_OPERATORS = ("none", "skip", "maxpool 3x1", "maxpool 3x3", "sep 3x1", "sep 3x3", "dil 3x1", "dil 1x7")


def full_operator_names() -> List[str]:
    names = ["none", "skip"]
    names += [f"maxpool {a}x{b}" for a, b in POOL_KERNELS]
    names += [f"sep {a}x{b}" for a, b in CONV_KERNELS]
    names += [f"dil {a}x{b}" for a, b in CONV_KERNELS]
    return names


@dataclass(frozen=True)
class SearchSpace:
    operators: Tuple[OperatorSpec, ...]
    channel_count: int
    space_id: str = "custom"

    def __post_init__(self):
        ops = tuple(o if isinstance(o, OperatorSpec) else OperatorSpec.parse(o) for o in self.operators)
        object.__setattr__(self, "operators", ops)
        kinds = [o.kind for o in ops]
        if kinds.count("skip") != 1 or kinds.count("none") != 1:
            raise SearchSpaceError("a search space needs exactly one 'skip' and one 'none' operator")
        if len(set(ops)) != len(ops):
            raise SearchSpaceError("duplicate operators in search space")
        if self.channel_count < 1:
            raise SearchSpaceError("channel_count must be >= 1")

    @classmethod
    def from_names(cls, names: Sequence[str], channels: int, space_id: str = "custom") -> "SearchSpace":
        return cls(tuple(OperatorSpec.parse(n) for n in names), channels, space_id)

    @classmethod
    def named(cls, space_id: str, channels: int) -> "SearchSpace":
        if space_id == "desk":
            return cls.from_names(DESK_OPERATORS, channels, "desk")
        if space_id == "full":
            return cls.from_names(full_operator_names(), channels, "full")
        raise SearchSpaceError(f"unknown search space id {space_id!r} (expected 'desk' or 'full')")

    @property
    def names(self) -> List[str]:
        return [o.name for o in self.operators]

    def __len__(self) -> int:
        return len(self.operators)

    def index(self, name: str) -> int:
        spec = OperatorSpec.parse(name)
        return self.operators.index(spec)

    @property
    def skip_index(self) -> int:
        return [o.kind for o in self.operators].index("skip")

    @property
    def none_index(self) -> int:
        return [o.kind for o in self.operators].index("none")


# ---------------------------------------------------------------- operators

def _activation(name: str) -> nn.Module:
    if name == "elu":
        return nn.ELU()
    if name == "leaky_relu":
        return nn.LeakyReLU(0.01)
    raise SearchSpaceError(f"unknown activation {name!r}")


TIME_STRIDE = (1, 2)


def layout_kernel(kernel: Tuple[int, int]) -> Tuple[int, int]:
    """(time, slices) kernel -> (slices, time) kernel for ``[B, C, slices, time]`` maps."""
    return (kernel[1], kernel[0])


def _same_padding(kernel, dilation) -> Tuple[int, int]:
    return tuple(dilation * (k - 1) // 2 for k in kernel)


_cache = threading.local()


@contextlib.contextmanager
def shared_activations():
    """Reuse one activation output per (input tensor, activation) inside the block.

    Every conv operator on a mixed edge activates the same input first;
    sharing the result leaves values and gradients unchanged.
    """
    prev = getattr(_cache, "table", None)
    _cache.table = {}
    try:
        yield
    finally:
        _cache.table = prev


def _activate(act: nn.Module, x: Tensor) -> Tensor:
    table = getattr(_cache, "table", None)
    if table is None:
        return act(x)
    key = (id(x), type(act), getattr(act, "slope", None))
    hit = table.get(key)
    if hit is None or hit[0] is not x:
        hit = (x, act(x))
        table[key] = hit
    return hit[1]


class ConvUnit(nn.Module):
    """activation -> depthwise conv -> pointwise 1x1 -> batch norm."""

    def __init__(self, channels, kernel, stride, dilation, activation, rng):
        super().__init__()
        self.act = _activation(activation)
        self.depthwise = nn.Conv2d(channels, channels, kernel, stride=stride, dilation=(dilation, dilation),
                                   padding=_same_padding(kernel, dilation), groups=channels, rng=rng)
        self.pointwise = nn.Conv2d(channels, channels, (1, 1), rng=rng)
        self.bn = nn.BatchNorm2d(channels)

    def forward(self, x):
        return self.bn(self.pointwise(self.depthwise(_activate(self.act, x))))


class SepConv(nn.Module):
    def __init__(self, channels, kernel, stride, activation, rng):
        super().__init__()
        self.first = ConvUnit(channels, kernel, stride, 1, activation, rng)
        self.second = ConvUnit(channels, kernel, (1, 1), 1, activation, rng)

    def forward(self, x):
        return self.second(self.first(x))


class DilConv(nn.Module):
    def __init__(self, channels, kernel, stride, activation, rng):
        super().__init__()
        self.unit = ConvUnit(channels, kernel, stride, DILATION, activation, rng)

    def forward(self, x):
        return self.unit(x)


class PoolBN(nn.Module):
    def __init__(self, channels, kernel, stride):
        super().__init__()
        self.pool = nn.MaxPool2d(kernel, stride=stride, padding=_same_padding(kernel, 1))
        self.bn = nn.BatchNorm2d(channels)

    def forward(self, x):
        return self.bn(self.pool(x))


class Identity(nn.Module):
    def forward(self, x):
        return x


class StridedSkip(nn.Module):
    """Parameter-free reduction: activation, then every ``stride``-th sample."""

    def __init__(self, stride, activation="elu"):
        super().__init__()
        self.stride = stride
        self.act = _activation(activation)

    def forward(self, x):
        return F.subsample(_activate(self.act, x), self.stride)


class Zero(nn.Module):
    is_zero = True

    def __init__(self, stride):
        super().__init__()
        self.stride = stride

    def forward(self, x):
        return F.zeros_like_strided(x, self.stride)


def build_operator(spec: OperatorSpec, channels: int, reduction: bool = False,
                   rng: Optional[np.random.Generator] = None, activation: str = "elu") -> nn.Module:
    """Instantiate ``spec`` for ``[B, C, slices, time]`` maps.

    ``reduction`` halves the time axis (ceil division); the slice axis is
    never downsampled.
    """
    if channels < 1:
        raise SearchSpaceError("channels must be >= 1")
    if not isinstance(spec, OperatorSpec):
        spec = OperatorSpec.parse(spec)
    rng = rng if rng is not None else np.random.default_rng(0)
    stride = TIME_STRIDE if reduction else (1, 1)
    kernel = layout_kernel(spec.kernel)
    if spec.kind == "sep_conv":
        return SepConv(channels, kernel, stride, activation, rng)
    if spec.kind == "dil_conv":
        return DilConv(channels, kernel, stride, activation, rng)
    if spec.kind == "max_pool":
        return PoolBN(channels, kernel, stride)
    if spec.kind == "skip":
        return StridedSkip(stride, activation) if reduction else Identity()
    if spec.kind == "none":
        return Zero(stride)
    raise SearchSpaceError(f"unknown operator kind {spec.kind!r}")  # pragma: no cover


def param_count(spec: OperatorSpec, channels: int) -> int:
    """Learnable scalars of ``build_operator(spec, channels)`` (BN affine included)."""
    if not isinstance(spec, OperatorSpec):
        spec = OperatorSpec.parse(spec)
    c = channels
    kh, kw = spec.kernel
    unit = c * kh * kw + c * c + 2 * c
    if spec.kind == "sep_conv":
        return 2 * unit
    if spec.kind == "dil_conv":
        return unit
    if spec.kind == "max_pool":
        return 2 * c
    return 0


def fits(spec: OperatorSpec, time_extent: int) -> bool:
    """Whether the operator's temporal extent fits a feature map of this length."""
    return spec.extent[0] <= time_extent


@dataclass(frozen=True)
class CostModel:
    raw_params: np.ndarray
    sigma: np.ndarray
    names: Tuple[str, ...] = field(default=())

    @property
    def max_raw(self) -> float:
        return float(self.raw_params.max()) if self.raw_params.size else 0.0


def normalized_costs(space: SearchSpace, channels: Optional[int] = None) -> CostModel:
    ops = space.operators
    if not ops:
        raise SearchSpaceError("empty search space")
    c = space.channel_count if channels is None else channels
    raw = np.array([param_count(o, c) for o in ops], dtype=np.float64)
    top = raw.max()
    sigma = raw / top if top > 0 else np.zeros_like(raw)
    raw.setflags(write=False)
    sigma.setflags(write=False)
    return CostModel(raw, sigma, tuple(o.name for o in ops))


def costs_from_raw(raw: Sequence[float], names: Sequence[str] = ()) -> CostModel:
    raw = np.asarray(raw, dtype=np.float64)
    top = raw.max() if raw.size else 0.0
    sigma = raw / top if top > 0 else np.zeros_like(raw)
    return CostModel(raw, sigma, tuple(names))
