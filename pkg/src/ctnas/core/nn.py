"""Minimal module system: parameter containers, layers, and named traversal."""

from __future__ import annotations

import math
from collections import OrderedDict
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import functional as F
from .tensor import Tensor, get_default_dtype


class Module:
    """Base class. Sub-modules and parameters are discovered from attributes."""

    def __init__(self):
        self.training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    def _children(self) -> List[Tuple[str, "Module"]]:
        out = []
        for name, value in vars(self).items():
            if isinstance(value, Module):
                out.append((name, value))
            elif isinstance(value, (list, tuple)):
                for i, v in enumerate(value):
                    if isinstance(v, Module):
                        out.append((f"{name}.{i}", v))
        return out

    def _own_parameters(self) -> List[Tuple[str, Tensor]]:
        return [(n, getattr(self, n)) for n in getattr(self, "_param_names", ())
                if getattr(self, n) is not None]

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, p in self._own_parameters():
            yield prefix + name, p
        for name, child in self._children():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name in getattr(self, "_buffer_names", ()):
            yield prefix + name, getattr(self, name)
        for name, child in self._children():
            yield from child.named_buffers(prefix + name + ".")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self._children():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict()
        for name, p in self.named_parameters():
            state[name] = p.data
        for name, b in self.named_buffers():
            state[name] = b
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = [k for k in list(params) + list(buffers) if k not in state]
        if missing:
            raise KeyError(f"state is missing entries: {missing[:5]}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=p.dtype)
        for name, b in buffers.items():
            b[...] = state[name]


def _param(data: np.ndarray) -> Tensor:
    return Tensor(data.astype(get_default_dtype()), requires_grad=True)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel, stride=(1, 1), padding=(0, 0),
                 dilation=(1, 1), groups: int = 1, bias: bool = False,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng()
        kh, kw = F._pair(kernel)
        self.stride, self.padding, self.dilation = F._pair(stride), F._pair(padding), F._pair(dilation)
        self.groups = groups
        self.kernel = (kh, kw)
        fan_in = in_ch // groups * kh * kw
        bound = 1.0 / math.sqrt(fan_in)
        self.weight = _param(rng.uniform(-bound, bound, size=(out_ch, in_ch // groups, kh, kw)))
        self.bias = _param(rng.uniform(-bound, bound, size=(out_ch,))) if bias else None
        self._param_names = ("weight", "bias") if bias else ("weight",)

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.dilation, self.padding, self.groups)


class BatchNorm2d(Module):
    def __init__(self, channels: int, affine: bool = True, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.affine = affine
        self.gamma = _param(np.ones(channels)) if affine else None
        self.beta = _param(np.zeros(channels)) if affine else None
        self.running_mean = np.zeros(channels, dtype=np.float64)
        self.running_var = np.ones(channels, dtype=np.float64)
        self._param_names = ("gamma", "beta") if affine else ()
        self._buffer_names = ("running_mean", "running_var")

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            training=self.training, momentum=self.momentum, eps=self.eps)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng()
        bound = 1.0 / math.sqrt(in_features)
        self.weight = _param(rng.uniform(-bound, bound, size=(out_features, in_features)))
        self.bias = _param(rng.uniform(-bound, bound, size=(out_features,))) if bias else None
        self._param_names = ("weight", "bias") if bias else ("weight",)

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class ELU(Module):
    def forward(self, x: Tensor) -> Tensor:
        return F.elu(x)


class LeakyReLU(Module):
    def __init__(self, slope: float = 0.01):
        super().__init__()
        self.slope = slope

    def forward(self, x: Tensor) -> Tensor:
        return F.leaky_relu(x, self.slope)


class MaxPool2d(Module):
    def __init__(self, kernel, stride=None, padding=(0, 0)):
        super().__init__()
        self.kernel = F._pair(kernel)
        self.stride = self.kernel if stride is None else F._pair(stride)
        self.padding = F._pair(padding)

    def forward(self, x: Tensor) -> Tensor:
        return F.maxpool2d(x, self.kernel, self.stride, self.padding)


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x


def count_parameters(module: Module) -> int:
    return int(sum(p.size for p in module.parameters()))
