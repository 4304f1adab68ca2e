"""Optimizers and learning-rate schedules used by search and retraining."""

from __future__ import annotations

import math
from typing import List, Sequence

import numpy as np

from .tensor import Tensor


class SGD:
    """Momentum SGD with optional weight decay and gradient-norm clipping."""

    def __init__(self, params: Sequence[Tensor], lr: float = 0.01, momentum: float = 0.9,
                 weight_decay: float = 0.0, grad_clip: float = 0.0):
        self.params: List[Tensor] = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.buffers = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        scale = 1.0
        if self.grad_clip > 0:
            norm = math.sqrt(sum(float(np.vdot(p.grad, p.grad)) for p in self.params if p.grad is not None))
            if norm > self.grad_clip:
                scale = self.grad_clip / (norm + 1e-12)
        for p, buf in zip(self.params, self.buffers):
            if p.grad is None:
                continue
            g = p.grad * scale
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            buf *= self.momentum
            buf += g
            p.data = p.data - self.lr * buf

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state(self) -> dict:
        return {"lr": self.lr, "buffers": [b.copy() for b in self.buffers]}


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 0.01, betas=(0.5, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params: List[Tensor] = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state(self) -> dict:
        return {"lr": self.lr, "t": self.t, "m": [a.copy() for a in self.m], "v": [a.copy() for a in self.v]}


def cosine_lr(step: int, total: int, lr_max: float, lr_min: float) -> float:
    """Cosine decay from ``lr_max`` at step 0 to ``lr_min`` at ``total``."""
    if total <= 0:
        return lr_max
    frac = min(max(step / total, 0.0), 1.0)
    return lr_min + 0.5 * (lr_max - lr_min) * (1 + math.cos(math.pi * frac))


def multistep_lr(step: int, lr0: float, milestones: Sequence[int], gamma: float = 0.5) -> float:
    passed = sum(1 for m in milestones if step >= m)
    return lr0 * gamma ** passed
