"""Neural-network primitives on :class:`~ctnas.core.tensor.Tensor`.

Images are laid out ``[B, C, H, W]``. Convolution is cross-correlation
(no kernel flip). Each primitive is a single graph node with a hand
written backward rule.
"""

from __future__ import annotations

from typing import Optional, Tuple

import numpy as np

from . import kernels
from .tensor import Tensor, make_result

Pair = Tuple[int, int]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class MacCounter:
    """Accumulates multiply-accumulate counts of conv/linear calls while active."""

    active: Optional["MacCounter"] = None

    def __init__(self):
        self.total = 0

    def __enter__(self):
        self._prev = MacCounter.active
        MacCounter.active = self
        return self

    def __exit__(self, *exc):
        MacCounter.active = self._prev
        return False


def _pair(v) -> Pair:
    if isinstance(v, int):
        return (v, v)
    v = tuple(int(a) for a in v)
    if len(v) != 2:
        raise ValueError(f"expected an int or a pair, got {v}")
    return v


def conv_output_size(size: int, kernel: int, stride: int, dilation: int, padding: int) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def _pad(x: np.ndarray, padding: Pair, value: float = 0.0) -> np.ndarray:
    ph, pw = padding
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=value)


def _unpad(x: np.ndarray, padding: Pair) -> np.ndarray:
    ph, pw = padding
    h, w = x.shape[2:]
    return x[:, :, ph:h - ph, pw:w - pw]


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride=(1, 1),
    dilation=(1, 1),
    padding=(0, 0),
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation with groups. ``weight``: ``[O, C/groups, kh, kw]``."""
    stride, dilation, padding = _pair(stride), _pair(dilation), _pair(padding)
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects a 4-D input [B,C,H,W], got shape {x.shape}")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d expects a 4-D weight [O,C/g,kh,kw], got shape {weight.shape}")
    b, c, h, w = x.shape
    o, cg, kh, kw = weight.shape
    if groups < 1 or c % groups or o % groups:
        raise ShapeError(f"channels in={c}, out={o} not divisible by groups={groups}")
    if cg != c // groups:
        raise ShapeError(
            f"weight expects {cg} input channels per group, input provides {c // groups} "
            f"(C={c}, groups={groups})"
        )
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"bias shape {bias.shape} does not match {o} output channels")
    ho = conv_output_size(h, kh, stride[0], dilation[0], padding[0])
    wo = conv_output_size(w, kw, stride[1], dilation[1], padding[1])
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"conv2d output would be empty ({ho}x{wo}) for input {h}x{w}, kernel {kh}x{kw}, "
            f"dilation {dilation}, padding {padding}, stride {stride}"
        )

    if MacCounter.active is not None:
        MacCounter.active.total += b * o * ho * wo * kh * kw * cg
    wd = weight.data.astype(x.dtype, copy=False)
    depthwise = groups == c and o == c and cg == 1
    pointwise = kh == 1 and kw == 1 and groups == 1 and padding == (0, 0)
    xp = x.data if depthwise else _pad(x.data, padding)

    if depthwise:
        out = kernels.depthwise_forward(x.data, wd[:, 0], stride, dilation, padding, (ho, wo))
    elif pointwise:
        xs = xp[:, :, ::stride[0], ::stride[1]][:, :, :ho, :wo]
        out = np.matmul(wd[:, :, 0, 0], xs.reshape(b, c, ho * wo)).reshape(b, o, ho, wo)
    else:
        out = _grouped_forward(xp, wd, stride, dilation, groups, (ho, wo))
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def backward(g):
        need_x = x.requires_grad
        need_w = weight.requires_grad
        gx = gw = gb = None
        if depthwise:
            gx, gw0 = kernels.depthwise_backward(xp, wd[:, 0], g, stride, dilation, padding, need_x, need_w)
            if need_w:
                gw = gw0[:, None]
        elif pointwise:
            g2 = g.reshape(b, o, ho * wo)
            if need_w:
                xs = xp[:, :, ::stride[0], ::stride[1]][:, :, :ho, :wo].reshape(b, c, ho * wo)
                gw = np.einsum("boq,bcq->oc", g2, xs)[:, :, None, None]
            if need_x:
                gxs = np.matmul(wd[:, :, 0, 0].T, g2).reshape(b, c, ho, wo)
                if stride == (1, 1):
                    gx = gxs
                else:
                    gx = np.zeros_like(x.data)
                    gx[:, :, ::stride[0], ::stride[1]][:, :, :ho, :wo] = gxs
        else:
            gxp, gw = _grouped_backward(xp, wd, g, stride, dilation, groups, need_x, need_w)
            if need_x:
                gx = _unpad(gxp, padding)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if gw is not None:
            gw = gw.astype(weight.dtype, copy=False)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward)


def _taps(xp, i, j, stride, dilation, out_hw):
    r0, c0 = i * dilation[0], j * dilation[1]
    ho, wo = out_hw
    return (slice(r0, r0 + stride[0] * (ho - 1) + 1, stride[0]),
            slice(c0, c0 + stride[1] * (wo - 1) + 1, stride[1]))


def _grouped_forward(xp, w, stride, dilation, groups, out_hw):
    b, c = xp.shape[:2]
    o, cg, kh, kw = w.shape
    og = o // groups
    ho, wo = out_hw
    xg = xp.reshape(b, groups, cg, *xp.shape[2:])
    wg = w.reshape(groups, og, cg, kh, kw)
    out = np.zeros((b, groups, og, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            rs, cs = _taps(xp, i, j, stride, dilation, out_hw)
            out += np.einsum("goc,bgchw->bgohw", wg[:, :, :, i, j], xg[:, :, :, rs, cs], optimize=True)
    return out.reshape(b, o, ho, wo)


def _grouped_backward(xp, w, g, stride, dilation, groups, need_x, need_w):
    b, c = xp.shape[:2]
    o, cg, kh, kw = w.shape
    og = o // groups
    out_hw = g.shape[2:]
    xg = xp.reshape(b, groups, cg, *xp.shape[2:])
    wg = w.reshape(groups, og, cg, kh, kw)
    gg = g.reshape(b, groups, og, *out_hw)
    gx = np.zeros_like(xg) if need_x else None
    gw = np.zeros_like(wg) if need_w else None
    for i in range(kh):
        for j in range(kw):
            rs, cs = _taps(xp, i, j, stride, dilation, out_hw)
            if need_w:
                gw[:, :, :, i, j] = np.einsum("bgohw,bgchw->goc", gg, xg[:, :, :, rs, cs], optimize=True)
            if need_x:
                gx[:, :, :, rs, cs] += np.einsum("goc,bgohw->bgchw", wg[:, :, :, i, j], gg, optimize=True)
    if need_x:
        gx = gx.reshape(xp.shape)
    if need_w:
        gw = gw.reshape(w.shape)
    return gx, gw


def maxpool2d(x: Tensor, kernel, stride=None, padding=(0, 0)) -> Tensor:
    """Max over windows; gradient goes to the first maximal element of each window."""
    kernel = _pair(kernel)
    stride = kernel if stride is None else _pair(stride)
    padding = _pair(padding)
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects [B,C,H,W], got {x.shape}")
    h, w = x.shape[2:]
    if kernel[0] > h + 2 * padding[0] or kernel[1] > w + 2 * padding[1]:
        raise ShapeError(f"pool kernel {kernel} larger than padded input {h}x{w} (padding {padding})")
    ho = conv_output_size(h, kernel[0], stride[0], 1, padding[0])
    wo = conv_output_size(w, kernel[1], stride[1], 1, padding[1])
    out, arg = kernels.maxpool_forward(x.data, kernel, stride, padding, (ho, wo))

    def backward(g):
        return (kernels.maxpool_backward(g, arg, x.shape, kernel, stride, padding),)

    return make_result(out, (x,), backward)


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    out = kernels.elu_forward(x.data, alpha)
    return make_result(out, (x,), lambda g: (kernels.elu_backward(x.data, out, g, alpha),))


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    d = x.data
    pos = d > 0
    scale = np.where(pos, 1.0, slope).astype(d.dtype, copy=False)
    return make_result(d * scale, (x,), lambda g: (g * scale,))


def relu(x: Tensor) -> Tensor:
    return leaky_relu(x, 0.0)


def batch_norm(
    x: Tensor,
    gamma: Optional[Tensor],
    beta: Optional[Tensor],
    running_mean: Optional[np.ndarray] = None,
    running_var: Optional[np.ndarray] = None,
    training: bool = True,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalisation over (B, H, W) of a ``[B, C, H, W]`` input.

    In training mode the batch statistics are used and the running buffers
    (when given) are updated in place with ``momentum``; the running
    variance uses the unbiased estimate. In eval mode the running buffers
    are used.
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm expects [B,C,H,W], got {x.shape}")
    c = x.shape[1]
    for name, t in (("gamma", gamma), ("beta", beta)):
        if t is not None and t.shape != (c,):
            raise ShapeError(f"{name} shape {t.shape} does not match channel count {c}")
    d = x.data
    n = d.size // c
    if training:
        mu, var = kernels.batchnorm_stats(d)
        if running_mean is not None:
            running_mean *= 1 - momentum
            running_mean += momentum * mu
        if running_var is not None:
            running_var *= 1 - momentum
            running_var += momentum * var * (n / max(n - 1, 1))
    else:
        if running_mean is None or running_var is None:
            raise ValueError("eval-mode batch_norm needs running statistics")
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(np.asarray(var, dtype=np.float64) + eps)
    gd = gamma.data.astype(np.float64) if gamma is not None else np.ones(c)
    bd = beta.data.astype(np.float64) if beta is not None else np.zeros(c)
    out, xhat = kernels.batchnorm_forward(d, mu, inv, gd, bd)

    def backward(g):
        gx, gg, gb = kernels.batchnorm_backward(g, xhat, inv, gd, training)
        if gamma is not None:
            gg = gg.astype(gamma.dtype)
        if beta is not None:
            gb = gb.astype(beta.dtype)
        return gx, gg, gb

    parents = [x]
    parents.append(gamma if gamma is not None else Tensor(np.zeros(0)))
    parents.append(beta if beta is not None else Tensor(np.zeros(0)))
    return make_result(out, parents, backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    d = x.data
    if not np.all(np.isfinite(d) | (d == -np.inf)):
        raise FloatingPointError("softmax input contains NaN or +inf")
    z = d - d.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return make_result(p, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    d = x.data
    z = d - d.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), backward)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [B, K] logits, got {logits.shape}")
    bsz, k = logits.shape
    if bsz == 0:
        raise ValueError("cross_entropy of an empty batch")
    if labels.shape != (bsz,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {bsz}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    d = logits.data
    z = d - d.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(bsz)
    loss = -logp[rows, labels].mean()

    def backward(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * (g / bsz),)

    return make_result(np.asarray(loss, dtype=d.dtype), (logits,), backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped ``[out, in]``."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input features {x.shape[-1]} != weight in-features {weight.shape[1]}")
    if MacCounter.active is not None:
        MacCounter.active.total += int(np.prod(x.shape[:-1])) * weight.shape[0] * weight.shape[1]
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.reshape(-1, g.shape[-1]).T @ x.data.reshape(-1, x.shape[-1]) if weight.requires_grad else None
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """``[B, C, H, W]`` -> ``[B, C]``."""
    b, c, h, w = x.shape
    scale = 1.0 / (h * w)

    def backward(g):
        return (np.broadcast_to((g * scale)[:, :, None, None], x.shape).copy(),)

    return make_result(x.data.mean(axis=(2, 3)), (x,), backward)


def subsample(x: Tensor, stride) -> Tensor:
    """Strided subsampling ``x[:, :, ::sh, ::sw]``; output extent is ceil(H/sh)."""
    sh, sw = _pair(stride)
    out = np.ascontiguousarray(x.data[:, :, ::sh, ::sw])

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, :, ::sh, ::sw] = g
        return (gx,)

    return make_result(out, (x,), backward)


def weighted_sum(weights: Tensor, tensors) -> Tensor:
    """``sum_k weights[k] * tensors[k]``; entries of ``tensors`` may be None (zero maps)."""
    wd = weights.data
    live = [(k, t) for k, t in enumerate(tensors) if t is not None]
    if not live:
        raise ValueError("weighted_sum needs at least one non-zero operand")
    out = live[0][1].data * wd[live[0][0]]
    for k, t in live[1:]:
        out = out + t.data * wd[k]

    def backward(g):
        gw = None
        if weights.requires_grad:
            gw = np.zeros_like(wd)
            for k, t in live:
                gw[k] = np.vdot(g, t.data)
        return (gw,) + tuple(g * wd[k] if t.requires_grad else None for k, t in live)

    return make_result(out, (weights,) + tuple(t for _, t in live), backward)


def zeros_like_strided(x: Tensor, stride) -> Tensor:
    sh, sw = _pair(stride)
    b, c, h, w = x.shape
    return Tensor(np.zeros((b, c, -(-h // sh), -(-w // sw)), dtype=x.dtype))
