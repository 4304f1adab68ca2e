"""Pure-numpy reference kernels.

Each convolution/pooling kernel pads explicitly and loops over kernel
taps, doing one vectorised multiply-add per tap. The compiled module
``_kernels_ext`` exposes the same functions with the same signatures and
handles padding implicitly.
"""

import numpy as np


def _pad(x, padding, value=0.0):
    ph, pw = padding
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=value)


def _unpad(x, padding):
    ph, pw = padding
    h, w = x.shape[2:]
    return x[:, :, ph:h - ph, pw:w - pw]


def _window(i, j, stride, dilation, out_hw):
    sh, sw = stride
    ho, wo = out_hw
    r0, c0 = i * dilation[0], j * dilation[1]
    return slice(r0, r0 + sh * (ho - 1) + 1, sh), slice(c0, c0 + sw * (wo - 1) + 1, sw)


def depthwise_forward(x, w, stride, dilation, padding, out_hw):
    """Per-channel correlation. ``x``: [B,C,H,W], ``w``: [C,kh,kw]."""
    xp = _pad(x, padding)
    b, c = x.shape[:2]
    kh, kw = w.shape[1:]
    out = np.zeros((b, c) + tuple(out_hw), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            rs, cs = _window(i, j, stride, dilation, out_hw)
            out += xp[:, :, rs, cs] * w[None, :, i, j, None, None]
    return out


def depthwise_backward(x, w, grad, stride, dilation, padding, need_input=True, need_weight=True):
    """Returns (grad wrt input, grad wrt weight); either may be None."""
    xp = _pad(x, padding)
    kh, kw = w.shape[1:]
    out_hw = grad.shape[2:]
    gx = np.zeros_like(xp) if need_input else None
    gw = np.zeros_like(w) if need_weight else None
    for i in range(kh):
        for j in range(kw):
            rs, cs = _window(i, j, stride, dilation, out_hw)
            if need_weight:
                gw[:, i, j] = np.einsum("bchw,bchw->c", xp[:, :, rs, cs], grad)
            if need_input:
                gx[:, :, rs, cs] += grad * w[None, :, i, j, None, None]
    if need_input:
        gx = np.ascontiguousarray(_unpad(gx, padding))
    return gx, gw


def maxpool_forward(x, kernel, stride, padding, out_hw):
    """Window maxima plus the flat tap index of the winner (first index on ties)."""
    xp = _pad(x, padding, value=-np.inf)
    kh, kw = kernel
    best = None
    arg = np.zeros((x.shape[0], x.shape[1]) + tuple(out_hw), dtype=np.int32)
    for i in range(kh):
        for j in range(kw):
            rs, cs = _window(i, j, stride, (1, 1), out_hw)
            tap = xp[:, :, rs, cs]
            if best is None:
                best = tap.copy()
                continue
            better = tap > best
            best = np.maximum(best, tap)
            arg += better * (i * kw + j - arg)
    return best, arg


def maxpool_backward(grad, arg, input_shape, kernel, stride, padding):
    kh, kw = kernel
    ph, pw = padding
    out_hw = grad.shape[2:]
    b, c, h, w = input_shape
    gx = np.zeros((b, c, h + 2 * ph, w + 2 * pw), dtype=grad.dtype)
    for i in range(kh):
        for j in range(kw):
            sel = arg == i * kw + j
            if not sel.any():
                continue
            rs, cs = _window(i, j, stride, (1, 1), out_hw)
            gx[:, :, rs, cs] += grad * sel
    return np.ascontiguousarray(_unpad(gx, padding))


# Elementwise kernels avoid np.where: data-dependent selects mispredict badly on noisy signals.

def elu_forward(x, alpha):
    neg = np.minimum(x, 0)
    out = np.expm1(neg)
    if alpha != 1.0:
        out *= x.dtype.type(alpha)
    out += np.maximum(x, 0)
    return out


def elu_backward(x, out, grad, alpha):
    slope = np.exp(np.minimum(x, 0))
    if alpha != 1.0:
        slope *= x.dtype.type(alpha)
        slope += (x > 0) * x.dtype.type(1.0 - alpha)
    slope *= grad
    return slope


def batchnorm_stats(x):
    """Per-channel mean and biased variance over (B, H, W), accumulated in float64."""
    xd = x.astype(np.float64, copy=False)
    return xd.mean(axis=(0, 2, 3)), xd.var(axis=(0, 2, 3))


def batchnorm_forward(x, mean, inv_std, gamma, beta):
    """Returns (out, xhat)."""
    xhat = (x - mean.astype(x.dtype)[None, :, None, None]) * inv_std.astype(x.dtype)[None, :, None, None]
    out = xhat * gamma.astype(x.dtype)[None, :, None, None] + beta.astype(x.dtype)[None, :, None, None]
    return out, xhat


def batchnorm_backward(grad, xhat, inv_std, gamma, training):
    """Returns (grad input, grad gamma, grad beta)."""
    ggamma = np.einsum("bchw,bchw->c", grad.astype(np.float64), xhat.astype(np.float64))
    gbeta = grad.sum(axis=(0, 2, 3), dtype=np.float64)
    n = grad.size // grad.shape[1]
    scale = (gamma * inv_std).astype(grad.dtype)[None, :, None, None]
    if training:
        gx = (grad - (gbeta / n).astype(grad.dtype)[None, :, None, None]
              - xhat * (ggamma / n).astype(grad.dtype)[None, :, None, None]) * scale
    else:
        gx = grad * scale
    return gx.astype(grad.dtype, copy=False), ggamma, gbeta
