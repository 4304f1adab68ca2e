# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: depthwise convolution, max pooling, batch norm.

Loops are parallel over (batch, channel) planes, or over channels when a
reduction runs across the batch, so each output element is accumulated in
the same order whatever the thread count.
"""

import numpy as np
cimport numpy as cnp
from cython.parallel cimport prange
from libc.math cimport INFINITY

ctypedef fused real:
    float
    double

cnp.import_array()

cdef int _num_threads = 1


def set_num_threads(int n):
    global _num_threads
    _num_threads = n if n > 0 else 1


def get_num_threads():
    return _num_threads


cdef inline Py_ssize_t _floordiv(Py_ssize_t a, Py_ssize_t b) noexcept nogil:
    if a >= 0:
        return a // b
    return -((-a + b - 1) // b)


cdef inline Py_ssize_t _ceildiv(Py_ssize_t a, Py_ssize_t b) noexcept nogil:
    return -_floordiv(-a, b)


cdef inline Py_ssize_t _lo(Py_ssize_t off, Py_ssize_t s) noexcept nogil:
    # first output index whose input index o*s + off is >= 0
    cdef Py_ssize_t v = _ceildiv(-off, s)
    return v if v > 0 else 0


cdef inline Py_ssize_t _hi(Py_ssize_t off, Py_ssize_t s, Py_ssize_t n, Py_ssize_t nout) noexcept nogil:
    # one past the last output index whose input index is < n
    cdef Py_ssize_t v = _floordiv(n - 1 - off, s) + 1
    return v if v < nout else nout


# ----------------------------------------------------------------- depthwise

cdef void _dw_fwd(real[:, :, :, ::1] x, real[:, :, ::1] w, real[:, :, :, ::1] out,
                  int sh, int sw, int dh, int dw, int ph, int pw, int nthreads) noexcept nogil:
    cdef Py_ssize_t B = out.shape[0], C = out.shape[1], Ho = out.shape[2], Wo = out.shape[3]
    cdef Py_ssize_t H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t kh = w.shape[1], kw = w.shape[2]
    cdef Py_ssize_t plane, b, c, i, j, y, xo, y0, y1, x0, x1, oy, ox
    cdef real wv
    for plane in prange(B * C, num_threads=nthreads, schedule="static"):
        b = plane // C
        c = plane % C
        for i in range(kh):
            oy = i * dh - ph
            y0 = _lo(oy, sh)
            y1 = _hi(oy, sh, H, Ho)
            for j in range(kw):
                ox = j * dw - pw
                x0 = _lo(ox, sw)
                x1 = _hi(ox, sw, W, Wo)
                wv = w[c, i, j]
                for y in range(y0, y1):
                    for xo in range(x0, x1):
                        out[b, c, y, xo] += wv * x[b, c, y * sh + oy, xo * sw + ox]


cdef void _dw_bwd_input(real[:, :, :, ::1] g, real[:, :, ::1] w, real[:, :, :, ::1] gx,
                        int sh, int sw, int dh, int dw, int ph, int pw, int nthreads) noexcept nogil:
    cdef Py_ssize_t B = g.shape[0], C = g.shape[1], Ho = g.shape[2], Wo = g.shape[3]
    cdef Py_ssize_t H = gx.shape[2], W = gx.shape[3]
    cdef Py_ssize_t kh = w.shape[1], kw = w.shape[2]
    cdef Py_ssize_t plane, b, c, i, j, y, xo, y0, y1, x0, x1, oy, ox
    cdef real wv
    for plane in prange(B * C, num_threads=nthreads, schedule="static"):
        b = plane // C
        c = plane % C
        for i in range(kh):
            oy = i * dh - ph
            y0 = _lo(oy, sh)
            y1 = _hi(oy, sh, H, Ho)
            for j in range(kw):
                ox = j * dw - pw
                x0 = _lo(ox, sw)
                x1 = _hi(ox, sw, W, Wo)
                wv = w[c, i, j]
                for y in range(y0, y1):
                    for xo in range(x0, x1):
                        gx[b, c, y * sh + oy, xo * sw + ox] += wv * g[b, c, y, xo]


cdef void _dw_bwd_weight(real[:, :, :, ::1] x, real[:, :, :, ::1] g, real[:, :, ::1] gw,
                         int sh, int sw, int dh, int dw, int ph, int pw, int nthreads) noexcept nogil:
    # row partial sums in working precision, accumulated across rows in double
    cdef Py_ssize_t B = g.shape[0], C = g.shape[1], Ho = g.shape[2], Wo = g.shape[3]
    cdef Py_ssize_t H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t kh = gw.shape[1], kw = gw.shape[2]
    cdef Py_ssize_t b, c, i, j, y, xo, y0, y1, x0, x1, oy, ox
    cdef double acc
    cdef real row
    for c in prange(C, num_threads=nthreads, schedule="static"):
        for i in range(kh):
            oy = i * dh - ph
            y0 = _lo(oy, sh)
            y1 = _hi(oy, sh, H, Ho)
            for j in range(kw):
                ox = j * dw - pw
                x0 = _lo(ox, sw)
                x1 = _hi(ox, sw, W, Wo)
                acc = 0.0
                for b in range(B):
                    for y in range(y0, y1):
                        row = 0
                        for xo in range(x0, x1):
                            row = row + g[b, c, y, xo] * x[b, c, y * sh + oy, xo * sw + ox]
                        acc = acc + row
                gw[c, i, j] = <real>acc


def depthwise_forward(x, w, stride, dilation, padding, out_hw):
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w, dtype=x.dtype)
    out = np.zeros((x.shape[0], x.shape[1], out_hw[0], out_hw[1]), dtype=x.dtype)
    args = (stride[0], stride[1], dilation[0], dilation[1], padding[0], padding[1], _num_threads)
    if x.dtype == np.float32:
        _dw_fwd[float](x, w, out, *args)
    else:
        _dw_fwd[double](x, w, out, *args)
    return out


def depthwise_backward(x, w, grad, stride, dilation, padding, need_input=True, need_weight=True):
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w, dtype=x.dtype)
    grad = np.ascontiguousarray(grad, dtype=x.dtype)
    args = (stride[0], stride[1], dilation[0], dilation[1], padding[0], padding[1], _num_threads)
    gx = gw = None
    if need_input:
        gx = np.zeros_like(x)
        if x.dtype == np.float32:
            _dw_bwd_input[float](grad, w, gx, *args)
        else:
            _dw_bwd_input[double](grad, w, gx, *args)
    if need_weight:
        gw = np.zeros_like(w)
        if x.dtype == np.float32:
            _dw_bwd_weight[float](x, grad, gw, *args)
        else:
            _dw_bwd_weight[double](x, grad, gw, *args)
    return gx, gw


# ------------------------------------------------------------------ max pool

cdef extern from "_pool.h" nogil:
    void ctnas_pool_plane_f(const float* x, float* out, int* arg, Py_ssize_t H, Py_ssize_t W,
                            Py_ssize_t Ho, Py_ssize_t Wo, int kh, int kw, int sh, int sw, int ph, int pw)
    void ctnas_pool_plane_d(const double* x, double* out, int* arg, Py_ssize_t H, Py_ssize_t W,
                            Py_ssize_t Ho, Py_ssize_t Wo, int kh, int kw, int sh, int sw, int ph, int pw)


cdef void _pool_fwd(real[:, :, :, ::1] x, real[:, :, :, ::1] out, int[:, :, :, ::1] arg,
                    int kh, int kw, int sh, int sw, int ph, int pw, int nthreads) noexcept nogil:
    cdef Py_ssize_t B = out.shape[0], C = out.shape[1], Ho = out.shape[2], Wo = out.shape[3]
    cdef Py_ssize_t H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t plane, b, c
    for plane in prange(B * C, num_threads=nthreads, schedule="static"):
        b = plane // C
        c = plane % C
        if real is float:
            ctnas_pool_plane_f(&x[b, c, 0, 0], &out[b, c, 0, 0], &arg[b, c, 0, 0], H, W, Ho, Wo,
                               kh, kw, sh, sw, ph, pw)
        else:
            ctnas_pool_plane_d(&x[b, c, 0, 0], &out[b, c, 0, 0], &arg[b, c, 0, 0], H, W, Ho, Wo,
                               kh, kw, sh, sw, ph, pw)


cdef void _pool_bwd(real[:, :, :, ::1] g, int[:, :, :, ::1] arg, real[:, :, :, ::1] gx,
                    int kw, int sh, int sw, int ph, int pw, int nthreads) noexcept nogil:
    cdef Py_ssize_t B = g.shape[0], C = g.shape[1], Ho = g.shape[2], Wo = g.shape[3]
    cdef Py_ssize_t plane, b, c, y, xo
    cdef int a
    for plane in prange(B * C, num_threads=nthreads, schedule="static"):
        b = plane // C
        c = plane % C
        for y in range(Ho):
            for xo in range(Wo):
                a = arg[b, c, y, xo]
                gx[b, c, y * sh + a // kw - ph, xo * sw + a % kw - pw] += g[b, c, y, xo]


def maxpool_forward(x, kernel, stride, padding, out_hw):
    x = np.ascontiguousarray(x)
    out = np.empty((x.shape[0], x.shape[1], out_hw[0], out_hw[1]), dtype=x.dtype)
    arg = np.empty(out.shape, dtype=np.int32)
    args = (kernel[0], kernel[1], stride[0], stride[1], padding[0], padding[1], _num_threads)
    if x.dtype == np.float32:
        _pool_fwd[float](x, out, arg, *args)
    else:
        _pool_fwd[double](x, out, arg, *args)
    return out, arg


def maxpool_backward(grad, arg, input_shape, kernel, stride, padding):
    grad = np.ascontiguousarray(grad)
    arg = np.ascontiguousarray(arg, dtype=np.int32)
    gx = np.zeros(tuple(input_shape), dtype=grad.dtype)
    args = (kernel[1], stride[0], stride[1], padding[0], padding[1], _num_threads)
    if grad.dtype == np.float32:
        _pool_bwd[float](grad, arg, gx, *args)
    else:
        _pool_bwd[double](grad, arg, gx, *args)
    return gx


# ---------------------------------------------------------------- batch norm

cdef void _bn_stats(real[:, :, ::1] x, double[::1] mean, double[::1] var, int nthreads) noexcept nogil:
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], N = x.shape[2]
    cdef Py_ssize_t b, c, k
    cdef double s, d
    for c in prange(C, num_threads=nthreads, schedule="static"):
        s = 0.0
        for b in range(B):
            for k in range(N):
                s = s + x[b, c, k]
        s = s / (B * N)
        mean[c] = s
        d = 0.0
        for b in range(B):
            for k in range(N):
                d = d + (x[b, c, k] - s) * (x[b, c, k] - s)
        var[c] = d / (B * N)


cdef void _bn_fwd(real[:, :, ::1] x, double[::1] mean, double[::1] inv, double[::1] gamma, double[::1] beta,
                  real[:, :, ::1] out, real[:, :, ::1] xhat, int nthreads) noexcept nogil:
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], N = x.shape[2]
    cdef Py_ssize_t plane, b, c, k
    cdef real m, s, gm, bt, h
    for plane in prange(B * C, num_threads=nthreads, schedule="static"):
        b = plane // C
        c = plane % C
        m = <real>mean[c]
        s = <real>inv[c]
        gm = <real>gamma[c]
        bt = <real>beta[c]
        for k in range(N):
            h = (x[b, c, k] - m) * s
            xhat[b, c, k] = h
            out[b, c, k] = h * gm + bt


cdef void _bn_bwd(real[:, :, ::1] g, real[:, :, ::1] xhat, double[::1] inv, double[::1] gamma,
                  double[::1] ggamma, double[::1] gbeta, real[:, :, ::1] gx, int training,
                  int nthreads) noexcept nogil:
    cdef Py_ssize_t B = g.shape[0], C = g.shape[1], N = g.shape[2]
    cdef Py_ssize_t b, c, k
    cdef double sg, sgx, n = B * N
    cdef real scale, m1, m2
    for c in prange(C, num_threads=nthreads, schedule="static"):
        sg = 0.0
        sgx = 0.0
        for b in range(B):
            for k in range(N):
                sg = sg + g[b, c, k]
                sgx = sgx + g[b, c, k] * xhat[b, c, k]
        gbeta[c] = sg
        ggamma[c] = sgx
        scale = <real>(gamma[c] * inv[c])
        if training:
            m1 = <real>(sg / n)
            m2 = <real>(sgx / n)
            for b in range(B):
                for k in range(N):
                    gx[b, c, k] = (g[b, c, k] - m1 - xhat[b, c, k] * m2) * scale
        else:
            for b in range(B):
                for k in range(N):
                    gx[b, c, k] = g[b, c, k] * scale


def batchnorm_stats(x):
    x = np.ascontiguousarray(x)
    b, c = x.shape[:2]
    mean = np.empty(c, dtype=np.float64)
    var = np.empty(c, dtype=np.float64)
    if x.dtype == np.float32:
        _bn_stats[float](x.reshape(b, c, -1), mean, var, _num_threads)
    else:
        _bn_stats[double](x.reshape(b, c, -1), mean, var, _num_threads)
    return mean, var


def batchnorm_forward(x, mean, inv_std, gamma, beta):
    x = np.ascontiguousarray(x)
    b, c = x.shape[:2]
    out = np.empty_like(x)
    xhat = np.empty_like(x)
    args = (np.ascontiguousarray(mean, dtype=np.float64), np.ascontiguousarray(inv_std, dtype=np.float64),
            np.ascontiguousarray(gamma, dtype=np.float64), np.ascontiguousarray(beta, dtype=np.float64))
    if x.dtype == np.float32:
        _bn_fwd[float](x.reshape(b, c, -1), *args, out.reshape(b, c, -1), xhat.reshape(b, c, -1), _num_threads)
    else:
        _bn_fwd[double](x.reshape(b, c, -1), *args, out.reshape(b, c, -1), xhat.reshape(b, c, -1), _num_threads)
    return out, xhat


def batchnorm_backward(grad, xhat, inv_std, gamma, training):
    grad = np.ascontiguousarray(grad, dtype=xhat.dtype)
    xhat = np.ascontiguousarray(xhat)
    b, c = grad.shape[:2]
    gx = np.empty_like(grad)
    ggamma = np.empty(c, dtype=np.float64)
    gbeta = np.empty(c, dtype=np.float64)
    inv = np.ascontiguousarray(inv_std, dtype=np.float64)
    gm = np.ascontiguousarray(gamma, dtype=np.float64)
    if grad.dtype == np.float32:
        _bn_bwd[float](grad.reshape(b, c, -1), xhat.reshape(b, c, -1), inv, gm, ggamma, gbeta,
                       gx.reshape(b, c, -1), 1 if training else 0, _num_threads)
    else:
        _bn_bwd[double](grad.reshape(b, c, -1), xhat.reshape(b, c, -1), inv, gm, ggamma, gbeta,
                        gx.reshape(b, c, -1), 1 if training else 0, _num_threads)
    return gx, ggamma, gbeta
