/* Max-pool plane kernels. Taps are visited in row-major order and a tap
 * replaces the running maximum only when strictly greater, so the first
 * maximal element of each window wins. */
#ifndef CTNAS_POOL_H
#define CTNAS_POOL_H

#include <math.h>
#include <stddef.h>

static inline ptrdiff_t ctnas_lo(ptrdiff_t off, ptrdiff_t s) {
    ptrdiff_t a = -off, v;
    v = a >= 0 ? (a + s - 1) / s : -((-a) / s);
    return v > 0 ? v : 0;
}

static inline ptrdiff_t ctnas_hi(ptrdiff_t off, ptrdiff_t s, ptrdiff_t n, ptrdiff_t nout) {
    ptrdiff_t a = n - 1 - off, v;
    v = (a >= 0 ? a / s : -((-a + s - 1) / s)) + 1;
    return v < nout ? v : nout;
}

#define CTNAS_POOL_PLANE(NAME, T)                                                        \
static void NAME(const T *restrict x, T *restrict out, int *restrict arg,               \
                 ptrdiff_t H, ptrdiff_t W, ptrdiff_t Ho, ptrdiff_t Wo,                  \
                 int kh, int kw, int sh, int sw, int ph, int pw) {                      \
    for (ptrdiff_t k = 0; k < Ho * Wo; ++k) { out[k] = -INFINITY; arg[k] = 0; }         \
    for (int i = 0; i < kh; ++i) {                                                       \
        ptrdiff_t oy = i - ph;                                                           \
        ptrdiff_t y0 = ctnas_lo(oy, sh), y1 = ctnas_hi(oy, sh, H, Ho);                   \
        for (int j = 0; j < kw; ++j) {                                                   \
            ptrdiff_t ox = j - pw;                                                       \
            ptrdiff_t x0 = ctnas_lo(ox, sw), x1 = ctnas_hi(ox, sw, W, Wo);               \
            int tap = i * kw + j;                                                        \
            for (ptrdiff_t y = y0; y < y1; ++y) {                                        \
                const T *row = x + (y * sh + oy) * W + ox;                               \
                T *o = out + y * Wo;                                                     \
                int *a = arg + y * Wo;                                                   \
                for (ptrdiff_t q = x0; q < x1; ++q) {                                    \
                    T v = row[q * sw];                                                   \
                    int m = v > o[q];                                                    \
                    o[q] = m ? v : o[q];                                                 \
                    a[q] = m ? tap : a[q];                                               \
                }                                                                        \
            }                                                                            \
        }                                                                                \
    }                                                                                    \
}

CTNAS_POOL_PLANE(ctnas_pool_plane_f, float)
CTNAS_POOL_PLANE(ctnas_pool_plane_d, double)

#endif
