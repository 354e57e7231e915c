# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops.

Every routine has a numpy twin in ``lmnet._fallback``. The forward
routines (gemm, dwconv_forward, na_logits, na_apply) match their twins bit
for bit: each output element is accumulated in ascending reduction order
with a separate multiply and add (the extension is built with
``-ffp-contract=off`` so no FMA contraction happens). The gradient
routines agree with their twins to rounding.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef fused real:
    float
    double

DEF JB = 256
DEF IB = 8


cdef void _gemm(const real* a, const real* b, real* c,
                Py_ssize_t m, Py_ssize_t k, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t j0, jn, i0, i1, i, kk, j
    cdef real av
    cdef real* crow
    cdef const real* brow
    for j0 in range(0, n, JB):
        jn = n - j0
        if jn > JB:
            jn = JB
        for i0 in range(0, m, IB):
            i1 = i0 + IB
            if i1 > m:
                i1 = m
            for kk in range(k):
                brow = b + kk * n + j0
                for i in range(i0, i1):
                    av = a[i * k + kk]
                    crow = c + i * n + j0
                    for j in range(jn):
                        crow[j] = crow[j] + av * brow[j]


def gemm(const real[:, ::1] a, const real[:, ::1] b):
    """Return ``a @ b`` summed left to right over the shared axis."""
    cdef Py_ssize_t m = a.shape[0], k = a.shape[1], n = b.shape[1]
    if b.shape[0] != k:
        raise ValueError(f"inner dimensions differ: {k} vs {b.shape[0]}")
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((m, n), dtype=dtype)
    cdef real[:, ::1] c = out
    if m and n and k:
        with nogil:
            _gemm(&a[0, 0], &b[0, 0], &c[0, 0], m, k, n)
    return out


def dwconv_forward(const real[:, :, :, ::1] xpad, const real[:, :, ::1] w,
                   Py_ssize_t sh, Py_ssize_t sw, Py_ssize_t ho, Py_ssize_t wo):
    """Depthwise cross-correlation of an already padded input.

    Taps are accumulated in row-major kernel order.
    """
    cdef Py_ssize_t n = xpad.shape[0], ch = xpad.shape[1]
    cdef Py_ssize_t kh = w.shape[1], kw = w.shape[2]
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n, ch, ho, wo), dtype=dtype)
    cdef real[:, :, :, ::1] o = out
    cdef Py_ssize_t b, c, a, t, i, j
    cdef real wt
    cdef real* orow
    cdef const real* xrow
    with nogil:
        for b in range(n):
            for c in range(ch):
                for a in range(kh):
                    for t in range(kw):
                        wt = w[c, a, t]
                        for i in range(ho):
                            orow = &o[b, c, i, 0]
                            xrow = &xpad[b, c, i * sh + a, t]
                            if sw == 1:
                                for j in range(wo):
                                    orow[j] = orow[j] + wt * xrow[j]
                            else:
                                for j in range(wo):
                                    orow[j] = orow[j] + wt * xrow[j * sw]
    return out


def dwconv_backward(const real[:, :, :, ::1] xpad, const real[:, :, ::1] w, const real[:, :, :, ::1] g,
                    Py_ssize_t sh, Py_ssize_t sw):
    """Gradients of :func:`dwconv_forward` w.r.t. the padded input and the kernel."""
    cdef Py_ssize_t n = xpad.shape[0], ch = xpad.shape[1]
    cdef Py_ssize_t kh = w.shape[1], kw = w.shape[2]
    cdef Py_ssize_t ho = g.shape[2], wo = g.shape[3]
    dtype = np.float32 if real is float else np.float64
    gx_arr = np.zeros((n, ch, xpad.shape[2], xpad.shape[3]), dtype=dtype)
    gw_arr = np.zeros((ch, kh, kw), dtype=dtype)
    acc_arr = np.zeros(wo, dtype=dtype)
    cdef real[:, :, :, ::1] gx = gx_arr
    cdef real[:, :, ::1] gw = gw_arr
    cdef real[::1] acc = acc_arr
    cdef Py_ssize_t b, c, a, t, i, j
    cdef real wt, tot
    cdef const real* grow
    cdef const real* xrow
    cdef real* gxrow
    with nogil:
        for c in range(ch):
            for a in range(kh):
                for t in range(kw):
                    wt = w[c, a, t]
                    # per-column partial sums keep the inner loops vectorisable
                    for j in range(wo):
                        acc[j] = 0
                    for b in range(n):
                        for i in range(ho):
                            grow = &g[b, c, i, 0]
                            xrow = &xpad[b, c, i * sh + a, t]
                            gxrow = &gx[b, c, i * sh + a, t]
                            if sw == 1:
                                for j in range(wo):
                                    acc[j] = acc[j] + grow[j] * xrow[j]
                                for j in range(wo):
                                    gxrow[j] = gxrow[j] + wt * grow[j]
                            else:
                                for j in range(wo):
                                    acc[j] = acc[j] + grow[j] * xrow[j * sw]
                                    gxrow[j * sw] = gxrow[j * sw] + wt * grow[j]
                    tot = 0
                    for j in range(wo):
                        tot = tot + acc[j]
                    gw[c, a, t] = tot
    return gx_arr, gw_arr


# -- neighbourhood attention -------------------------------------------------
# q/k/v/src are [B, H, W, d]; weights are [B, H, W, kh*kw]. Query (i, j) sees
# the kh x kw block starting at (starts_h[i], starts_w[j]).

def na_logits(const real[:, :, :, ::1] q, const real[:, :, :, ::1] k,
              const Py_ssize_t[::1] starts_h, const Py_ssize_t[::1] starts_w,
              Py_ssize_t kh, Py_ssize_t kw):
    """out[b,i,j,o] = sum_d q[b,i,j,d] * k[b, sh_i + o//kw, sw_j + o%kw, d]."""
    cdef Py_ssize_t nb = q.shape[0], h = q.shape[1], w = q.shape[2], d = q.shape[3]
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((nb, h, w, kh * kw), dtype=dtype)
    cdef real[:, :, :, ::1] o = out
    cdef Py_ssize_t b, i, j, a, t, dd, r, c
    cdef real acc
    with nogil:
        for b in range(nb):
            for i in range(h):
                for j in range(w):
                    for a in range(kh):
                        r = starts_h[i] + a
                        for t in range(kw):
                            c = starts_w[j] + t
                            acc = 0
                            for dd in range(d):
                                acc = acc + q[b, i, j, dd] * k[b, r, c, dd]
                            o[b, i, j, a * kw + t] = acc
    return out


def na_apply(const real[:, :, :, ::1] wt, const real[:, :, :, ::1] v,
             const Py_ssize_t[::1] starts_h, const Py_ssize_t[::1] starts_w,
             Py_ssize_t kh, Py_ssize_t kw):
    """out[b,i,j,:] = sum_o wt[b,i,j,o] * v[b, sh_i + o//kw, sw_j + o%kw, :]."""
    cdef Py_ssize_t nb = v.shape[0], h = v.shape[1], w = v.shape[2], d = v.shape[3]
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((nb, h, w, d), dtype=dtype)
    cdef real[:, :, :, ::1] o = out
    cdef Py_ssize_t b, i, j, a, t, dd, r, c
    cdef real s
    with nogil:
        for b in range(nb):
            for i in range(h):
                for j in range(w):
                    for a in range(kh):
                        r = starts_h[i] + a
                        for t in range(kw):
                            c = starts_w[j] + t
                            s = wt[b, i, j, a * kw + t]
                            for dd in range(d):
                                o[b, i, j, dd] = o[b, i, j, dd] + s * v[b, r, c, dd]
    return out


def na_scatter(const real[:, :, :, ::1] wt, const real[:, :, :, ::1] src,
               const Py_ssize_t[::1] starts_h, const Py_ssize_t[::1] starts_w,
               Py_ssize_t kh, Py_ssize_t kw):
    """Adjoint of :func:`na_apply` with respect to ``v``."""
    cdef Py_ssize_t nb = src.shape[0], h = src.shape[1], w = src.shape[2], d = src.shape[3]
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((nb, h, w, d), dtype=dtype)
    cdef real[:, :, :, ::1] o = out
    cdef Py_ssize_t b, i, j, a, t, dd, r, c
    cdef real s
    with nogil:
        for b in range(nb):
            for i in range(h):
                for j in range(w):
                    for a in range(kh):
                        r = starts_h[i] + a
                        for t in range(kw):
                            c = starts_w[j] + t
                            s = wt[b, i, j, a * kw + t]
                            for dd in range(d):
                                o[b, r, c, dd] = o[b, r, c, dd] + s * src[b, i, j, dd]
    return out
