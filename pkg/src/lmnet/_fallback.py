"""Pure-numpy versions of the compiled kernels in ``_kernels.pyx``.

Forward routines reproduce the compiled results bit for bit: each output
element is built by a chain of separate multiplies and adds in ascending
reduction order, starting from zero. Gradient routines (dwconv_backward,
na_scatter) only agree to rounding.
"""

import numpy as np


def gemm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, k = a.shape
    if b.shape[0] != k:
        raise ValueError(f"inner dimensions differ: {k} vs {b.shape[0]}")
    out = np.zeros((m, b.shape[1]), dtype=a.dtype)
    tmp = np.empty_like(out)
    for kk in range(k):
        np.multiply(a[:, kk : kk + 1], b[kk : kk + 1, :], out=tmp)
        out += tmp
    return out


def dwconv_forward(xpad, w, sh, sw, ho, wo):
    n, ch = xpad.shape[:2]
    kh, kw = w.shape[1:]
    out = np.zeros((n, ch, ho, wo), dtype=xpad.dtype)
    tmp = np.empty_like(out)
    for a in range(kh):
        for t in range(kw):
            win = xpad[:, :, a : a + (ho - 1) * sh + 1 : sh, t : t + (wo - 1) * sw + 1 : sw]
            np.multiply(w[None, :, a, t, None, None], win, out=tmp)
            out += tmp
    return out


def dwconv_backward(xpad, w, g, sh, sw):
    n, ch = xpad.shape[:2]
    kh, kw = w.shape[1:]
    ho, wo = g.shape[2:]
    gx = np.zeros_like(xpad)
    gw = np.zeros_like(w)
    for a in range(kh):
        for t in range(kw):
            rows = slice(a, a + (ho - 1) * sh + 1, sh)
            cols = slice(t, t + (wo - 1) * sw + 1, sw)
            gw[:, a, t] = np.einsum("ncij,ncij->c", g, xpad[:, :, rows, cols])
            gx[:, :, rows, cols] += w[None, :, a, t, None, None] * g
    return gx, gw


def _gather(x, starts_h, starts_w, a, t):
    return x[:, (starts_h + a)[:, None], (starts_w + t)[None, :]]


def na_logits(q, k, starts_h, starts_w, kh, kw):
    nb, h, w, d = q.shape
    out = np.zeros((nb, h, w, kh * kw), dtype=q.dtype)
    qt = np.moveaxis(q, -1, 0)
    for a in range(kh):
        for t in range(kw):
            kt = np.moveaxis(_gather(k, starts_h, starts_w, a, t), -1, 0)
            acc = np.zeros((nb, h, w), dtype=q.dtype)
            for dd in range(d):
                acc += qt[dd] * kt[dd]
            out[..., a * kw + t] = acc
    return out


def na_apply(wt, v, starts_h, starts_w, kh, kw):
    out = np.zeros(v.shape, dtype=v.dtype)
    for a in range(kh):
        for t in range(kw):
            out += wt[..., a * kw + t, None] * _gather(v, starts_h, starts_w, a, t)
    return out


def na_scatter(wt, src, starts_h, starts_w, kh, kw):
    out = np.zeros(src.shape, dtype=src.dtype)
    for a in range(kh):
        for t in range(kw):
            idx = (slice(None), (starts_h + a)[:, None], (starts_w + t)[None, :])
            np.add.at(out, idx, wt[..., a * kw + t, None] * src)
    return out
