"""Neural-network forward primitives with their backward rules.

Convolutions are cross-correlations on NCHW tensors. Forward products go
through the deterministic kernels in :mod:`lmnet.backend`; backward products
use numpy/BLAS.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from . import backend
from .autodiff import note_switch, record
from .errors import ShapeError
from .profiling import add_macs
from .tensor import Tensor, mean, reshape


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


@dataclass
class ConvParams:
    """Convolution weights ``[D, C/groups, h, w]`` plus geometry."""

    weight: Tensor
    bias: Tensor | None = None
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    groups: int = 1

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1] * self.groups


@dataclass
class BnParams:
    """Batch-norm affine (gamma, beta) and running statistics."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if np.any(self.running_var < 0):
            raise ValueError("running_var must be non-negative")

    @property
    def std(self) -> np.ndarray:
        """Effective standard deviation sqrt(running_var + eps)."""
        return np.sqrt(self.running_var + self.eps)


# -- convolution -----------------------------------------------------------
def conv_output_size(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def _im2col(xpad: np.ndarray, kh: int, kw: int, sh: int, sw: int, ho: int, wo: int) -> np.ndarray:
    n, c = xpad.shape[:2]
    if kh == 1 and kw == 1 and sh == 1 and sw == 1:
        return xpad.transpose(1, 0, 2, 3).reshape(c, n * ho * wo)
    win = sliding_window_view(xpad, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :ho, :wo]
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * ho * wo)


def conv2d(
    x: Tensor,
    weight: Tensor | ConvParams,
    bias: Tensor | None = None,
    stride=1,
    padding=0,
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation with zero padding.

    Each output element is the left-to-right sum over (input channel,
    kernel row, kernel column) followed by the bias.
    """
    if isinstance(weight, ConvParams):
        p = weight
        weight, bias, stride, padding, groups = p.weight, p.bias, p.stride, p.padding, p.groups
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    d, cg, kh, kw = weight.shape
    if c % groups or d % groups or cg * groups != c:
        raise ShapeError(f"channels {c} -> {d} incompatible with weight {weight.shape}, groups={groups}")
    if kh > h + 2 * ph or kw > w + 2 * pw:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h + 2 * ph}x{w + 2 * pw}")
    if x.dtype != weight.dtype:
        raise TypeError("conv2d dtype mismatch")
    ho, wo = conv_output_size(h, kh, sh, ph), conv_output_size(w, kw, sw, pw)
    xd, wd = x.data, weight.data
    xpad = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else xd
    add_macs("conv", n * d * ho * wo * cg * kh * kw)

    depthwise = groups == c == d and cg == 1
    if depthwise:
        out = backend.kernels.dwconv_forward(
            np.ascontiguousarray(xpad), np.ascontiguousarray(wd[:, 0]), sh, sw, ho, wo
        )
    else:
        cols = _im2col(xpad, kh, kw, sh, sw, ho, wo)
        dg = d // groups
        kg = cg * kh * kw
        w2 = wd.reshape(d, kg)
        res = np.empty((d, n * ho * wo), dtype=xd.dtype)
        for gi in range(groups):
            res[gi * dg : (gi + 1) * dg] = backend.kernels.gemm(
                np.ascontiguousarray(w2[gi * dg : (gi + 1) * dg]),
                np.ascontiguousarray(cols[gi * kg : (gi + 1) * kg]),
            )
        out = np.ascontiguousarray(res.reshape(d, n, ho, wo).transpose(1, 0, 2, 3))
    if bias is not None:
        out += bias.data[None, :, None, None]
    result = Tensor(out)

    def bw(g):
        if depthwise:
            gxp, gw = backend.kernels.dwconv_backward(
                np.ascontiguousarray(xpad), np.ascontiguousarray(wd[:, 0]), np.ascontiguousarray(g), sh, sw
            )
            gw = gw[:, None]
        else:
            cols = _im2col(xpad, kh, kw, sh, sw, ho, wo)
            g2 = g.transpose(1, 0, 2, 3).reshape(d, n * ho * wo)
            dg_ = d // groups
            kg_ = cg * kh * kw
            w2_ = wd.reshape(d, kg_)
            gw = np.empty_like(w2_)
            dcols = np.empty((c * kh * kw, n * ho * wo), dtype=xd.dtype)
            for gi in range(groups):
                go = g2[gi * dg_ : (gi + 1) * dg_]
                cg_cols = cols[gi * kg_ : (gi + 1) * kg_]
                gw[gi * dg_ : (gi + 1) * dg_] = go @ cg_cols.T
                dcols[gi * kg_ : (gi + 1) * kg_] = w2_[gi * dg_ : (gi + 1) * dg_].T @ go
            gw = gw.reshape(wd.shape)
            if kh == 1 and kw == 1 and sh == 1 and sw == 1:
                gxp = np.ascontiguousarray(dcols.reshape(c, n, ho, wo).transpose(1, 0, 2, 3))
            else:
                dc = dcols.reshape(c, kh, kw, n, ho, wo)
                gxp = np.zeros(xpad.shape, dtype=xd.dtype)
                for a in range(kh):
                    for t in range(kw):
                        gxp[:, :, a : a + (ho - 1) * sh + 1 : sh, t : t + (wo - 1) * sw + 1 : sw] += dc[
                            :, a, t
                        ].transpose(1, 0, 2, 3)
        gx = gxp[:, :, ph : ph + h, pw : pw + w] if (ph or pw) else gxp
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (np.ascontiguousarray(gx), gw, gb)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return record(result, parents, bw)


# -- normalization ---------------------------------------------------------
def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    eps: float = 1e-5,
    momentum: float = 0.1,
    training: bool = False,
) -> Tensor:
    """Per-channel batch norm on NCHW input.

    Eval mode applies ``(x - mean) * gamma / sqrt(var + eps) + beta`` with the
    running statistics. Train mode normalizes with the batch statistics over
    (N, H, W) and updates the running statistics in place.
    """
    if x.ndim != 4 or x.shape[1] != gamma.shape[0]:
        raise ShapeError(f"batch_norm channel mismatch: input {x.shape}, params {gamma.shape}")
    xd = x.data
    dt = xd.dtype
    g_ = gamma.data.astype(dt, copy=False)
    b_ = beta.data.astype(dt, copy=False)

    if not training:
        std = np.sqrt(running_var.astype(dt) + dt.type(eps))
        scale = g_ / std
        mu = running_mean.astype(dt)
        centered = xd - mu[None, :, None, None]
        out = Tensor(centered * scale[None, :, None, None] + b_[None, :, None, None])

        def bw_eval(g):
            return (
                g * scale[None, :, None, None],
                np.einsum("nchw,nchw->c", g, centered) / std,
                g.sum(axis=(0, 2, 3)),
            )

        return record(out, (x, gamma, beta), bw_eval)

    m = xd.shape[0] * xd.shape[2] * xd.shape[3]
    if m < 2:
        raise ShapeError("train-mode batch_norm needs more than one value per channel")
    mu = xd.mean(axis=(0, 2, 3))
    centered = xd - mu[None, :, None, None]
    var = np.mean(centered * centered, axis=(0, 2, 3))
    invstd = 1.0 / np.sqrt(var + dt.type(eps))
    xhat = centered * invstd[None, :, None, None]
    out = Tensor(xhat * g_[None, :, None, None] + b_[None, :, None, None])

    running_mean *= 1.0 - momentum
    running_mean += momentum * mu
    running_var *= 1.0 - momentum
    running_var += momentum * var * (m / (m - 1))

    def bw_train(g):
        gb = g.sum(axis=(0, 2, 3))
        gg = np.einsum("nchw,nchw->c", g, xhat)
        dxhat = g * g_[None, :, None, None]
        s1 = dxhat.sum(axis=(0, 2, 3))
        s2 = np.einsum("nchw,nchw->c", dxhat, xhat)
        gx = (invstd / m)[None, :, None, None] * (
            m * dxhat - s1[None, :, None, None] - xhat * s2[None, :, None, None]
        )
        return (gx, gg, gb)

    return record(out, (x, gamma, beta), bw_train)


def batch_norm_params(x: Tensor, bn: BnParams, mode: str = "eval") -> Tensor:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return batch_norm(
        x, bn.gamma, bn.beta, bn.running_mean, bn.running_var, bn.eps, bn.momentum, mode == "train"
    )


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    xd = x.data
    if gamma.shape != (xd.shape[-1],):
        raise ShapeError(f"layer_norm params {gamma.shape} vs channels {xd.shape[-1]}")
    dt = xd.dtype
    # shift by the first element so a constant row centres to exactly zero
    ref = xd[..., :1]
    mu = ref + (xd - ref).mean(axis=-1, keepdims=True)
    centered = xd - mu
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    invstd = 1.0 / np.sqrt(var + dt.type(eps))
    xhat = centered * invstd
    out = Tensor(xhat * gamma.data + beta.data)
    c = xd.shape[-1]

    def bw(g):
        red = tuple(range(g.ndim - 1))
        gb = g.sum(axis=red)
        gg = (g * xhat).sum(axis=red)
        dxhat = g * gamma.data
        gx = invstd / c * (
            c * dxhat - dxhat.sum(axis=-1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        return (gx, gg, gb)

    return record(out, (x, gamma, beta), bw)


# -- dense layers ------------------------------------------------------------
def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the last axis; ``weight`` is ``[in, out]``."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} vs weight {weight.shape}")
    lead = x.shape[:-1]
    k, nout = weight.shape
    x2 = x.data.reshape(-1, k)
    add_macs("linear", x2.shape[0] * k * nout)
    y = backend.kernels.gemm(np.ascontiguousarray(x2), np.ascontiguousarray(weight.data))
    if bias is not None:
        y += bias.data
    out = Tensor(y.reshape(*lead, nout))
    wd = weight.data

    def bw(g):
        g2 = g.reshape(-1, nout)
        gx = (g2 @ wd.T).reshape(*lead, k)
        gw = x2.T @ g2
        gb = g2.sum(axis=0) if bias is not None else None
        return (gx, gw, gb)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return record(out, parents, bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for rank {x.ndim}")
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return record(Tensor(s), (x,), bw)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / math.sqrt(2.0)))
    cdf = cdf.astype(xd.dtype, copy=False)
    out = Tensor(xd * cdf)
    pdf = (np.exp(-0.5 * xd * xd) / math.sqrt(2.0 * math.pi)).astype(xd.dtype, copy=False)
    return record(out, (x,), lambda g: (g * (cdf + xd * pdf),))


# -- pooling / resampling ----------------------------------------------------
def max_pool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2 needs even spatial extents, got {h}x{w}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    note_switch(arg.astype(np.uint8))
    out = Tensor(np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0])

    def bw(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return record(out, (x,), bw)


def _interp_coeffs(n_in: int, n_out: int):
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    return i0, i1, frac


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    i0, i1, frac = _interp_coeffs(n_in, n_out)
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resampling with the half-pixel (align_corners=False) convention.

    Source coordinate is ``(dst + 0.5) * in / out - 0.5`` clamped to the
    valid range; rows are interpolated first, then columns.
    """
    if out_h < 1 or out_w < 1:
        raise ShapeError("resize target must be at least 1x1")
    n, c, h, w = x.shape
    if (h, w) == (out_h, out_w):
        return x
    dt = x.dtype
    xd = x.data
    y0, y1, fy = _interp_coeffs(h, out_h)
    x0, x1, fx = _interp_coeffs(w, out_w)
    fy = fy.astype(dt)[:, None]
    fx = fx.astype(dt)
    t = xd[:, :, y0, :] * (1 - fy) + xd[:, :, y1, :] * fy
    out = t[:, :, :, x0] * (1 - fx) + t[:, :, :, x1] * fx
    my = _interp_matrix(h, out_h).astype(dt)
    mx = _interp_matrix(w, out_w).astype(dt)

    def bw(g):
        gt = np.matmul(g, mx)
        return (np.ascontiguousarray(np.matmul(my.T, gt)),)

    return record(Tensor(out), (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    return mean(x, axis=(2, 3), keepdims=True)


def scale_channels(x: Tensor, s: Tensor) -> Tensor:
    """Multiply each (n, c) plane of ``x`` by ``s[n, c]``."""
    if s.shape != x.shape[:2]:
        raise ShapeError(f"channel scale {s.shape} vs input {x.shape}")
    xd, sd = x.data, s.data
    out = Tensor(xd * sd[:, :, None, None])
    return record(out, (x, s), lambda g: (g * sd[:, :, None, None], np.einsum("nchw,nchw->nc", g, xd)))


def add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    out = Tensor(x.data + b.data[None, :, None, None])
    return record(out, (x, b), lambda g: (g, g.sum(axis=(0, 2, 3))))


def se_block(x: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    """Squeeze-and-excitation: ``x * sigmoid(relu(gap(x) @ w1) @ w2)``.

    ``w1`` is ``[C, C/r]`` and ``w2`` is ``[C/r, C]``.
    """
    n, c = x.shape[:2]
    if w1.shape[0] != c or w2.shape != (w1.shape[1], c):
        raise ShapeError(f"SE weights {w1.shape}, {w2.shape} do not fit {c} channels")
    z = reshape(global_avg_pool(x), (n, c))
    s = linear(linear(z, w1).relu(), w2).sigmoid()
    return scale_channels(x, s)


__all__ = [
    "BnParams",
    "ConvParams",
    "add_channel_bias",
    "batch_norm",
    "batch_norm_params",
    "bilinear_resize",
    "conv2d",
    "conv_output_size",
    "gelu",
    "global_avg_pool",
    "layer_norm",
    "linear",
    "max_pool2",
    "scale_channels",
    "se_block",
    "softmax",
]
