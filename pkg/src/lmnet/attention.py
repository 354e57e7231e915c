"""Multi-head self-attention, neighbourhood (local window) attention and the
pre-norm transformer block used by the global and local feature transformers.

No positional embedding is used anywhere, so global attention is
permutation-equivariant over tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import backend
from . import functional as F
from .autodiff import record
from .errors import ShapeError
from .nn import LayerNorm, Linear, Module
from .profiling import add_macs
from .tensor import Tensor, matmul, permute, reshape


@dataclass
class AttentionConfig:
    channels: int
    heads: int = 1
    mlp_ratio: float = 4.0
    window: int | None = None
    depth: int = 1

    def __post_init__(self):
        if self.channels <= 0 or self.heads <= 0 or self.channels % self.heads:
            raise ShapeError(f"channels {self.channels} not divisible by heads {self.heads}")
        if self.window is not None and (self.window < 1 or self.window % 2 == 0):
            raise ShapeError(f"window must be odd and >= 1, got {self.window}")

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads


def _split_heads(x: Tensor, heads: int) -> Tensor:
    # [N, T, C] -> [N, M, T, d]
    n, t, c = x.shape
    return permute(reshape(x, (n, t, heads, c // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    n, m, t, d = x.shape
    return reshape(permute(x, (0, 2, 1, 3)), (n, t, m * d))


def mhsa(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor, heads: int, return_attention: bool = False):
    """Global multi-head self-attention over ``x`` of shape ``[T, C]`` or ``[N, T, C]``.

    Per head: ``softmax(Q K^T / sqrt(d)) V`` with ``d = C / heads``; heads are
    concatenated and projected by ``wo``.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1, *x.shape))
    n, t, c = x.shape
    if t == 0:
        raise ShapeError("attention over zero tokens")
    if c % heads:
        raise ShapeError(f"channels {c} not divisible by heads {heads}")
    d = c // heads
    q = _split_heads(F.linear(x, wq), heads)
    k = _split_heads(F.linear(x, wk), heads)
    v = _split_heads(F.linear(x, wv), heads)
    add_macs("attention", 2 * n * heads * t * t * d)
    logits = matmul(q, permute(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(d))
    attn = F.softmax(logits, axis=-1)
    out = F.linear(_merge_heads(matmul(attn, v)), wo)
    if squeeze:
        out = reshape(out, (t, c))
    return (out, attn) if return_attention else out


def window_starts(n: int, k: int) -> np.ndarray:
    """First row/column of the clamped k-wide window for each position."""
    return np.clip(np.arange(n) - k // 2, 0, n - k).astype(np.intp)


def effective_window(window: int, h: int, w: int) -> tuple[int, int]:
    return min(window, h), min(window, w)


def neighborhood_attention(q: Tensor, k: Tensor, v: Tensor, kh: int, kw: int, return_attention: bool = False):
    """Attention of each position of ``[B, H, W, d]`` maps over its kh x kw window.

    Windows are clamped (shifted) at the borders so every query sees exactly
    ``kh * kw`` keys.
    """
    nb, h, w, d = q.shape
    if kh > h or kw > w:
        raise ShapeError(f"window {kh}x{kw} larger than map {h}x{w}")
    sh, sw = window_starts(h, kh), window_starts(w, kw)
    kern = backend.kernels
    scale = q.dtype.type(1.0 / math.sqrt(d))
    add_macs("attention", 2 * nb * h * w * kh * kw * d)
    qd, kd, vd = q.data, k.data, v.data
    logits = kern.na_logits(qd, kd, sh, sw, kh, kw) * scale
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    attn = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(kern.na_apply(attn, vd, sh, sw, kh, kw))

    def bw(g):
        g = np.ascontiguousarray(g)
        dattn = kern.na_logits(g, vd, sh, sw, kh, kw)
        dlog = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True)) * scale
        dq = kern.na_apply(dlog, kd, sh, sw, kh, kw)
        dk = kern.na_scatter(dlog, qd, sh, sw, kh, kw)
        dv = kern.na_scatter(attn, g, sh, sw, kh, kw)
        return (dq, dk, dv)

    out = record(out, (q, k, v), bw)
    return (out, attn) if return_attention else out


def local_attention_nhwc(x: Tensor, wq, wk, wv, wo, heads: int, window: int, return_attention=False):
    """Local window attention on a channels-last map ``[N, H, W, C]``."""
    n, h, w, c = x.shape
    if window < 1 or window % 2 == 0:
        raise ShapeError(f"window must be odd, got {window}")
    if c % heads:
        raise ShapeError(f"channels {c} not divisible by heads {heads}")
    d = c // heads
    kh, kw = effective_window(window, h, w)

    def split(t: Tensor) -> Tensor:
        t = permute(reshape(t, (n, h, w, heads, d)), (0, 3, 1, 2, 4))
        return reshape(t, (n * heads, h, w, d))

    q, k, v = split(F.linear(x, wq)), split(F.linear(x, wk)), split(F.linear(x, wv))
    res = neighborhood_attention(q, k, v, kh, kw, return_attention)
    o, attn = res if return_attention else (res, None)
    o = reshape(permute(reshape(o, (n, heads, h, w, d)), (0, 2, 3, 1, 4)), (n, h, w, c))
    out = F.linear(o, wo)
    return (out, attn) if return_attention else out


def local_window_attention(x: Tensor, wq, wk, wv, wo, heads: int, window: int, return_attention=False):
    """Local window attention on ``[C, H, W]`` or ``[N, C, H, W]`` feature maps."""
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1, *x.shape))
    res = local_attention_nhwc(permute(x, (0, 2, 3, 1)), wq, wk, wv, wo, heads, window, return_attention)
    o, attn = res if return_attention else (res, None)
    o = permute(o, (0, 3, 1, 2))
    if squeeze:
        o = reshape(o, o.shape[1:])
    return (o, attn) if return_attention else o


# -- modules ---------------------------------------------------------------
class Attention(Module):
    """Q/K/V/output projections (bias-free) with global or windowed attention."""

    def __init__(self, channels: int, heads: int, window: int | None = None, rng=None):
        super().__init__()
        if channels % heads:
            raise ShapeError(f"channels {channels} not divisible by heads {heads}")
        self.heads = heads
        self.window = window
        self.wq = Linear(channels, channels, bias=False, rng=rng)
        self.wk = Linear(channels, channels, bias=False, rng=rng)
        self.wv = Linear(channels, channels, bias=False, rng=rng)
        self.wo = Linear(channels, channels, bias=False, rng=rng)

    def forward(self, x: Tensor, spatial: tuple[int, int] | None = None) -> Tensor:
        w = (self.wq.weight, self.wk.weight, self.wv.weight, self.wo.weight)
        if self.window is None:
            return mhsa(x, *w, self.heads)
        n, t, c = x.shape
        h, wd = spatial
        out = local_attention_nhwc(reshape(x, (n, h, wd, c)), *w, self.heads, self.window)
        return reshape(out, (n, t, c))


class Mlp(Module):
    def __init__(self, channels: int, hidden: int, rng=None):
        super().__init__()
        self.fc1 = Linear(channels, hidden, rng=rng)
        self.fc2 = Linear(hidden, channels, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class TransformerBlock(Module):
    """``x + attn(ln(x))`` followed by ``x + mlp(ln(x))`` on ``[N, T, C]`` tokens."""

    def __init__(self, cfg: AttentionConfig, rng=None):
        super().__init__()
        self.cfg = cfg
        self.norm1 = LayerNorm(cfg.channels)
        self.attn = Attention(cfg.channels, cfg.heads, cfg.window, rng=rng)
        self.norm2 = LayerNorm(cfg.channels)
        self.mlp = Mlp(cfg.channels, int(round(cfg.mlp_ratio * cfg.channels)), rng=rng)

    def forward(self, x: Tensor, spatial: tuple[int, int] | None = None) -> Tensor:
        x = x + self.attn(self.norm1(x), spatial)
        return x + self.mlp(self.norm2(x))
