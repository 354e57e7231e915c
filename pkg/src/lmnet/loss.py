"""Weighted pixel-wise cross-entropy and class-balanced weights."""

from __future__ import annotations

import logging
from typing import Sequence

import numpy as np

from .autodiff import record
from .errors import ShapeError
from .tensor import Tensor

log = logging.getLogger(__name__)


def weighted_cross_entropy(logits: Tensor, ref, class_weights: Sequence[float] | None = None) -> Tensor:
    """Mean over pixels of ``w[y] * -log softmax(logits)[y]``.

    ``logits`` is ``[N, K, H, W]`` and ``ref`` holds labels ``[N, H, W]``.
    """
    if logits.ndim != 4:
        raise ShapeError(f"logits must be [N, K, H, W], got {logits.shape}")
    n, k, h, w = logits.shape
    y = np.asarray(ref.data if isinstance(ref, Tensor) else ref)
    if y.shape != (n, h, w):
        raise ShapeError(f"labels {y.shape} do not match logits {logits.shape}")
    y = y.astype(np.intp)
    if y.size and (y.min() < 0 or y.max() >= k):
        raise ShapeError(f"labels outside [0, {k})")
    dt = logits.dtype
    wts = np.ones(k, dt) if class_weights is None else np.asarray(class_weights, dtype=dt)
    if wts.shape != (k,):
        raise ShapeError(f"need {k} class weights, got {wts.shape}")
    if (wts <= 0).any():
        raise ValueError(f"class weights must be positive, got {wts}")

    x = logits.data
    shifted = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    onehot = np.zeros_like(x)
    np.put_along_axis(onehot, y[:, None], 1.0, axis=1)
    pix_w = wts[y]  # [N, H, W]
    count = n * h * w
    loss = -(pix_w * (logp * onehot).sum(axis=1)).sum() / count
    out = Tensor(np.asarray(loss, dtype=dt))

    def bw(g):
        p = np.exp(logp)
        return ((g * pix_w[:, None] / count) * (p - onehot),)

    return record(out, (logits,), bw)


def class_weights(counts: Sequence[int], beta: float = 0.9999) -> np.ndarray:
    """Effective-number weights ``(1 - beta) / (1 - beta**n_c)`` normalised to mean 1.

    Classes with zero pixels are excluded from weighting (weight 1) with a warning.
    """
    n = np.asarray(counts, dtype=np.float64)
    if n.ndim != 1 or (n < 0).any():
        raise ValueError(f"counts must be a 1-D array of non-negative values, got {counts}")
    if not 0.0 <= beta < 1.0:
        raise ValueError(f"beta must lie in [0, 1), got {beta}")
    present = n > 0
    if not present.any():
        raise ValueError("no class has any pixels")
    if not present.all():
        log.warning("classes %s have no pixels and are left unweighted", np.flatnonzero(~present).tolist())
    w = np.ones_like(n)
    # 1 - beta**n computed as -expm1(n*log(beta)) to stay accurate near beta = 1
    eff = -np.expm1(n[present] * np.log1p(beta - 1.0)) if beta > 0 else np.ones(present.sum())
    raw = (1.0 - beta) / eff
    w[present] = raw / raw.mean()
    return w


def pixel_counts(masks, num_classes: int) -> np.ndarray:
    total = np.zeros(num_classes, np.int64)
    for m in masks:
        total += np.bincount(np.asarray(m).ravel(), minlength=num_classes)[:num_classes]
    return total
