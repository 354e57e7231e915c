"""Segmentation metrics: confusion counts, Dice, IoU, accuracy, precision,
recall, boundary Hausdorff distance and relative area difference."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np
from scipy import ndimage

from .errors import ShapeError
from .tensor import Tensor


def _labels(a) -> np.ndarray:
    arr = a.data if isinstance(a, Tensor) else np.asarray(a)
    if arr.dtype.kind not in "iub":
        raise ShapeError(f"masks must hold integer labels, got {arr.dtype}")
    return arr.astype(np.int64)


def _check_pair(pred, ref):
    p, r = _labels(pred), _labels(ref)
    if p.shape != r.shape:
        raise ShapeError(f"mask shapes differ: {p.shape} vs {r.shape}")
    return p, r


@dataclass(frozen=True)
class ConfusionStats:
    """One-vs-rest counts per class, each an int64 array of length ``num_classes``."""

    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray

    @property
    def num_classes(self) -> int:
        return len(self.tp)

    def __add__(self, other: "ConfusionStats") -> "ConfusionStats":
        return ConfusionStats(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)


def confusion_stats(pred, ref, num_classes: int) -> ConfusionStats:
    p, r = _check_pair(pred, ref)
    if p.size and (min(p.min(), r.min()) < 0 or max(p.max(), r.max()) >= num_classes):
        raise ShapeError(f"labels outside [0, {num_classes})")
    cm = np.bincount(r.ravel() * num_classes + p.ravel(), minlength=num_classes**2).reshape(num_classes, num_classes)
    tp = np.diag(cm).astype(np.int64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    tn = p.size - tp - fp - fn
    return ConfusionStats(tp, fp, fn, tn)


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    # empty class (absent from both masks) scores 1
    num = num.astype(np.float64)
    den = den.astype(np.float64)
    out = np.ones_like(num)
    nz = den > 0
    out[nz] = num[nz] / den[nz]
    return out


def dice(stats: ConfusionStats) -> np.ndarray:
    return _ratio(2 * stats.tp, 2 * stats.tp + stats.fp + stats.fn)


def iou(stats: ConfusionStats) -> np.ndarray:
    return _ratio(stats.tp, stats.tp + stats.fp + stats.fn)


def accuracy(stats: ConfusionStats) -> float:
    total = stats.tp[0] + stats.fp[0] + stats.fn[0] + stats.tn[0]
    return float(stats.tp.sum() / total) if total else 1.0


def precision(stats: ConfusionStats, cls: int = 1) -> float:
    return float(_ratio(stats.tp[cls : cls + 1], stats.tp[cls : cls + 1] + stats.fp[cls : cls + 1])[0])


def recall(stats: ConfusionStats, cls: int = 1) -> float:
    return float(_ratio(stats.tp[cls : cls + 1], stats.tp[cls : cls + 1] + stats.fn[cls : cls + 1])[0])


def boundary(mask) -> np.ndarray:
    """Foreground pixels with at least one 4-neighbour outside the foreground.

    Pixels on the image border count as having a background neighbour.
    """
    m = np.asarray(mask).astype(bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    return m & ~interior


def _directed(a: np.ndarray, b: np.ndarray) -> float:
    # max over pixels of a of the distance to the nearest pixel of b
    dist = ndimage.distance_transform_edt(~b)
    return float(dist[a].max())


def hausdorff(pred, ref) -> tuple[float, bool]:
    """Symmetric Hausdorff distance (pixels) between the boundary sets.

    Returns ``(distance, valid)``. When either foreground is empty the
    distance is the image diagonal and ``valid`` is False.
    """
    p, r = _check_pair(pred, ref)
    if p.ndim != 2:
        raise ShapeError(f"hausdorff expects 2-D masks, got {p.shape}")
    bp, br = boundary(p > 0), boundary(r > 0)
    if not bp.any() or not br.any():
        return math.hypot(*p.shape), False
    return max(_directed(bp, br), _directed(br, bp)), True


def rad(pred, ref) -> tuple[float, bool]:
    """Signed relative area difference in percent, ``(value, valid)``.

    Undefined (NaN, invalid) when the reference foreground is empty.
    """
    p, r = _check_pair(pred, ref)
    ar = int((r > 0).sum())
    if ar == 0:
        return math.nan, False
    return 100.0 * (int((p > 0).sum()) - ar) / ar, True


@dataclass
class MetricsReport:
    num_classes: int
    dice: list[float]
    iou: list[float]
    mdice: float
    miou: float
    accuracy: float
    precision: float
    recall: float
    hausdorff: float
    rad: float
    foreground_only: bool = False
    images: int = 1
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("hausdorff", "rad"):
            if isinstance(d[k], float) and math.isnan(d[k]):
                d[k] = None
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = dict(d)
        for k in ("hausdorff", "rad"):
            if d.get(k) is None:
                d[k] = math.nan
        return cls(**d)

    def table(self) -> str:
        rows = [("class", "dice", "iou")]
        rows += [(str(c), f"{d:.4f}", f"{i:.4f}") for c, (d, i) in enumerate(zip(self.dice, self.iou))]
        rows.append(("mean", f"{self.mdice:.4f}", f"{self.miou:.4f}"))
        lines = [f"{a:>6} {b:>8} {c:>8}" for a, b, c in rows]
        lines.append(f"accuracy {self.accuracy:.4f}  precision {self.precision:.4f}  recall {self.recall:.4f}")
        lines.append(f"Hd {self.hausdorff:.3f} px  RAD {self.rad:.2f} %")
        lines.extend(f"note: {f}" for f in self.flags)
        return "\n".join(lines)


def evaluate(
    preds: Iterable, refs: Iterable, num_classes: int = 2, foreground_only: bool = False
) -> MetricsReport:
    """Aggregate metrics over a set of mask pairs.

    Dice, IoU, accuracy, precision and recall are computed from confusion
    counts pooled over all images. Hd and RAD are per-image foreground
    (label > 0) scores averaged over images where they are defined.
    """
    stats = None
    hds, rads, flags = [], [], []
    n = 0
    for idx, (p, r) in enumerate(zip(preds, refs)):
        s = confusion_stats(p, r, num_classes)
        stats = s if stats is None else stats + s
        hd, ok = hausdorff(p, r)
        hds.append(hd)
        if not ok:
            flags.append(f"image {idx}: empty foreground, Hd set to diagonal {hd:.3f}")
        rv, ok = rad(p, r)
        if ok:
            rads.append(rv)
        else:
            flags.append(f"image {idx}: empty reference, RAD undefined")
        n += 1
    if stats is None:
        raise ShapeError("evaluate needs at least one mask pair")
    d, i = dice(stats), iou(stats)
    sel = slice(1, None) if foreground_only else slice(None)
    return MetricsReport(
        num_classes=num_classes,
        dice=d.tolist(),
        iou=i.tolist(),
        mdice=float(d[sel].mean()),
        miou=float(i[sel].mean()),
        accuracy=accuracy(stats),
        precision=precision(stats),
        recall=recall(stats),
        hausdorff=float(np.mean(hds)),
        rad=float(np.mean(rads)) if rads else math.nan,
        foreground_only=foreground_only,
        images=n,
        flags=flags,
    )
