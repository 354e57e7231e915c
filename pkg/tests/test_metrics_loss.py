import math
from fractions import Fraction

import numpy as np
import pytest

from lmnet.autodiff import backward
from lmnet.errors import ShapeError
from lmnet.loss import class_weights, pixel_counts, weighted_cross_entropy
from lmnet.metrics import (
    MetricsReport,
    accuracy,
    boundary,
    confusion_stats,
    dice,
    evaluate,
    hausdorff,
    iou,
    precision,
    rad,
    recall,
)
from lmnet.tensor import Tensor


def brute_boundary(m):
    h, w = m.shape
    pts = []
    for i in range(h):
        for j in range(w):
            if not m[i, j]:
                continue
            nbrs = [(i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)]
            if any(not (0 <= a < h and 0 <= b < w) or not m[a, b] for a, b in nbrs):
                pts.append((i, j))
    return pts


def brute_hausdorff(p, r):
    bp, br = brute_boundary(p > 0), brute_boundary(r > 0)

    def directed(a, b):
        return max(min(math.sqrt((i - k) ** 2 + (j - l) ** 2) for k, l in b) for i, j in a)

    return max(directed(bp, br), directed(br, bp))


def random_pair(rng, size=16, classes=2):
    kind = rng.integers(3)
    if kind == 0:
        return rng.integers(0, classes, (size, size)), rng.integers(0, classes, (size, size))
    # blobs: thresholded smooth noise gives connected regions
    out = []
    for _ in range(2):
        z = rng.standard_normal((size + 4, size + 4)).cumsum(0).cumsum(1)[4:, 4:]
        z = z - z.mean()
        out.append((z > rng.uniform(-1, 1) * z.std()).astype(np.int64))
    return out


def test_confusion_examples():
    rng = np.random.default_rng(0)
    a = rng.integers(0, 3, (8, 8))
    s = confusion_stats(a, a, 3)
    assert not s.fp.any() and not s.fn.any()
    b = rng.integers(0, 2, (8, 8))
    s = confusion_stats(1 - b, b, 2)
    assert not s.tp.any() and not s.tn.any()


def test_confusion_counting_oracle():
    rng = np.random.default_rng(1)
    for _ in range(20):
        p, r = rng.integers(0, 3, (8, 8)), rng.integers(0, 3, (8, 8))
        s = confusion_stats(p, r, 3)
        for c in range(3):
            pairs = list(zip(p.ravel() == c, r.ravel() == c))
            assert s.tp[c] == sum(a and b for a, b in pairs)
            assert s.fp[c] == sum(a and not b for a, b in pairs)
            assert s.fn[c] == sum(b and not a for a, b in pairs)
            assert s.tn[c] == sum(not a and not b for a, b in pairs)


def test_confusion_errors():
    with pytest.raises(ShapeError):
        confusion_stats(np.zeros((2, 2), int), np.zeros((2, 3), int), 2)
    with pytest.raises(ShapeError):
        confusion_stats(np.full((2, 2), 2), np.zeros((2, 2), int), 2)


def test_scores_closed_forms():
    a = np.zeros((4, 4), int)
    a[:, :2] = 1
    s = confusion_stats(a, a, 2)
    assert dice(s).tolist() == [1, 1] and iou(s).tolist() == [1, 1] and accuracy(s) == 1
    b = np.zeros((4, 4), int)
    b[:, 1:3] = 1
    s = confusion_stats(a, b, 2)
    assert dice(s)[1] == 0.5 and iou(s)[1] == pytest.approx(1 / 3, abs=0)


def test_absent_class_scores_one():
    z = np.zeros((3, 3), int)
    s = confusion_stats(z, z, 3)
    assert dice(s).tolist() == [1, 1, 1] and iou(s).tolist() == [1, 1, 1]


def test_set_oracle_and_dice_iou_identity():
    rng = np.random.default_rng(2)
    for _ in range(100):
        p, r = random_pair(rng)
        s = confusion_stats(p, r, 2)
        for c in (0, 1):
            A = {tuple(i) for i in np.argwhere(p == c)}
            B = {tuple(i) for i in np.argwhere(r == c)}
            if not A and not B:
                continue
            d = Fraction(2 * len(A & B), len(A) + len(B))
            j = Fraction(len(A & B), len(A | B))
            assert dice(s)[c] == float(d) and iou(s)[c] == float(j)
            assert d == 2 * j / (1 + j)
        assert accuracy(s) == float(Fraction(int((p == r).sum()), p.size))
        tp = int(((p == 1) & (r == 1)).sum())
        if (p == 1).any():
            assert precision(s) == float(Fraction(tp, int((p == 1).sum())))
        if (r == 1).any():
            assert recall(s) == float(Fraction(tp, int((r == 1).sum())))


def test_boundary_rule():
    m = np.zeros((5, 5), bool)
    m[1:4, 1:4] = True
    b = boundary(m)
    assert b.sum() == 8 and not b[2, 2]
    assert boundary(np.ones((3, 3), bool)).sum() == 8


def test_hausdorff_examples():
    a = np.zeros((6, 6), int)
    b = np.zeros((6, 6), int)
    a[0, 0] = 1
    b[3, 4] = 1
    assert hausdorff(a, b) == (5.0, True)
    assert hausdorff(a, a) == (0.0, True)
    d, ok = hausdorff(a, np.zeros_like(a))
    assert not ok and d == math.hypot(6, 6)


def test_hausdorff_all_pairs_oracle_and_symmetry():
    rng = np.random.default_rng(3)
    checked = 0
    for _ in range(60):
        p, r = random_pair(rng)
        if not p.any() or not r.any():
            continue
        hd, ok = hausdorff(p, r)
        assert ok and hd == brute_hausdorff(p, r)
        assert hd == hausdorff(r, p)[0]
        checked += 1
    assert checked > 30


def test_hausdorff_triangle_inequality():
    rng = np.random.default_rng(4)
    for _ in range(30):
        a, b = random_pair(rng)
        c, _ = random_pair(rng)
        if a.any() and b.any() and c.any():
            assert hausdorff(a, c)[0] <= hausdorff(a, b)[0] + hausdorff(b, c)[0] + 1e-12


def test_rad():
    a = np.zeros((4, 4), int)
    a[0, :2] = 1
    assert rad(a, a) == (0.0, True)
    b = a.copy()
    b[1, :2] = 1
    assert rad(b, a) == (100.0, True)
    v, ok = rad(a, np.zeros_like(a))
    assert math.isnan(v) and not ok
    rng = np.random.default_rng(5)
    for _ in range(20):
        p, r = rng.integers(0, 2, (8, 8)), rng.integers(0, 2, (8, 8))
        ap, ar = int(p.sum()), int(r.sum())
        assert rad(p, r)[0] == 100.0 * (ap - ar) / ar


def test_metrics_invariant_under_permutation():
    rng = np.random.default_rng(6)
    p, r = rng.integers(0, 2, (8, 8)), rng.integers(0, 2, (8, 8))
    perm = rng.permutation(64)
    pp, rp = p.ravel()[perm].reshape(8, 8), r.ravel()[perm].reshape(8, 8)
    s1, s2 = confusion_stats(p, r, 2), confusion_stats(pp, rp, 2)
    assert dice(s1).tolist() == dice(s2).tolist() and iou(s1).tolist() == iou(s2).tolist()
    assert accuracy(s1) == accuracy(s2) and rad(p, r) == rad(pp, rp)


def test_evaluate_report():
    rng = np.random.default_rng(7)
    masks = [rng.integers(0, 2, (8, 8)) for _ in range(3)]
    rep = evaluate(masks, masks, 2)
    assert rep.mdice == 1 and rep.miou == 1 and rep.hausdorff == 0 and rep.rad == 0
    empty = [np.zeros((8, 8), int)]
    rep = evaluate(empty, empty, 2)
    assert math.isnan(rep.rad) and len(rep.flags) == 2
    d = rep.to_dict()
    assert d["rad"] is None
    back = MetricsReport.from_dict(d)
    assert back.mdice == rep.mdice and math.isnan(back.rad)
    fg = evaluate(masks, [1 - m for m in masks], 2, foreground_only=True)
    assert fg.mdice == fg.dice[1]
    assert "mean" in fg.table()


def test_cross_entropy_uniform_is_ln2():
    loss = weighted_cross_entropy(Tensor(np.zeros((2, 2, 3, 3))), np.zeros((2, 3, 3), int), [1.0, 1.0])
    assert abs(loss.item() - math.log(2)) < 1e-15


def test_cross_entropy_decreases_with_margin():
    y = np.ones((1, 2, 2), int)
    prev = math.inf
    for m in (0.0, 1.0, 5.0, 20.0, 50.0):
        logits = np.zeros((1, 2, 2, 2))
        logits[:, 1] = m
        cur = weighted_cross_entropy(Tensor(logits), y).item()
        assert cur < prev
        prev = cur
    assert prev < 1e-20


def test_cross_entropy_weighting_and_errors():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((1, 3, 2, 2))
    y = rng.integers(0, 3, (1, 2, 2))
    shift = np.exp(x - x.max(1, keepdims=True))
    logp = np.log(shift / shift.sum(1, keepdims=True))
    w = np.array([0.5, 1.0, 2.0])
    want = -np.mean([w[y[0, i, j]] * logp[0, y[0, i, j], i, j] for i in range(2) for j in range(2)])
    assert abs(weighted_cross_entropy(Tensor(x), y, w).item() - want) < 1e-14
    with pytest.raises(ValueError):
        weighted_cross_entropy(Tensor(x), y, [1.0, 0.0, 1.0])
    with pytest.raises(ShapeError):
        weighted_cross_entropy(Tensor(x), np.full((1, 2, 2), 3), w)


def test_cross_entropy_stable_for_large_logits():
    x = Tensor(np.array([[[[1000.0]], [[-1000.0]]]]), requires_grad=True)
    loss = weighted_cross_entropy(x, np.array([[[1]]]))
    assert loss.item() == 2000.0
    backward(loss)
    assert np.isfinite(x.grad).all()


def test_class_weights():
    assert class_weights([5, 100], beta=0.0).tolist() == [1.0, 1.0]
    w = class_weights([1, 1])
    assert w[0] == w[1] == 1.0
    beta = 0.999
    raw = np.array([(1 - beta) / (1 - beta**10), (1 - beta) / (1 - beta**1000)])
    np.testing.assert_allclose(class_weights([10, 1000], beta), raw / raw.mean(), rtol=1e-12)
    assert class_weights([10, 1000], beta).mean() == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(ValueError):
        class_weights([1, 2], beta=1.0)


def test_class_weights_absent_class(caplog):
    w = class_weights([0, 10, 30], beta=0.9)
    assert w[0] == 1.0 and "no pixels" in caplog.text
    assert w[1:].mean() == pytest.approx(1.0)


def test_pixel_counts():
    masks = [np.array([[0, 1], [1, 1]]), np.array([[0, 0], [0, 1]])]
    assert pixel_counts(masks, 2).tolist() == [4, 4]
