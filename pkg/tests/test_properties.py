"""Randomised properties driven by hypothesis."""

from fractions import Fraction

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from test_reparam import KERNELS, branch_sum, random_branch

from lmnet import functional as F
from lmnet import tensor as T
from lmnet.attention import mhsa
from lmnet.data import resize_mask
from lmnet.metrics import confusion_stats, dice, hausdorff, iou
from lmnet.reparam import merge_branches
from lmnet.tensor import Tensor

seeds = st.integers(0, 2**32 - 1)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), seeds)
def test_matmul_matches_loop(m, k, n, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((m, k)), rng.standard_normal((k, n))
    ref = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            ref[i, j] = acc
    assert np.array_equal(T.matmul(Tensor(a), Tensor(b)).data, ref)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(2, 4), seeds)
def test_dice_iou_identity_exact(h, w, c, seed):
    rng = np.random.default_rng(seed)
    p, r = rng.integers(0, c, (h, w)), rng.integers(0, c, (h, w))
    s = confusion_stats(p, r, c)
    d, j = dice(s), iou(s)
    for k in range(c):
        tp, fp, fn = int(s.tp[k]), int(s.fp[k]), int(s.fn[k])
        if tp + fp + fn == 0:
            continue
        dk, jk = Fraction(2 * tp, 2 * tp + fp + fn), Fraction(tp, tp + fp + fn)
        assert dk == 2 * jk / (1 + jk)
        assert abs(d[k] - float(dk)) < 1e-15 and abs(j[k] - float(jk)) < 1e-15


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 20), st.integers(1, 20), st.integers(1, 40), st.integers(1, 40), seeds)
def test_mask_resize_keeps_label_subset(h, w, oh, ow, seed):
    m = np.random.default_rng(seed).integers(0, 3, (h, w))
    out = resize_mask(m, (oh, ow))
    assert out.shape == (oh, ow)
    assert set(np.unique(out)) <= set(np.unique(m))
    if oh >= h and ow >= w:
        assert set(np.unique(out)) == set(np.unique(m))


@settings(max_examples=25, deadline=None)
@given(st.lists(st.sampled_from(KERNELS), min_size=1, max_size=4, unique=True), st.integers(1, 3), seeds)
def test_branch_fusion_equivalence(kernels, c, seed):
    rng = np.random.default_rng(seed)
    branches = [random_branch(rng, c, k) for k in kernels]
    x = Tensor(rng.standard_normal((2, c, 7, 6)))
    diff = np.abs(merge_branches(branches)(x).data - branch_sum(x, branches)).max()
    assert diff < 1e-10


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.sampled_from([1, 2]), seeds)
def test_mhsa_permutation_equivariant(n, heads, seed):
    rng = np.random.default_rng(seed)
    d = 4
    x = rng.standard_normal((n, d))
    ws = [Tensor(rng.standard_normal((d, d)) * 0.5) for _ in range(4)]
    perm = rng.permutation(n)
    y = mhsa(Tensor(x), *ws, heads=heads).data
    yp = mhsa(Tensor(x[perm]), *ws, heads=heads).data
    np.testing.assert_allclose(yp, y[perm], atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 10), st.integers(2, 10), seeds)
def test_hausdorff_symmetric_and_metric(h, w, seed):
    rng = np.random.default_rng(seed)
    a, b, c = (rng.random((h, w)) < 0.3 for _ in range(3))
    hab, hba = hausdorff(a, b)[0], hausdorff(b, a)[0]
    assert hab == hba
    if a.any() and b.any() and c.any():
        assert hab <= hausdorff(a, c)[0] + hausdorff(c, b)[0] + 1e-12
    assert hausdorff(a, a)[0] == 0.0 or not a.any()


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(2, 6), seeds)
def test_softmax_rows_are_distributions(n, m, seed):
    x = np.random.default_rng(seed).standard_normal((n, m)) * 30
    s = F.softmax(Tensor(x), axis=-1).data
    assert np.all(s >= 0)
    np.testing.assert_allclose(s.sum(-1), 1.0, atol=1e-12)
