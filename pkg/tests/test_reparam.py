import numpy as np
import pytest

from lmnet import functional as F
from lmnet.autodiff import backward
from lmnet.errors import FusionError
from lmnet.functional import BnParams, ConvParams
from lmnet.model import LmNet, MultiBranchModule, tiny_config
from lmnet.nn import Conv2d, Module
from lmnet.reparam import (
    BranchSpec,
    count_cost,
    fuse_conv_bn,
    fuse_model,
    merge_branches,
    merge_fused,
    pad_kernel_center,
)
from lmnet.tensor import Tensor

KERNELS = ((3, 1), (1, 3), (3, 3), (5, 5))


def random_branch(rng, c, k, groups=None, dtype=np.float64):
    groups = groups or c
    w = rng.standard_normal((c, c // groups, *k)).astype(dtype)
    bn = BnParams(
        Tensor(rng.uniform(0.5, 1.5, c).astype(dtype)),
        Tensor(rng.uniform(-0.5, 0.5, c).astype(dtype)),
        rng.uniform(-0.5, 0.5, c).astype(dtype),
        rng.uniform(0.5, 2.0, c).astype(dtype),
    )
    pad = ((k[0] - 1) // 2, (k[1] - 1) // 2)
    return BranchSpec(ConvParams(Tensor(w), None, (1, 1), pad, groups), bn)


def branch_sum(x, branches):
    out = 0
    for b in branches:
        out = out + F.batch_norm_params(F.conv2d(x, b.conv), b.bn).data
    return out


def scalar_branch(k, gamma, var, mean, beta, eps=1e-5):
    f = lambda v: np.array([v], np.float64)  # noqa: E731
    bn = BnParams(Tensor(f(gamma)), Tensor(f(beta)), f(mean), f(var), eps)
    return BranchSpec(ConvParams(Tensor(np.full((1, 1, 1, 1), k)), None, (1, 1), (0, 0), 1), bn)


def test_neutral_bn_keeps_kernel():
    eps = 1e-5
    fc = fuse_conv_bn(scalar_branch(2.0, np.sqrt(1.0 + eps), 1.0, 0.0, 0.0, eps))
    assert abs(fc.weight.item() - 2.0) < 1e-15 and fc.bias.item() == 0.0


def test_fold_hand_example():
    # eta=1, delta=2, mu=0.5, beta=0.1
    fc = fuse_conv_bn(scalar_branch(2.0, 1.0, 4.0 - 1e-5, 0.5, 0.1))
    assert abs(fc.weight.item() - 1.0) < 1e-12
    assert abs(fc.bias.item() + 0.15) < 1e-12


@pytest.mark.parametrize("k", KERNELS + ((1, 1), (1, 5)))
def test_fold_forward_equivalence(k):
    rng = np.random.default_rng(hash(k) % 2**32)
    for _ in range(50 // 6 + 1):
        b = random_branch(rng, 3, k, groups=1)
        x = Tensor(rng.standard_normal((2, 3, 6, 7)))
        diff = np.abs(fuse_conv_bn(b)(x).data - branch_sum(x, [b])).max()
        assert diff < 1e-10


def test_branch_needs_centred_padding_and_no_bias():
    rng = np.random.default_rng(0)
    b = random_branch(rng, 2, (3, 3))
    with pytest.raises(FusionError):
        BranchSpec(ConvParams(b.conv.weight, None, (1, 1), (0, 0), 2), b.bn)
    with pytest.raises(FusionError):
        BranchSpec(ConvParams(b.conv.weight, Tensor(np.zeros(2)), (1, 1), (1, 1), 2), b.bn)


def test_pad_center():
    k = np.random.default_rng(1).standard_normal((2, 1, 3, 3))
    assert np.array_equal(pad_kernel_center(k, (3, 3)), k)
    row = np.array([[[[1.0, 2.0, 3.0]]]])
    p = pad_kernel_center(row, (5, 5))
    want = np.zeros((1, 1, 5, 5))
    want[0, 0, 2, 1:4] = [1, 2, 3]
    assert np.array_equal(p, want)
    with pytest.raises(FusionError):
        pad_kernel_center(row, (4, 5))
    with pytest.raises(FusionError):
        pad_kernel_center(np.zeros((1, 1, 5, 5)), (3, 3))


@pytest.mark.parametrize("k", KERNELS)
def test_padded_kernel_is_equivalent(k):
    rng = np.random.default_rng(2)
    w = rng.standard_normal((3, 1, *k))
    x = Tensor(rng.standard_normal((1, 3, 8, 9)))
    a = F.conv2d(x, Tensor(w), padding=((k[0] - 1) // 2, (k[1] - 1) // 2), groups=3).data
    b = F.conv2d(x, Tensor(pad_kernel_center(w, (5, 5))), padding=2, groups=3).data
    assert np.abs(a - b).max() < 1e-12


def test_merge_single_branch_equals_fold():
    b = random_branch(np.random.default_rng(3), 4, (3, 1))
    m, f = merge_branches([b]), fuse_conv_bn(b)
    assert np.array_equal(m.weight, f.weight) and np.array_equal(m.bias, f.bias)


def test_merge_two_unit_branches():
    eps = 1e-5
    s = np.sqrt(1.0 + eps)
    fc = merge_branches([scalar_branch(2.0, s, 1.0, 0, 0, eps), scalar_branch(3.0, s, 1.0, 0, 0, eps)])
    assert abs(fc.weight.item() - 5.0) < 1e-14 and fc.bias.item() == 0.0


def test_merge_four_branches_f64_and_f32():
    rng = np.random.default_rng(4)
    for dtype, tol in ((np.float64, 1e-10), (np.float32, 1e-4)):
        for _ in range(10):
            branches = [random_branch(rng, 6, k, dtype=dtype) for k in KERNELS]
            fc = merge_branches(branches)
            assert fc.conv.kernel_size == (5, 5) and fc.conv.padding == (2, 2)
            x = Tensor(rng.standard_normal((1, 6, 9, 8)).astype(dtype))
            ref = branch_sum(Tensor(x.data.astype(np.float64)), [_as64(b) for b in branches])
            assert np.abs(fc(x).data - ref).max() < tol


def _as64(b):
    c, bn = b.conv, b.bn
    return BranchSpec(
        ConvParams(Tensor(c.weight.data.astype(np.float64)), None, c.stride, c.padding, c.groups),
        BnParams(
            Tensor(bn.gamma.data.astype(np.float64)), Tensor(bn.beta.data.astype(np.float64)),
            bn.running_mean.astype(np.float64), bn.running_var.astype(np.float64), bn.eps,
        ),
    )


def test_merge_is_associative():
    rng = np.random.default_rng(5)
    bs = [random_branch(rng, 3, k) for k in KERNELS]
    whole = merge_branches(bs)
    pairwise = merge_fused([merge_fused([fuse_conv_bn(bs[0]), fuse_conv_bn(bs[1])]),
                            merge_fused([fuse_conv_bn(bs[2]), fuse_conv_bn(bs[3])])])
    np.testing.assert_allclose(pairwise.weight, whole.weight, atol=1e-14)
    np.testing.assert_allclose(pairwise.bias, whole.bias, atol=1e-14)


def test_merge_rejects_incompatible():
    rng = np.random.default_rng(6)
    with pytest.raises(FusionError):
        merge_branches([random_branch(rng, 3, (3, 3)), random_branch(rng, 4, (3, 3))])
    with pytest.raises(FusionError):
        merge_branches([])


def test_fused_conv_gradient_maps_through_fold():
    # d loss / dK_i = (eta_i / delta_i) * crop_i(d loss / dK')
    rng = np.random.default_rng(7)
    bs = [random_branch(rng, 2, k) for k in ((3, 1), (3, 3))]
    fc = merge_branches(bs)
    x = Tensor(rng.standard_normal((1, 2, 5, 5)))
    r = rng.standard_normal((1, 2, 5, 5))
    wf = Tensor(fc.weight.copy(), requires_grad=True)
    backward((F.conv2d(x, wf, Tensor(fc.bias), padding=(1, 1), groups=2) * Tensor(r)).sum())
    for b in bs:
        w = Tensor(b.conv.weight.data.copy(), requires_grad=True)
        y = F.batch_norm_params(F.conv2d(x, w, None, 1, b.conv.padding, 2), b.bn)
        backward((y * Tensor(r)).sum())
        scale = (b.bn.gamma.data / b.bn.std)[:, None, None, None]
        kh, kw = b.conv.kernel_size
        dh, dw = (3 - kh) // 2, (3 - kw) // 2
        np.testing.assert_allclose(w.grad, scale * wf.grad[:, :, dh : dh + kh, dw : dw + kw], atol=1e-12)


def test_cost_closed_forms():
    class One(Module):
        def __init__(self, conv):
            super().__init__()
            self.conv = conv

        def forward(self, x):
            return self.conv(x)

    pw = One(Conv2d(8, 8, 1))
    c = count_cost(pw, (1, 8, 4, 4))
    assert c.params == 64 + 8 and c.macs == 1024
    dw = One(Conv2d(16, 16, 3, groups=16, bias=False))
    c = count_cost(dw, (1, 16, 8, 8))
    assert c.params == 144 and c.macs == 9216
    assert c.flops("flops2x") == 2 * 9216


def test_fused_module_is_cheaper():
    for cin, cout, e in ((4, 8, 2), (8, 8, 1), (3, 5, 3)):
        m = MultiBranchModule(cin, cout, expansion=e, se_reduction=1, rng=0).eval()
        f = MultiBranchModule(cin, cout, expansion=e, se_reduction=1, fused=True, rng=0).eval()
        a, b = count_cost(m, (1, cin, 8, 8)), count_cost(f, (1, cin, 8, 8))
        assert b.params < a.params and b.macs < a.macs


def test_fuse_model_requires_eval_and_is_idempotent():
    net = LmNet(tiny_config(input_size=(32, 32)), rng=0)
    with pytest.raises(FusionError):
        fuse_model(net)
    fused = fuse_model(net.eval())
    assert fused.fused and fuse_model(fused) is fused
    x = Tensor(np.random.default_rng(0).random((1, 3, 32, 32)).astype(np.float32))
    assert net(x).shape == fused(x).shape
