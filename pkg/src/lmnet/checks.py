"""Finite-difference gradient suite over every differentiable primitive and
a small end-to-end network, all in float64."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import functional as F
from . import tensor as T
from .attention import (
    AttentionConfig,
    TransformerBlock,
    local_window_attention,
    mhsa,
    neighborhood_attention,
)
from .autodiff import GradCheckReport, grad_check
from .loss import weighted_cross_entropy
from .model import LmNet, MultiBranchModule, calibrate_bn, tiny_config
from .tensor import Tensor


@dataclass
class Case:
    name: str
    build: Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]]


def _leaf(rng, shape, lo=-1.0, hi=1.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, shape), dtype=np.float64, requires_grad=True)


def _unary(op):
    def build(rng):
        a = _leaf(rng, (3, 4))
        if op is T.log:
            a.data[:] = rng.uniform(0.5, 2.0, a.shape)
        r = Tensor(rng.uniform(-1, 1, (3, 4)))
        return (lambda: T.sum_(T.mul(op(a), r))), [a]

    return build


def _binary(op):
    def build(rng):
        a, b = _leaf(rng, (3, 4)), _leaf(rng, (3, 4))
        if op is T.div:
            b.data[:] = rng.uniform(0.5, 2.0, b.shape) * rng.choice([-1, 1], b.shape)
        r = Tensor(rng.uniform(-1, 1, (3, 4)))
        return (lambda: T.sum_(T.mul(op(a, b), r))), [a, b]

    return build


def _simple(shape_fn, fn):
    def build(rng):
        leaves = [_leaf(rng, s) for s in shape_fn]
        r_holder = {}

        def f():
            out = fn(*leaves)
            if "r" not in r_holder:
                r_holder["r"] = Tensor(np.random.default_rng(7).uniform(-1, 1, out.shape))
            return T.sum_(T.mul(out, r_holder["r"]))

        return f, leaves

    return build


def _conv(stride, padding, groups, cin, cout, k, bias=True):
    def fn(x, w, *b):
        return F.conv2d(x, w, b[0] if b else None, stride, padding, groups)

    shapes = [(2, cin, 6, 5), (cout, cin // groups, *k)] + ([(cout,)] if bias else [])
    return _simple(shapes, fn)


def _batch_norm(training):
    def build(rng):
        x, g, b = _leaf(rng, (3, 2, 4, 4)), _leaf(rng, (2,)), _leaf(rng, (2,))
        rm, rv = rng.uniform(-0.5, 0.5, 2), rng.uniform(0.5, 2.0, 2)
        r = Tensor(rng.uniform(-1, 1, x.shape))

        def f():
            # running stats are copies so repeated calls stay deterministic
            return T.sum_(T.mul(F.batch_norm(x, g, b, rm.copy(), rv.copy(), 1e-5, 0.1, training), r))

        return f, [x, g, b]

    return build


def _mhsa(rng):
    x = _leaf(rng, (5, 4))
    ws = [_leaf(rng, (4, 4)) for _ in range(4)]
    r = Tensor(rng.uniform(-1, 1, (5, 4)))
    return (lambda: T.sum_(T.mul(mhsa(x, *ws, heads=2), r))), [x, *ws]


def _na(rng):
    q, k, v = (_leaf(rng, (2, 4, 5, 3)) for _ in range(3))
    r = Tensor(rng.uniform(-1, 1, (2, 4, 5, 3)))
    return (lambda: T.sum_(T.mul(neighborhood_attention(q, k, v, 3, 3), r))), [q, k, v]


def _local(rng):
    x = _leaf(rng, (1, 4, 5, 5))
    ws = [_leaf(rng, (4, 4)) for _ in range(4)]
    r = Tensor(rng.uniform(-1, 1, (1, 4, 5, 5)))
    return (lambda: T.sum_(T.mul(local_window_attention(x, *ws, heads=2, window=3), r))), [x, *ws]


def _block(window):
    def build(rng):
        blk = TransformerBlock(AttentionConfig(4, 2, 2.0, window), rng=rng).to(np.float64)
        for p in blk.parameters():
            p.data[:] = rng.uniform(-0.5, 0.5, p.shape)
        x = _leaf(rng, (1, 9, 4))
        r = Tensor(rng.uniform(-1, 1, (1, 9, 4)))
        return (lambda: T.sum_(T.mul(blk(x, (3, 3)), r))), [x, *blk.parameters()]

    return build


def _wce(rng):
    logits = _leaf(rng, (2, 3, 4, 4), -2, 2)
    y = rng.integers(0, 3, (2, 4, 4))
    w = rng.uniform(0.5, 2.0, 3)
    return (lambda: weighted_cross_entropy(logits, y, w)), [logits]


def randomize_bn(model, rng) -> None:
    """Give every BN layer non-trivial affine parameters and running statistics."""
    from .nn import BatchNorm2d

    for _, m in model.named_modules():
        if isinstance(m, BatchNorm2d):
            c = m.weight.shape[0]
            m.weight.data[:] = rng.uniform(0.5, 1.5, c)
            m.bias.data[:] = rng.uniform(-0.5, 0.5, c)
            m.running_mean[:] = rng.uniform(-0.5, 0.5, c)
            m.running_var[:] = rng.uniform(0.5, 2.0, c)


def mb_block_loss(rng, training: bool = False):
    """Weighted cross-entropy on the output of one multi-branch block (six classes).

    Returns ``(f, params)`` ready for :func:`grad_check`.
    """
    m = MultiBranchModule(4, 6, expansion=2, se_reduction=2, rng=rng).to(np.float64)
    randomize_bn(m, rng)
    m.train(training)
    x = _leaf(rng, (2, 4, 6, 6))
    y = rng.integers(0, 6, (2, 6, 6))
    return (lambda: weighted_cross_entropy(m(x), y)), [x, *m.parameters()]


def _mb_module(rng):
    return mb_block_loss(rng)


def primitive_cases() -> list[Case]:
    cases = [
        Case("add", _binary(T.add)),
        Case("sub", _binary(T.sub)),
        Case("mul", _binary(T.mul)),
        Case("div", _binary(T.div)),
        Case("relu", _unary(T.relu)),
        Case("sigmoid", _unary(T.sigmoid)),
        Case("exp", _unary(T.exp)),
        Case("log", _unary(T.log)),
        Case("sum_axis", _simple([(3, 4, 2)], lambda a: T.sum_(a, axis=1))),
        Case("mean_axis", _simple([(3, 4, 2)], lambda a: T.mean(a, axis=(0, 2)))),
        Case("matmul", _simple([(3, 5), (5, 2)], T.matmul)),
        Case("matmul_batched", _simple([(2, 3, 5), (2, 5, 4)], T.matmul)),
        Case("reshape", _simple([(2, 6)], lambda a: T.reshape(a, (3, 4)))),
        Case("permute", _simple([(2, 3, 4)], lambda a: T.permute(a, (2, 0, 1)))),
        Case("concat", _simple([(2, 3), (2, 2)], lambda a, b: T.concat([a, b], axis=1))),
        Case("slice", _simple([(4, 5)], lambda a: T.slice_axis(a, 1, 1, 4))),
        Case("conv2d_3x3", _conv(1, 1, 1, 2, 3, (3, 3))),
        Case("conv2d_strided", _conv(2, 1, 1, 2, 3, (3, 3))),
        Case("conv2d_grouped", _conv(1, (1, 0), 2, 4, 4, (3, 1))),
        Case("conv2d_depthwise", _conv(1, (0, 2), 3, 3, 3, (1, 5), bias=False)),
        Case("conv2d_1x1", _conv(1, 0, 1, 3, 2, (1, 1))),
        Case("batch_norm_train", _batch_norm(True)),
        Case("batch_norm_eval", _batch_norm(False)),
        Case("layer_norm", _simple([(3, 5), (5,), (5,)], lambda x, g, b: F.layer_norm(x, g, b))),
        Case("linear", _simple([(3, 4), (4, 2), (2,)], F.linear)),
        Case("softmax", _simple([(3, 4)], lambda a: F.softmax(a, axis=-1))),
        Case("gelu", _simple([(3, 4)], F.gelu)),
        Case("max_pool2", _simple([(1, 2, 4, 6)], F.max_pool2)),
        Case("bilinear_up", _simple([(1, 2, 3, 4)], lambda a: F.bilinear_resize(a, 7, 5))),
        Case("bilinear_down", _simple([(1, 2, 8, 6)], lambda a: F.bilinear_resize(a, 3, 4))),
        Case("global_avg_pool", _simple([(2, 3, 4, 4)], F.global_avg_pool)),
        Case("se_block", _simple([(2, 4, 3, 3), (4, 2), (2, 4)], F.se_block)),
        Case("mhsa", _mhsa),
        Case("neighborhood_attention", _na),
        Case("local_window_attention", _local),
        Case("transformer_block", _block(None)),
        Case("transformer_block_local", _block(3)),
        Case("weighted_cross_entropy", _wce),
        Case("multi_branch_module", _mb_module),
    ]
    return cases


def run_primitives(seed: int = 0, tolerance: float = 1e-4, eps: float = 1e-5,
                   kink_retries: int = 3) -> dict[str, GradCheckReport]:
    out = {}
    for i, case in enumerate(primitive_cases()):
        f, params = case.build(np.random.default_rng([seed, i]))
        out[case.name] = grad_check(f, params, eps=eps, tolerance=tolerance, seed=seed, kink_retries=kink_retries)
    return out


def full_net_check(seed: int = 0, size: int = 32, tolerance: float = 1e-3, eps: float = 1e-5,
                   max_per_param: int = 2, kink_retries: int = 3) -> GradCheckReport:
    """Gradient check of the tiny network on one ``3 x size x size`` image.

    BN statistics are first calibrated on a separate random batch and the
    check runs in eval mode, so the loss is a fixed function of the weights.
    (In train mode several gradients are exactly zero by the scale
    invariance of batch statistics, and a relative error on those only
    measures rounding noise.)
    """
    rng = np.random.default_rng(seed)
    cfg = tiny_config(input_size=(size, size))
    net = LmNet(cfg, rng=rng).to(np.float64)
    calibrate_bn(net, Tensor(rng.uniform(0.0, 1.0, (4, 3, size, size))))
    x = Tensor(rng.uniform(0.0, 1.0, (1, 3, size, size)))
    y = rng.integers(0, cfg.num_classes, (1, size, size))

    def f():
        return weighted_cross_entropy(net(x), y)

    return grad_check(f, net.parameters(), eps=eps, tolerance=tolerance, max_per_param=max_per_param,
                      seed=seed, kink_retries=kink_retries)
