"""Structural re-parameterization: fold batch norm into convolutions, centre-pad
kernels to a common extent and merge parallel conv+BN branches into one
biased convolution. Also the parameter / multiply-accumulate counter used to
compare the two forms.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import no_grad
from .errors import FusionError, ShapeError
from .functional import BnParams, ConvParams, conv2d
from .profiling import count_macs
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class BranchSpec:
    """One training-time branch: a bias-free convolution followed by batch norm."""

    conv: ConvParams
    bn: BnParams

    def __post_init__(self):
        if self.conv.bias is not None:
            raise FusionError("branch convolutions must be bias-free")
        kh, kw = self.conv.kernel_size
        if tuple(self.conv.padding) != ((kh - 1) // 2, (kw - 1) // 2):
            raise FusionError(f"branch {kh}x{kw} must use centred padding, got {self.conv.padding}")
        if self.bn.gamma.shape[0] != self.conv.out_channels:
            raise FusionError("batch norm width does not match conv output channels")

    @property
    def kernel_extent(self) -> tuple[int, int]:
        return self.conv.kernel_size


@dataclass
class FusedConv:
    """Inference-time replacement for a set of branches."""

    conv: ConvParams

    def __post_init__(self):
        kh, kw = self.conv.kernel_size
        if kh % 2 == 0 or kw % 2 == 0:
            raise FusionError(f"fused kernel extent must be odd, got {kh}x{kw}")
        if self.conv.bias is None or self.conv.bias.shape[0] != self.conv.out_channels:
            raise FusionError("fused convolution needs one bias per output channel")

    @property
    def weight(self) -> np.ndarray:
        return self.conv.weight.data

    @property
    def bias(self) -> np.ndarray:
        return self.conv.bias.data

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.conv)


def fuse_conv_bn(branch: BranchSpec) -> FusedConv:
    """Fold eval-mode BN into the conv: ``K' = K * gamma/std``, ``b = beta - mean * gamma/std``."""
    k = branch.conv.weight.data
    dt = k.dtype
    bn = branch.bn
    scale = bn.gamma.data.astype(np.float64) / np.sqrt(bn.running_var.astype(np.float64) + bn.eps)
    kf = (k.astype(np.float64) * scale[:, None, None, None]).astype(dt)
    b = (bn.beta.data.astype(np.float64) - bn.running_mean.astype(np.float64) * scale).astype(dt)
    c = branch.conv
    return FusedConv(ConvParams(Tensor(kf), Tensor(b), tuple(c.stride), tuple(c.padding), c.groups))


def pad_kernel_center(kernel, target: tuple[int, int]):
    """Zero-pad ``[D, Cg, h, w]`` kernels to ``target`` with the original at the centre."""
    arr = kernel.data if isinstance(kernel, Tensor) else np.asarray(kernel)
    h, w = arr.shape[2:]
    th, tw = target
    if h % 2 == 0 or w % 2 == 0 or th % 2 == 0 or tw % 2 == 0:
        raise FusionError(f"kernel extents must be odd: {h}x{w} -> {th}x{tw}")
    if th < h or tw < w:
        raise FusionError(f"target {th}x{tw} smaller than kernel {h}x{w}")
    dh, dw = (th - h) // 2, (tw - w) // 2
    out = np.pad(arr, ((0, 0), (0, 0), (dh, dh), (dw, dw)))
    return Tensor(out) if isinstance(kernel, Tensor) else out


def _check_compatible(convs: Sequence[ConvParams]) -> None:
    ref = convs[0]
    for c in convs[1:]:
        if (
            c.out_channels != ref.out_channels
            or c.weight.shape[1] != ref.weight.shape[1]
            or c.groups != ref.groups
            or tuple(c.stride) != tuple(ref.stride)
        ):
            raise FusionError(
                f"incompatible branches: {c.weight.shape}/g{c.groups}/s{c.stride} vs "
                f"{ref.weight.shape}/g{ref.groups}/s{ref.stride}"
            )


def merge_fused(parts: Sequence[FusedConv]) -> FusedConv:
    """Sum already-folded convolutions after centring them on a common kernel."""
    if not parts:
        raise FusionError("nothing to merge")
    convs = [p.conv for p in parts]
    _check_compatible(convs)
    th = max(c.kernel_size[0] for c in convs)
    tw = max(c.kernel_size[1] for c in convs)
    ref = convs[0]
    kernel = np.zeros((ref.out_channels, ref.weight.shape[1], th, tw), dtype=ref.weight.dtype)
    bias = np.zeros(ref.out_channels, dtype=ref.weight.dtype)
    for p in parts:
        kernel += pad_kernel_center(p.weight, (th, tw))
        bias += p.bias
    return FusedConv(
        ConvParams(Tensor(kernel), Tensor(bias), tuple(ref.stride), ((th - 1) // 2, (tw - 1) // 2), ref.groups)
    )


def merge_branches(branches: Sequence[BranchSpec]) -> FusedConv:
    """One convolution equivalent to the sum of the branches' conv+BN outputs."""
    if not branches:
        raise FusionError("merge_branches needs at least one branch")
    return merge_fused([fuse_conv_bn(b) for b in branches])


def fuse_model(model):
    """Return an inference copy of ``model`` with every branch group merged.

    Already-fused models are returned unchanged.
    """
    from .model import LmNet, MultiBranchConv

    if model.training:
        raise FusionError("fuse_model needs an eval-mode model (BN statistics frozen)")
    if model.fused:
        log.warning("model is already fused; nothing to do")
        return model
    fused = LmNet(model.config, fused=True, rng=0).to(model.dtype)
    state = model.state_dict()
    new_state = {}
    for path, m in model.named_modules():
        if isinstance(m, MultiBranchConv):
            fc = merge_branches(m.branch_specs())
            new_state[f"{path}.fused.weight"] = fc.weight
            new_state[f"{path}.fused.bias"] = fc.bias
    for name, arr in state.items():
        if ".branches." not in name:
            new_state[name] = arr
    fused.load_state_dict(new_state)
    return fused.eval()


@dataclass
class CostReport:
    """Parameter and multiply-accumulate counts for one forward pass."""

    params: int
    buffers: int
    macs: int
    by_kind: dict[str, int] = field(default_factory=dict)

    @property
    def params_with_buffers(self) -> int:
        return self.params + self.buffers

    def flops(self, unit: str = "macs") -> int:
        if unit == "macs":
            return self.macs
        if unit == "flops2x":
            return 2 * self.macs
        raise ValueError(f"unknown flops unit {unit!r}")

    def to_dict(self, unit: str = "macs") -> dict:
        return {
            "params": self.params,
            "params_with_bn_buffers": self.params_with_buffers,
            "flops": self.flops(unit),
            "flops_unit": unit,
            "by_kind": dict(sorted(self.by_kind.items())),
        }


def count_cost(model, input_shape: Sequence[int]) -> CostReport:
    """Count parameters and MACs of one eval forward pass on ``input_shape``.

    Convolutions contribute ``N*D*H'*W'*(C/groups)*h*w``, linear layers
    ``tokens*in*out`` and attention both the ``QK^T`` and ``AV`` products.
    Normalization, activations and resampling are not counted.
    """
    shape = tuple(int(s) for s in input_shape)
    if len(shape) == 3:
        shape = (1, *shape)
    if len(shape) != 4 or any(s <= 0 for s in shape):
        raise ShapeError(f"input shape must be static NCHW, got {input_shape}")
    params = sum(p.size for p in model.parameters())
    buffers = sum(b.size for _, b in model.named_buffers())
    was_training = model.training
    model.eval()
    try:
        with no_grad(), count_macs() as counter:
            model(Tensor(np.zeros(shape, dtype=model.dtype)))
    finally:
        model.train(was_training)
    return CostReport(params=params, buffers=buffers, macs=sum(counter.values()), by_kind=dict(counter))
