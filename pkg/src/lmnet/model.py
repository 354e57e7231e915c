"""The segmentation network: stem, four encoder stages of multi-branch
modules, a global feature transformer bridge, per-stage local feature
transformers on the skips and a level-by-level late-fusion decoder.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import functional as F
from .attention import AttentionConfig, TransformerBlock
from .errors import ShapeError
from .nn import Conv2d, ConvBN, Module, ModuleList, SqueezeExcite
from .tensor import Tensor, concat, permute, reshape

DEFAULT_KERNELS = ((3, 1), (1, 3), (3, 3), (5, 5))


@dataclass
class LmNetConfig:
    in_channels: int = 3
    num_classes: int = 2
    base_channels: int = 16
    expansion: int = 2
    se_reduction: int = 4
    kernels: tuple = DEFAULT_KERNELS
    channel_cap: int | None = 8
    gft_stride: int = 16
    gft_heads: int = 4
    gft_depth: int = 1
    lft_heads: tuple = (1, 2, 4, 4)
    lft_window: tuple = (7, 7, 7, 7)
    lft_depth: int = 1
    mlp_ratio: float = 4.0
    input_size: tuple = (256, 256)

    def __post_init__(self):
        self.kernels = tuple(tuple(int(v) for v in k) for k in self.kernels)
        self.lft_heads = tuple(int(v) for v in self.lft_heads)
        self.lft_window = tuple(int(v) for v in self.lft_window)
        self.input_size = tuple(int(v) for v in self.input_size)
        self.validate()

    def validate(self) -> None:
        h, w = self.input_size
        if h % 16 or w % 16:
            raise ShapeError(f"input size {h}x{w} must be divisible by 16")
        if self.num_classes < 2:
            raise ShapeError("num_classes must be >= 2")
        if not self.kernels or any(k % 2 == 0 for kk in self.kernels for k in kk):
            raise ShapeError(f"branch kernels must be odd: {self.kernels}")
        if len(self.lft_heads) != 4 or len(self.lft_window) != 4:
            raise ShapeError("lft_heads and lft_window need one entry per stage")
        ch = self.level_channels
        if ch[4] % self.gft_heads:
            raise ShapeError(f"GFT width {ch[4]} not divisible by {self.gft_heads} heads")
        for i in range(4):
            if ch[i] % self.lft_heads[i]:
                raise ShapeError(f"LFT{i + 1} width {ch[i]} not divisible by {self.lft_heads[i]} heads")
            if self.lft_window[i] % 2 == 0:
                raise ShapeError("LFT windows must be odd")
        if self.gft_stride not in (1, 2, 4, 8, 16):
            raise ShapeError("gft_stride must be a power of two <= 16")

    @property
    def level_channels(self) -> list[int]:
        """Channels of pyramid levels x1..x5 (strides 1, 2, 4, 8, 16)."""
        mult = [1, 2, 4, 8, 16]
        if self.channel_cap is not None:
            mult = [min(m, self.channel_cap) for m in mult]
        return [self.base_channels * m for m in mult]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["kernels"] = [list(k) for k in self.kernels]
        for key in ("lft_heads", "lft_window", "input_size"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LmNetConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def tiny_config(**overrides) -> LmNetConfig:
    """Desk-scale configuration used for the synthetic training runs."""
    base = dict(base_channels=8, input_size=(64, 64), lft_heads=(1, 1, 2, 4), lft_window=(5, 5, 5, 5))
    base.update(overrides)
    return LmNetConfig(**base)


@dataclass
class FeaturePyramid:
    strides: list[int]
    maps: list[Tensor]

    def __post_init__(self):
        if len(self.strides) != len(self.maps):
            raise ShapeError("one stride per map")
        for a, b in zip(self.strides, self.strides[1:]):
            if b <= a:
                raise ShapeError(f"pyramid strides must increase: {self.strides}")
        if self.maps:
            h0 = self.maps[0].shape[2] * self.strides[0]
            w0 = self.maps[0].shape[3] * self.strides[0]
            for s, m in zip(self.strides, self.maps):
                if m.shape[2] * s != h0 or m.shape[3] * s != w0:
                    raise ShapeError(f"level of stride {s} has extent {m.shape[2:]}")

    def __len__(self) -> int:
        return len(self.maps)

    def __getitem__(self, i: int) -> Tensor:
        return self.maps[i]


# -- blocks -------------------------------------------------------------------
class MultiBranchConv(Module):
    """Parallel depthwise conv+BN branches, or their single fused replacement."""

    def __init__(self, channels: int, kernels: Sequence[tuple[int, int]], fused: bool = False, rng=None):
        super().__init__()
        self.channels = channels
        self.kernels = tuple(tuple(k) for k in kernels)
        if fused:
            kh = max(k[0] for k in self.kernels)
            kw = max(k[1] for k in self.kernels)
            self.fused = Conv2d(channels, channels, (kh, kw), groups=channels, bias=True, rng=rng)
        else:
            self.fused = None
            self.branches = ModuleList(ConvBN(channels, channels, k, groups=channels, rng=rng) for k in self.kernels)

    def branch_specs(self):
        from .reparam import BranchSpec

        if self.fused is not None:
            raise ShapeError("branches already merged")
        return [BranchSpec(b.conv.params(), b.bn.params()) for b in self.branches]

    def forward(self, x: Tensor) -> Tensor:
        if self.fused is not None:
            return self.fused(x)
        out = None
        for b in self.branches:
            y = b(x)
            out = y if out is None else out + y
        return out


class MultiBranchModule(Module):
    """1x1 expansion, multi-branch depthwise conv, SE, 1x1 projection, plus a
    1x1 conv shortcut: ``project(se(relu(dw(relu(expand(x)))))) + shortcut(x)``.
    """

    def __init__(self, cin, cout, expansion=2, se_reduction=4, kernels=DEFAULT_KERNELS, fused=False, rng=None):
        super().__init__()
        mid = cin * expansion
        self.expand = ConvBN(cin, mid, 1, rng=rng)
        self.dw = MultiBranchConv(mid, kernels, fused=fused, rng=rng)
        self.se = SqueezeExcite(mid, se_reduction, rng=rng)
        self.project = ConvBN(mid, cout, 1, rng=rng)
        self.shortcut = ConvBN(cin, cout, 1, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        y = self.expand(x).relu()
        y = self.dw(y).relu()
        y = self.project(self.se(y))
        return y + self.shortcut(x)


class FeatureTransformer(Module):
    """Resize a pyramid to one resolution, concatenate, aggregate with a 3x3
    conv, then run transformer blocks over the flattened tokens."""

    def __init__(self, in_channels: int, cfg: AttentionConfig, rng=None):
        super().__init__()
        self.cfg = cfg
        self.embed = Conv2d(in_channels, cfg.channels, 3, rng=rng)
        self.blocks = ModuleList(TransformerBlock(cfg, rng=rng) for _ in range(cfg.depth))

    def embed_maps(self, maps: Sequence[Tensor], size: tuple[int, int]) -> Tensor:
        resized = [F.bilinear_resize(m, *size) for m in maps]
        return self.embed(concat(resized, axis=1))

    def forward(self, maps: Sequence[Tensor], size: tuple[int, int]) -> Tensor:
        x = self.embed_maps(maps, size)
        n, c, h, w = x.shape
        tokens = reshape(permute(x, (0, 2, 3, 1)), (n, h * w, c))
        for blk in self.blocks:
            tokens = blk(tokens, (h, w))
        return permute(reshape(tokens, (n, h, w, c)), (0, 3, 1, 2))


def lft_levels(stage: int) -> list[int]:
    """Pyramid levels (1-based x indices) feeding the local transformer of ``stage``.

    Stage i reads the outputs of its neighbouring encoder stages, i.e.
    x_i..x_{i+2} restricted to the stage outputs x2..x5, giving 2/3/3/2
    levels for stages 1..4.
    """
    if stage not in (1, 2, 3, 4):
        raise ShapeError(f"stage must be 1..4, got {stage}")
    return [j for j in (stage, stage + 1, stage + 2) if 2 <= j <= 5]


class LmNet(Module):
    def __init__(self, config: LmNetConfig | None = None, fused: bool = False, rng=None):
        super().__init__()
        cfg = config or LmNetConfig()
        self.config = cfg
        self.fused = fused
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        ch = cfg.level_channels
        mb = dict(expansion=cfg.expansion, se_reduction=cfg.se_reduction, kernels=cfg.kernels, fused=fused, rng=rng)

        self.stem = ConvBN(cfg.in_channels, ch[0], 3, rng=rng)
        self.stages = ModuleList(
            ModuleList([MultiBranchModule(ch[i], ch[i + 1], **mb), MultiBranchModule(ch[i + 1], ch[i + 1], **mb)])
            for i in range(4)
        )
        gcfg = AttentionConfig(ch[4], cfg.gft_heads, cfg.mlp_ratio, None, cfg.gft_depth)
        self.gft = FeatureTransformer(sum(ch), gcfg, rng=rng)
        self.lfts = ModuleList()
        for i in range(4):
            lcfg = AttentionConfig(ch[i], cfg.lft_heads[i], cfg.mlp_ratio, cfg.lft_window[i], cfg.lft_depth)
            cin = sum(ch[j - 1] for j in lft_levels(i + 1))
            self.lfts.append(FeatureTransformer(cin, lcfg, rng=rng))
        self.decoder = ModuleList()
        for i in range(4):
            deeper = ch[4] if i == 3 else ch[i + 1]
            self.decoder.append(MultiBranchModule(deeper + ch[i], ch[i], **mb))
        self.head = Conv2d(ch[0], cfg.num_classes, 1, rng=rng)

    # -- stages ----------------------------------------------------------------
    def encoder_forward(self, image: Tensor) -> FeaturePyramid:
        n, c, h, w = image.shape
        if h % 16 or w % 16:
            raise ShapeError(f"input {h}x{w} must be divisible by 16")
        if c != self.config.in_channels:
            raise ShapeError(f"expected {self.config.in_channels} input channels, got {c}")
        x = self.stem(image).relu()
        maps = [x]
        for stage in self.stages:
            for m in stage:
                x = m(x)
            x = F.max_pool2(x)
            maps.append(x)
        return FeaturePyramid([1, 2, 4, 8, 16], maps)

    def gft_forward(self, pyr: FeaturePyramid) -> Tensor:
        if len(pyr) < 2:
            raise ShapeError("GFT needs at least two pyramid levels")
        h, w = pyr[0].shape[2:]
        s = self.config.gft_stride
        return self.gft(pyr.maps, (h // s, w // s))

    def lft_forward(self, stage: int, pyr: FeaturePyramid) -> Tensor:
        maps = [pyr[j - 1] for j in lft_levels(stage)]
        size = tuple(pyr[stage - 1].shape[2:])
        return self.lfts[stage - 1](maps, size)

    def decoder_forward(self, gft_out: Tensor, lft_outs: Sequence[Tensor], out_size: tuple[int, int]) -> Tensor:
        d = gft_out
        h4, w4 = lft_outs[3].shape[2:]
        if d.shape[2:] != (h4 // 2, w4 // 2):
            d = F.bilinear_resize(d, h4 // 2, w4 // 2)
        for i in (3, 2, 1, 0):
            skip = lft_outs[i]
            up = F.bilinear_resize(d, d.shape[2] * 2, d.shape[3] * 2)
            if up.shape[2:] != skip.shape[2:]:
                raise ShapeError(f"decoder level {i + 1}: upsampled {up.shape} vs skip {skip.shape}")
            d = self.decoder[i](concat([up, skip], axis=1))
        logits = self.head(d)
        return F.bilinear_resize(logits, *out_size)

    def forward(self, image: Tensor) -> Tensor:
        pyr = self.encoder_forward(image)
        g = self.gft_forward(pyr)
        lfts = [self.lft_forward(i, pyr) for i in (1, 2, 3, 4)]
        return self.decoder_forward(g, lfts, tuple(image.shape[2:]))

    def predict(self, image: Tensor) -> np.ndarray:
        """Argmax class map ``[N, H, W]`` from an eval forward pass."""
        from .autodiff import no_grad

        with no_grad():
            return self(image).data.argmax(axis=1)


def multi_branch_forward(x: Tensor, m: MultiBranchModule, mode: str = "eval") -> Tensor:
    """Run ``m`` in the given BN mode (``"train"`` or ``"eval"``), restoring its state."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    prev = m.training
    m.train(mode == "train")
    try:
        return m(x)
    finally:
        m.train(prev)


def feature_shapes(cfg: LmNetConfig, batch: int = 1) -> dict[str, tuple[int, ...]]:
    """Closed-form shapes of the main feature maps for ``cfg``."""
    h, w = cfg.input_size
    ch = cfg.level_channels
    out = {f"x{i + 1}": (batch, ch[i], h >> i, w >> i) for i in range(5)}
    s = cfg.gft_stride
    out["gft"] = (batch, ch[4], h // s, w // s)
    for i in range(4):
        out[f"lft{i + 1}"] = (batch, ch[i], h >> i, w >> i)
        out[f"dec{i + 1}"] = (batch, ch[i], h >> i, w >> i)
    out["logits"] = (batch, cfg.num_classes, h, w)
    return out


def calibrate_bn(model: Module, images: Tensor) -> Module:
    """Set every BN's running statistics to the batch statistics of ``images``.

    Useful for freshly initialised networks, whose default running stats
    (mean 0, var 1) let activations grow without bound through the residual
    stack. Returns the model in eval mode.
    """
    from .autodiff import no_grad
    from .nn import BatchNorm2d

    bns = [m for _, m in model.named_modules() if isinstance(m, BatchNorm2d)]
    saved = [bn.momentum for bn in bns]
    for bn in bns:
        bn.momentum = 1.0
    model.train()
    try:
        with no_grad():
            model(images)
    finally:
        for bn, mom in zip(bns, saved):
            bn.momentum = mom
    return model.eval()
