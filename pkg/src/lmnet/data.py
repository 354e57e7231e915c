"""Image/mask datasets: manifests, loading, seeded splits, geometric and blur
augmentation, and a synthetic shapes generator."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from . import functional as F
from .errors import ShapeError
from .tensor import Tensor

SPLITS = ("train", "val", "test")
DEFAULT_PALETTE = {0: 0, 255: 1}


@dataclass
class ManifestEntry:
    image: str
    mask: str
    split: str

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    seed: int = 0
    palette: dict[int, int] = field(default_factory=lambda: dict(DEFAULT_PALETTE))
    root: Path = Path(".")

    @property
    def num_classes(self) -> int:
        return max(self.palette.values()) + 1

    def split(self, name: str) -> list[ManifestEntry]:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return [e for e in self.entries if e.split == name]

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "seed": self.seed,
            "palette": {str(k): v for k, v in sorted(self.palette.items())},
            "entries": [{"image": e.image, "mask": e.mask, "split": e.split} for e in self.entries],
        }

    def save(self, path) -> None:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
            entries = [ManifestEntry(e["image"], e["mask"], e["split"]) for e in d["entries"]]
            palette = {int(k): int(v) for k, v in d.get("palette", {}).items()} or dict(DEFAULT_PALETTE)
            man = cls(entries, int(d.get("seed", 0)), palette, path.parent)
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise ValueError(f"invalid manifest {path}: {exc}") from None
        man.validate()
        return man

    def validate(self) -> None:
        seen = set()
        for e in self.entries:
            key = (e.image, e.mask)
            if key in seen:
                raise ValueError(f"entry {e.image} listed twice")
            seen.add(key)
            for rel in (e.image, e.mask):
                if not self.resolve(rel).is_file():
                    raise FileNotFoundError(f"manifest references missing file {self.resolve(rel)}")


def assign_splits(n: int, seed: int, ratios: Sequence[float] = (0.8, 0.1, 0.1)) -> list[str]:
    """Seeded partition of ``n`` items into train/val/test by ``ratios``."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0):
        raise ValueError(f"ratios must be three non-negative values summing to 1, got {ratios}")
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    n_val = min(n_val, n - n_train)
    order = np.random.default_rng(seed).permutation(n)
    out = ["test"] * n
    for i in order[:n_train]:
        out[i] = "train"
    for i in order[n_train : n_train + n_val]:
        out[i] = "val"
    return out


# -- loading -------------------------------------------------------------------
def resize_image(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear (half-pixel) resize of a ``[C, H, W]`` float image."""
    if img.shape[1:] == tuple(size):
        return img
    return F.bilinear_resize(Tensor(img[None]), *size).data[0]


def resize_mask(mask: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resize; never invents labels."""
    h, w = mask.shape
    oh, ow = size
    if (h, w) == (oh, ow):
        return mask
    rows = np.minimum(((np.arange(oh) + 0.5) * h / oh).astype(np.intp), h - 1)
    cols = np.minimum(((np.arange(ow) + 0.5) * w / ow).astype(np.intp), w - 1)
    return mask[rows[:, None], cols[None, :]]


def map_palette(raw: np.ndarray, palette: dict[int, int]) -> np.ndarray:
    lut = np.full(256, -1, np.int64)
    for k, v in palette.items():
        lut[k] = v
    labels = lut[raw]
    if (labels < 0).any():
        bad = sorted(set(np.unique(raw[labels < 0]).tolist()))
        raise ValueError(f"mask values {bad[:8]} are not in the palette")
    return labels


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "P", "1", "I;16"):
            im = im.convert("L")
        return np.asarray(im).astype(np.uint8)


def load_pair(manifest: DatasetManifest, entry: ManifestEntry, size=(256, 256)) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(image [3, H, W] float32 in [0, 1], labels [H, W] int64)`` at ``size``."""
    try:
        rgb = read_image(manifest.resolve(entry.image))
        raw = read_mask(manifest.resolve(entry.mask))
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read {entry.image} / {entry.mask}: {exc}") from None
    img = rgb.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0)
    img = resize_image(img, tuple(size))
    labels = resize_mask(map_palette(raw, manifest.palette), tuple(size))
    return np.ascontiguousarray(img, dtype=np.float32), labels


# -- augmentation ----------------------------------------------------------------
@dataclass
class AugmentConfig:
    p_hflip: float = 0.5
    p_vflip: float = 0.5
    p_rotate: float = 0.5
    max_rotation: float = 30.0
    p_scale: float = 0.5
    scale_range: tuple[float, float] = (0.9, 1.1)
    p_translate: float = 0.5
    max_translate: float = 0.1
    p_blur: float = 0.2
    sigma_range: tuple[float, float] = (0.1, 1.5)

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(0.0, 0.0, 0.0, 30.0, 0.0, (0.9, 1.1), 0.0, 0.1, 0.0, (0.1, 1.5))


def affine_matrix(shape, angle_deg=0.0, scale=1.0, shift=(0.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
    """Output->input map for rotation/scale about the centre plus a shift (pixels)."""
    h, w = shape
    c = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    t = math.radians(angle_deg)
    rot = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
    fwd = scale * rot
    inv = np.linalg.inv(fwd)
    offset = c - inv @ (c + np.asarray(shift, dtype=np.float64))
    return inv, offset


def warp(image: np.ndarray, mask: np.ndarray, matrix: np.ndarray, offset: np.ndarray):
    """Apply one affine map to both arrays: bilinear for the image, nearest for the mask."""
    img = np.stack(
        [ndimage.affine_transform(ch, matrix, offset, order=1, mode="constant", cval=0.0) for ch in image]
    ).astype(image.dtype, copy=False)
    m = ndimage.affine_transform(mask, matrix, offset, order=0, mode="constant", cval=0)
    return img, m


def augment(image: np.ndarray, mask: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig | None = None):
    """Randomly flip, rotate, scale, translate and blur one ``([C,H,W], [H,W])`` pair."""
    cfg = cfg or AugmentConfig()
    if image.shape[1:] != mask.shape:
        raise ShapeError(f"image {image.shape} and mask {mask.shape} disagree")
    # every draw happens regardless of outcome so the stream stays aligned
    u = rng.random(6)
    angle = rng.uniform(-cfg.max_rotation, cfg.max_rotation)
    scale = rng.uniform(*cfg.scale_range)
    shift = rng.uniform(-cfg.max_translate, cfg.max_translate, 2) * np.array(mask.shape)
    sigma = rng.uniform(*cfg.sigma_range)

    if u[0] < cfg.p_hflip:
        image, mask = image[:, :, ::-1], mask[:, ::-1]
    if u[1] < cfg.p_vflip:
        image, mask = image[:, ::-1, :], mask[::-1, :]
    use_rot, use_scale, use_shift = u[2] < cfg.p_rotate, u[3] < cfg.p_scale, u[4] < cfg.p_translate
    if use_rot or use_scale or use_shift:
        mat, off = affine_matrix(
            mask.shape,
            angle if use_rot else 0.0,
            scale if use_scale else 1.0,
            shift if use_shift else (0.0, 0.0),
        )
        image, mask = warp(np.ascontiguousarray(image), np.ascontiguousarray(mask), mat, off)
    if u[5] < cfg.p_blur:
        image = np.stack([ndimage.gaussian_filter(ch, sigma, mode="nearest") for ch in image]).astype(
            image.dtype, copy=False
        )
    return np.ascontiguousarray(image), np.ascontiguousarray(mask)


def item_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Per-item stream so results never depend on iteration order."""
    return np.random.default_rng([seed, epoch, index])


def batches(
    manifest: DatasetManifest,
    split: str,
    size,
    batch_size: int,
    *,
    shuffle: bool = False,
    aug: AugmentConfig | None = None,
    seed: int = 0,
    epoch: int = 0,
    cache: dict | None = None,
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(images [B,3,H,W], labels [B,H,W])`` batches of one split."""
    entries = manifest.split(split)
    order = np.arange(len(entries))
    if shuffle:
        order = np.random.default_rng([seed, epoch]).permutation(len(entries))
    for start in range(0, len(order), batch_size):
        imgs, masks = [], []
        for idx in order[start : start + batch_size]:
            e = entries[idx]
            key = (e.image, tuple(size))
            if cache is not None and key in cache:
                img, m = cache[key]
            else:
                img, m = load_pair(manifest, e, size)
                if cache is not None:
                    cache[key] = (img, m)
            if aug is not None:
                img, m = augment(img, m, item_rng(seed, epoch, int(idx)), aug)
            imgs.append(img)
            masks.append(m)
        yield np.stack(imgs), np.stack(masks)


# -- synthetic shapes ------------------------------------------------------------
def _texture(rng, size, scale) -> np.ndarray:
    noise = rng.normal(0.0, 1.0, (size, size))
    smooth = ndimage.gaussian_filter(noise, scale, mode="wrap")
    return smooth / (smooth.std() + 1e-12)


def render_shape(kind: str, size: int, cy, cx, ry, rx, angle) -> np.ndarray:
    """Boolean rasterisation of an ellipse or rectangle, tested at pixel centres."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(angle), math.sin(angle)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    if kind == "ellipse":
        return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
    if kind == "rectangle":
        return (np.abs(u) <= rx) & (np.abs(v) <= ry)
    raise ValueError(f"unknown shape {kind!r}")


def synth_sample(size: int, rng: np.random.Generator, fg_bounds=(0.05, 0.5)):
    """One ``(rgb uint8 [H,W,3], mask bool [H,W], shapes)`` sample."""
    base = rng.uniform(0.25, 0.45, 3)
    bg = base[None, None] + 0.08 * _texture(rng, size, 2.0)[..., None] + 0.04 * rng.normal(size=(size, size, 3))
    for _ in range(50):
        mask = np.zeros((size, size), bool)
        shapes = []
        for _ in range(int(rng.integers(1, 4))):
            kind = "ellipse" if rng.random() < 0.5 else "rectangle"
            ry, rx = rng.uniform(0.08, 0.25, 2) * size
            cy, cx = rng.uniform(0.2, 0.8, 2) * size
            angle = rng.uniform(0, math.pi)
            shapes.append({"kind": kind, "cy": cy, "cx": cx, "ry": ry, "rx": rx, "angle": angle})
            mask |= render_shape(kind, size, cy, cx, ry, rx, angle)
        frac = mask.mean()
        if fg_bounds[0] <= frac <= fg_bounds[1]:
            break
    fg_col = np.clip(base + rng.choice([-1, 1], 3) * rng.uniform(0.2, 0.35, 3), 0.0, 1.0)
    fg = fg_col[None, None] + 0.06 * _texture(rng, size, 1.0)[..., None] + 0.04 * rng.normal(size=(size, size, 3))
    img = np.where(mask[..., None], fg, bg)
    rgb = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    return rgb, mask, shapes


def synth_shapes(n: int, size: int, seed: int, out, ratios=(0.8, 0.1, 0.1)) -> DatasetManifest:
    """Write ``n`` synthetic image/mask PNG pairs and a ``manifest.json`` under ``out``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if size < 1:
        raise ValueError("size must be >= 1")
    out = Path(out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    splits = assign_splits(n, seed, ratios)
    entries = []
    for i in range(n):
        rgb, mask, _ = synth_sample(size, np.random.default_rng([seed, i]))
        img_rel, mask_rel = f"images/{i:05d}.png", f"masks/{i:05d}.png"
        Image.fromarray(rgb, "RGB").save(out / img_rel)
        Image.fromarray(mask.astype(np.uint8) * 255, "L").save(out / mask_rel)
        entries.append(ManifestEntry(img_rel, mask_rel, splits[i]))
    man = DatasetManifest(entries, seed, dict(DEFAULT_PALETTE), out)
    man.save(out / "manifest.json")
    return man
