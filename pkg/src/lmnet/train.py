"""Training: AdamW with decoupled weight decay, per-step cosine annealing,
weighted cross-entropy and best-by-validation-mDice checkpointing."""

from __future__ import annotations

import json
import math
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import backward, no_grad
from .data import AugmentConfig, DatasetManifest, batches
from .errors import NonFiniteError
from .loss import class_weights, pixel_counts, weighted_cross_entropy
from .metrics import MetricsReport, evaluate
from .model import LmNet, LmNetConfig, tiny_config
from .nn import BatchNorm2d, LayerNorm, Module, Parameter
from .serialize import save_weights
from .tensor import Tensor


@dataclass
class RunConfig:
    model: LmNetConfig = field(default_factory=tiny_config)
    lr: float = 1e-3
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    epochs: int = 30
    batch_size: int = 8
    seed: int = 0
    cb_beta: float = 0.9999
    augment: bool = True

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = LmNetConfig.from_dict(self.model)
        self.betas = tuple(float(b) for b in self.betas)
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown run config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def cosine_lr(step: int, total: int, base_lr: float) -> float:
    """``0.5 * lr * (1 + cos(pi * t / T))``; equals ``lr`` at 0 and 0 at ``T``."""
    if total <= 0:
        return base_lr
    t = min(max(step, 0), total)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * t / total))


def decay_groups(model: Module) -> tuple[list[Parameter], list[Parameter]]:
    """Split parameters into (decayed, exempt). Norm-layer affine params and biases are exempt."""
    exempt_ids = set()
    for _, m in model.named_modules():
        if isinstance(m, (BatchNorm2d, LayerNorm)):
            exempt_ids.update(id(p) for p in m._params.values())
    decay, exempt = [], []
    for name, p in model.named_parameters():
        if id(p) in exempt_ids or name.rsplit(".", 1)[-1] == "bias":
            exempt.append(p)
        else:
            decay.append(p)
    return decay, exempt


class AdamW:
    def __init__(self, decay: Sequence[Parameter], exempt: Sequence[Parameter] = (), lr=1e-3,
                 betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-4):
        self.groups = [(list(decay), weight_decay), (list(exempt), 0.0)]
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for params, wd in self.groups:
            for p in params:
                if p.grad is None:
                    continue
                g = p.grad
                key = id(p)
                m = self.m.get(key)
                if m is None:
                    m = self.m[key] = np.zeros_like(p.data)
                    self.v[key] = np.zeros_like(p.data)
                v = self.v[key]
                m *= self.b1
                m += (1.0 - self.b1) * g
                v *= self.b2
                v += (1.0 - self.b2) * g * g
                if wd:
                    p.data *= p.data.dtype.type(1.0 - self.lr * wd)
                upd = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
                p.data -= (self.lr * upd).astype(p.data.dtype, copy=False)

    def zero_grad(self) -> None:
        for params, _ in self.groups:
            for p in params:
                p.grad = None


def predict(model: LmNet, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Eval-mode argmax masks for ``images [N, 3, H, W]``."""
    was = model.training
    model.eval()
    out = []
    try:
        with no_grad():
            for s in range(0, len(images), batch_size):
                x = Tensor(np.ascontiguousarray(images[s : s + batch_size], dtype=model.dtype))
                out.append(model(x).data.argmax(axis=1))
    finally:
        model.train(was)
    return np.concatenate(out) if out else np.zeros((0,), np.int64)


def evaluate_split(model: LmNet, manifest: DatasetManifest, split: str, batch_size: int = 8,
                   foreground_only: bool = False, cache=None) -> tuple[MetricsReport, np.ndarray]:
    size = model.config.input_size
    preds, refs = [], []
    for x, y in batches(manifest, split, size, batch_size, cache=cache):
        preds.append(predict(model, x, batch_size))
        refs.append(y)
    if not preds:
        raise ValueError(f"split {split!r} is empty")
    p, r = np.concatenate(preds), np.concatenate(refs)
    return evaluate(list(p), list(r), model.config.num_classes, foreground_only), p


def _emit(stream, **rec) -> None:
    stream.write(json.dumps(rec, sort_keys=True) + "\n")
    stream.flush()


def train(cfg: RunConfig, manifest: DatasetManifest, out_dir, stream=None,
          on_epoch: Callable[[dict], None] | None = None) -> dict:
    """Train from scratch, writing ``best.lmw`` and ``last.lmw`` to ``out_dir``.

    Returns a summary dict with the per-epoch history.
    """
    stream = stream or sys.stdout
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_entries = manifest.split("train")
    if not train_entries:
        raise ValueError("the manifest has no training entries")
    size = cfg.model.input_size
    cache: dict = {}
    model = LmNet(cfg.model, rng=np.random.default_rng(cfg.seed))
    decay, exempt = decay_groups(model)
    opt = AdamW(decay, exempt, cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay)

    counts = pixel_counts((y for _, y in batches(manifest, "train", size, 64, cache=cache)), cfg.model.num_classes)
    weights = class_weights(counts, cfg.cb_beta)
    _emit(stream, event="start", train=len(train_entries), val=len(manifest.split("val")),
          class_weights=weights.tolist(), config=cfg.to_dict())

    steps_per_epoch = math.ceil(len(train_entries) / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    aug = AugmentConfig() if cfg.augment else None
    has_val = bool(manifest.split("val"))
    best = -1.0
    history = []
    step = 0
    save_weights(model, out / "last.lmw")
    if cfg.epochs == 0:
        save_weights(model.eval(), out / "best.lmw")
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        model.train()
        losses = []
        for x, y in batches(manifest, "train", size, cfg.batch_size, shuffle=True, aug=aug,
                            seed=cfg.seed, epoch=epoch, cache=cache):
            opt.lr = cosine_lr(step, total, cfg.lr)
            loss = weighted_cross_entropy(model(Tensor(x)), y, weights)
            if not np.isfinite(loss.item()):
                raise NonFiniteError(f"non-finite loss at epoch {epoch} step {step} (lr {opt.lr:.3g})")
            opt.zero_grad()
            backward(loss)
            opt.step()
            losses.append(loss.item())
            step += 1
        rec = {"event": "epoch", "epoch": epoch + 1, "loss": float(np.mean(losses)), "lr": cosine_lr(step, total, cfg.lr)}
        if has_val:
            report, _ = evaluate_split(model, manifest, "val", cfg.batch_size, cache=cache)
            rec["val_mdice"] = report.mdice
            rec["val_miou"] = report.miou
            improved = report.mdice > best
        else:
            improved = True
        if improved:
            best = rec.get("val_mdice", best)
            save_weights(model.eval(), out / "best.lmw")
        rec["saved"] = improved
        rec["seconds"] = round(time.perf_counter() - t0, 3)
        save_weights(model.eval(), out / "last.lmw")
        history.append(rec)
        _emit(stream, **rec)
        if on_epoch is not None:
            on_epoch(rec)
    summary = {"event": "done", "best_val_mdice": best if has_val else None, "epochs": cfg.epochs,
               "checkpoint": str(out / "best.lmw")}
    _emit(stream, **summary)
    summary["history"] = history
    return summary
