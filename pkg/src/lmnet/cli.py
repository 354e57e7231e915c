"""``lmnet`` command line: synth, train, fuse, infer, eval, gradcheck and cost.

Progress and results are written to stdout as JSON lines. Exit codes:
0 success, 2 validation failure (bad config, shape mismatch, failed check),
3 I/O failure (missing or unreadable files, corrupt weight containers).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 2, 3

log = logging.getLogger("lmnet")


class ValidationFailure(Exception):
    """A check ran to completion and did not pass."""


def _emit(**rec) -> None:
    sys.stdout.write(json.dumps(rec, sort_keys=True) + "\n")
    sys.stdout.flush()


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON ({exc})") from None


def _run_config(args):
    from .train import RunConfig

    d = _load_json(args.config) if args.config else {}
    if args.seed is not None:
        d["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        d["epochs"] = args.epochs
    if getattr(args, "batch_size", None) is not None:
        d["batch_size"] = args.batch_size
    return RunConfig.from_dict(d)


def _model_config(args):
    """Model config from ``--config`` (either a run config or a bare model config)."""
    from .model import LmNetConfig

    if not args.config:
        return LmNetConfig()
    d = _load_json(args.config)
    return LmNetConfig.from_dict(d["model"] if "model" in d else d)


# -- commands ------------------------------------------------------------------
def cmd_synth(args) -> int:
    from .data import synth_shapes

    man = synth_shapes(args.n, args.size, args.seed or 0, args.out)
    counts = {s: len(man.split(s)) for s in ("train", "val", "test")}
    _emit(event="synth", out=str(args.out), manifest=str(Path(args.out) / "manifest.json"), **counts)
    return EXIT_OK


def cmd_train(args) -> int:
    from .data import DatasetManifest
    from .train import train

    cfg = _run_config(args)
    man = DatasetManifest.load(args.manifest)
    train(cfg, man, args.out)
    return EXIT_OK


def _probe_deviation(a, b, shape, seed, n=2) -> tuple[float, float]:
    """Max abs logit difference between ``a`` and ``b`` on random probes, and the max abs logit of ``a``."""
    from .autodiff import no_grad
    from .tensor import Tensor

    rng = np.random.default_rng(seed)
    worst = scale = 0.0
    with no_grad():
        for _ in range(n):
            x = Tensor(rng.random((1, *shape)).astype(a.dtype))
            ya = a(x).data
            worst = max(worst, float(np.abs(ya - b(x).data).max()))
            scale = max(scale, float(np.abs(ya).max()))
    return worst, scale


def cmd_fuse(args) -> int:
    from .reparam import fuse_model
    from .serialize import load_weights, save_weights

    model = load_weights(args.weights)
    if model.fused:
        log.warning("%s is already fused; writing it unchanged", args.weights)
        save_weights(model, args.out)
        _emit(event="fuse", already_fused=True, out=str(args.out))
        return EXIT_OK
    fused = fuse_model(model)
    cfg = model.config
    dev, scale = _probe_deviation(model, fused, (cfg.in_channels, *cfg.input_size), args.seed or 0)
    save_weights(fused, args.out)
    _emit(event="fuse", already_fused=False, max_abs_deviation=dev, max_abs_logit=scale, out=str(args.out))
    return EXIT_OK


def cmd_infer(args) -> int:
    from PIL import Image

    from .data import DEFAULT_PALETTE, read_image, resize_image, resize_mask
    from .serialize import load_weights
    from .tensor import Tensor
    from .train import predict

    model = load_weights(args.weights)
    rgb = read_image(args.image)
    img = resize_image(rgb.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0), model.config.input_size)
    labels = predict(model, Tensor(img[None]).data)[0]
    labels = resize_mask(labels, rgb.shape[:2])
    inverse = {v: k for k, v in DEFAULT_PALETTE.items()}
    lut = np.array([inverse.get(c, c) for c in range(model.config.num_classes)], dtype=np.uint8)
    Image.fromarray(lut[labels], "L").save(args.out)
    _emit(event="infer", out=str(args.out), foreground_fraction=float((labels > 0).mean()))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .metrics import evaluate

    if args.pred is not None:
        from .data import DEFAULT_PALETTE, map_palette, read_mask

        if args.ref is None:
            raise ValueError("--pred needs --ref")
        p = map_palette(read_mask(args.pred), DEFAULT_PALETTE)
        r = map_palette(read_mask(args.ref), DEFAULT_PALETTE)
        report = evaluate([p], [r], 2, args.foreground_only)
    else:
        from .data import DatasetManifest
        from .serialize import load_weights
        from .train import evaluate_split

        if args.weights is None or args.manifest is None:
            raise ValueError("eval needs --weights and --manifest (or --pred and --ref)")
        model = load_weights(args.weights)
        man = DatasetManifest.load(args.manifest)
        report, _ = evaluate_split(model, man, args.split, foreground_only=args.foreground_only)
    if args.out:
        Path(args.out).write_text(report.to_json() + "\n")
    sys.stderr.write(report.table() + "\n")
    _emit(event="eval", **report.to_dict())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import full_net_check, run_primitives

    seed = args.seed or 0
    failed = []
    for name, rep in run_primitives(seed).items():
        _emit(event="gradcheck", case=name, max_rel_error=rep.max_rel_error, checked=rep.checked, passed=rep.passed)
        if not rep.passed:
            failed.append(name)
    if not args.skip_network:
        rep = full_net_check(seed)
        _emit(event="gradcheck", case="network", max_rel_error=rep.max_rel_error, checked=rep.checked,
              passed=rep.passed)
        if not rep.passed:
            failed.append("network")
    _emit(event="gradcheck_done", failed=failed)
    if failed:
        raise ValidationFailure(f"gradient check failed for {failed}")
    return EXIT_OK


def cmd_cost(args) -> int:
    from .model import LmNet
    from .reparam import count_cost, fuse_model

    cfg = _model_config(args)
    shape = (1, cfg.in_channels, *cfg.input_size)
    unfused = LmNet(cfg, rng=args.seed or 0).eval()
    fused = fuse_model(unfused)
    rows = {}
    for name, m in (("unfused", unfused), ("fused", fused)):
        rows[name] = count_cost(m, shape).to_dict(args.flops_unit)
        _emit(event="cost", form=name, input_shape=list(shape), **rows[name])
    u, f = rows["unfused"], rows["fused"]
    sys.stderr.write(
        f"{'':8} {'params':>12} {'params+bn':>12} {args.flops_unit:>16}\n"
        f"{'unfused':8} {u['params']:>12,} {u['params_with_bn_buffers']:>12,} {u['flops']:>16,}\n"
        f"{'fused':8} {f['params']:>12,} {f['params_with_bn_buffers']:>12,} {f['flops']:>16,}\n"
    )
    return EXIT_OK


# -- parser --------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run or model config")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="lmnet", description="Multi-branch segmentation network toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic shapes dataset")
    s.add_argument("--n", type=int, default=200)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", parents=[common], help="train from a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True, help="output directory for checkpoints")
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("fuse", parents=[common], help="merge multi-branch convolutions")
    s.add_argument("--weights", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fuse)

    s = sub.add_parser("infer", parents=[common], help="predict a mask for one image")
    s.add_argument("--weights", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", parents=[common], help="score a model on a split, or a mask pair")
    s.add_argument("--weights")
    s.add_argument("--manifest")
    s.add_argument("--split", default="test", choices=("train", "val", "test"))
    s.add_argument("--pred", help="predicted mask PNG (mask-pair mode)")
    s.add_argument("--ref", help="reference mask PNG (mask-pair mode)")
    s.add_argument("--out", help="write the report JSON here")
    s.add_argument("--foreground-only", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite (float64)")
    s.add_argument("--skip-network", action="store_true", help="only check the primitives")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("cost", parents=[common], help="parameter and MAC counts, fused vs unfused")
    s.add_argument("--flops-unit", choices=("macs", "flops2x"), default="macs")
    s.set_defaults(func=cmd_cost)
    return p


def main(argv=None) -> int:
    from .errors import ContainerError, LmnetError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ContainerError) as exc:
        _emit(event="error", kind="io", message=str(exc))
        return EXIT_IO
    except (LmnetError, ValueError, TypeError, KeyError, ValidationFailure) as exc:
        _emit(event="error", kind="validation", message=str(exc))
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
