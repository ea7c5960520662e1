"""Command-line entry point: analyze, infer, train, eval, gradcheck, features.

Exit codes: 0 success, 1 validation or usage error, 2 I/O error, 3 internal error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .errors import (ConfigError, ContractError, FormatError, ParseError, ShapeError, ValidationError,
                     WeightsError)

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_INTERNAL = 0, 1, 2, 3

log = logging.getLogger("lfyolo")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _size(text: str) -> tuple[int, int]:
    parts = text.lower().replace(",", "x").split("x")
    try:
        nums = [int(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid size {text!r}; use N or HxW") from None
    if len(nums) not in (1, 2) or min(nums) <= 0:
        raise argparse.ArgumentTypeError(f"invalid size {text!r}; use N or HxW")
    return nums[0], nums[-1]


def _unit(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not a number") from None
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"{v} is outside [0, 1]")
    return v


def _config(args):
    from .dataio import load_config
    from .model import ModelConfig

    cfg = load_config(args.config) if getattr(args, "config", None) else ModelConfig()
    cfg.validate()
    return cfg


def _model(args, cfg):
    from .dataio import apply_weights, load_weights
    from .model import build

    model = build(cfg, seed=getattr(args, "seed", 0) or 0)
    if getattr(args, "weights", None):
        apply_weights(model, load_weights(args.weights))
    model.eval()
    return model


def cmd_analyze(args) -> int:
    from .analyzer import report
    from .dataio import atomic_write

    cfg = _config(args)
    h, w = args.input_size or cfg.input_size
    if h % 32 or w % 32:
        raise ValidationError(f"input size {h}x{w} must be multiples of 32")
    rep = report(cfg, h, w, flops_convention=args.flops_convention)
    if args.csv:
        atomic_write(args.csv, rep.to_csv().encode())
    print(rep.to_text(detail=args.detail))
    return EXIT_OK


def cmd_infer(args) -> int:
    from .dataio import load_image, save_annotated_image
    from .model import detect

    cfg = _config(args)
    model = _model(args, cfg)
    image = load_image(args.image, cfg.input_size)
    dets = detect(model, image, args.conf, args.nms_iou)
    lines = [f"{d.class_id} {d.score:.6f} {d.box[0]:.2f} {d.box[1]:.2f} {d.box[2]:.2f} {d.box[3]:.2f}"
             for d in dets]
    if args.out:
        save_annotated_image(image, dets, args.out)
    if lines:
        print("\n".join(lines))
    return EXIT_OK


def cmd_train(args) -> int:
    from .dataio import atomic_write, format_config, load_samples
    from .loss import DataError, train

    cfg = _config(args)
    if args.epochs < 1:
        raise ValidationError("--epochs must be >= 1")
    if args.lr < 0:
        raise ValidationError("--lr must be >= 0")
    samples, skipped = load_samples(args.manifest, cfg.num_classes)
    if not samples:
        raise DataError(f"no usable samples in {args.manifest} ({skipped} skipped)")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def progress(row):
        if not args.quiet:
            print(f"epoch {row['epoch']} step {row['step']} l_total {row['l_total']:.5f} lr {row['lr']:g}",
                  file=sys.stderr)

    res = train(samples, cfg, args.epochs, lr=args.lr, seed=args.seed, batch_size=args.batch_size,
                out_dir=out, loss_weights=args.loss_weights, on_step=progress)
    atomic_write(out / "config.cfg", format_config(cfg).encode())
    total_skipped = skipped + res.skipped
    print(f"trained {len(samples) - res.skipped} images, {len(res.log)} steps; skipped {total_skipped}; "
          f"best epoch {res.best_epoch}; final l_total {res.log[-1]['l_total']:.6f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .dataio import atomic_write, load_samples
    from .evaluate import collect_records, map50
    from .loss import DataError

    cfg = _config(args)
    model = _model(args, cfg)
    samples, skipped = load_samples(args.manifest, cfg.num_classes)
    if not samples:
        raise DataError(f"no usable samples in {args.manifest} ({skipped} skipped)")
    records = collect_records(model, samples, args.conf, args.nms_iou)
    rep = map50(records, cfg.num_classes)
    if args.csv:
        atomic_write(args.csv, rep.to_csv().encode())
    print(rep.to_text())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run

    blocks = [b.strip() for b in args.blocks.split(",") if b.strip()] if args.blocks else None
    results = run(blocks, seed=args.seed, corrupt=args.corrupt_grad)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} passed")
    return EXIT_VALIDATION if failed else EXIT_OK


def cmd_features(args) -> int:
    from .dataio import load_image, save_feature_grid

    cfg = _config(args)
    model = _model(args, cfg)
    names = model.layer_names
    if args.layer not in names:
        raise ValidationError(f"unknown layer {args.layer!r}; valid: {', '.join(names)}")
    image = load_image(args.image, cfg.input_size)
    feats, _ = model.forward_features(image)
    fmap = feats[args.layer]
    rows, cols = save_feature_grid(fmap, args.out)
    print(f"{args.layer}: {fmap.shape[1]} channels of {fmap.shape[2]}x{fmap.shape[3]} -> "
          f"{rows}x{cols} grid in {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lfyolo", description="LF-YOLO weld-defect detector tools.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def config_flag(sp):
        sp.add_argument("--config", help="model config file (key = value lines)")

    a = sub.add_parser("analyze", help="per-layer parameter and FLOPs table")
    config_flag(a)
    a.add_argument("--input-size", type=_size, help="N or HxW (default: config input size)")
    a.add_argument("--csv", help="also write the per-layer table as CSV")
    a.add_argument("--flops-convention", choices=("mac", "madd"), default="mac",
                   help="mac: FLOPs = MACs (default); madd: FLOPs = 2 x MACs")
    a.add_argument("--detail", action="store_true", help="one row per conv/BN layer")
    a.set_defaults(func=cmd_analyze)

    i = sub.add_parser("infer", help="detect defects in one image")
    config_flag(i)
    i.add_argument("--weights", required=True, help="LFYW weights file")
    i.add_argument("--image", required=True)
    i.add_argument("--conf", type=_unit, default=None, help="score threshold, strict > (default: config)")
    i.add_argument("--nms-iou", type=_unit, default=None, help="NMS IoU threshold (default: config)")
    i.add_argument("--out", help="annotated PNG output")
    i.set_defaults(func=cmd_infer)

    t = sub.add_parser("train", help="train from a manifest of images with YOLO txt annotations")
    config_flag(t)
    t.add_argument("--manifest", required=True)
    t.add_argument("--epochs", type=int, default=500)
    t.add_argument("--lr", type=float, default=0.01)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--batch-size", type=int, default=4)
    t.add_argument("--loss-weights", type=lambda s: tuple(float(v) for v in s.split(",")),
                   default=(1.0, 1.0, 1.0), help="obj,cls,box weights (default 1,1,1)")
    t.add_argument("--out-dir", required=True)
    t.add_argument("--quiet", action="store_true", help="no per-step progress on stderr")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="per-class AP50 and mAP50 on a manifest")
    config_flag(e)
    e.add_argument("--manifest", required=True)
    e.add_argument("--weights", required=True)
    e.add_argument("--conf", type=_unit, default=0.001)
    e.add_argument("--nms-iou", type=_unit, default=None)
    e.add_argument("--csv", help="also write class,AP50 CSV")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--blocks", help="comma-separated subset (default: all)")
    g.add_argument("--corrupt-grad", action="store_true", help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_gradcheck)

    f = sub.add_parser("features", help="save a channel grid of one backbone layer (s1..s20)")
    config_flag(f)
    f.add_argument("--weights", help="LFYW weights file (default: seeded initialization)")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--image", required=True)
    f.add_argument("--layer", required=True, help="backbone layer name, s1..s20")
    f.add_argument("--out", required=True, help="PNG output")
    f.set_defaults(func=cmd_features)
    return p


def _exit_code(exc: BaseException) -> int:
    from .loss import DataError

    if isinstance(exc, (FormatError, WeightsError, DataError, OSError)):
        return EXIT_IO
    if isinstance(exc, (ValidationError, ConfigError, ParseError, ShapeError, UsageError)):
        return EXIT_VALIDATION
    return EXIT_INTERNAL


def _limit_threads():
    value = os.environ.get("LF_THREADS")
    if not value:
        return None
    try:
        n = int(value)
    except ValueError:
        raise UsageError(f"LF_THREADS must be a positive integer, got {value!r}") from None
    if n < 1:
        raise UsageError(f"LF_THREADS must be a positive integer, got {value!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s", stream=sys.stderr)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_VALIDATION
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)
    try:
        limiter = _limit_threads()
        try:
            return args.func(args)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except ContractError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # mapped to the documented exit codes
        code = _exit_code(exc)
        if code == EXIT_INTERNAL:
            log.exception("internal error")
        else:
            print(f"error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
