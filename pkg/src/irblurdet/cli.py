"""Command-line entry points: synth, train, eval, infer, inspect.

Every command is deterministic given (config, seed). Failures exit
nonzero with a one-line `error:<category>: message` on stderr. The
effective config is echoed into each output directory.
"""

import argparse
import json
import os
import sys
from collections import Counter
from pathlib import Path

import numpy as np
import torch

from .blursynth import build_dataset, load_png, save_png
from .config import (
    ExperimentConfig,
    apply_override,
    config_from_dict,
    config_to_dict,
    load_config,
    save_config,
)
from .dataset import PairDataset, load_manifest
from .errors import ConfigError, GenerationError, InvalidParameterError
from .fsgm import high_pass
from .metrics import scr
from .model import DeblurDetector
from .trainer import (
    evaluate_model,
    infer,
    load_checkpoint,
    model_from_checkpoint,
    run_training,
    scr_report,
)

BLUR_LEVEL_ORDER = ("Mild", "Moderate", "Severe")


def _out_root():
    return Path(os.environ.get("IRBLURDET_OUT", "runs"))


def _load_effective_config(args):
    """Config file (if any) plus dotted-path overrides from flags."""
    if getattr(args, "config", None):
        data = config_to_dict(load_config(args.config))
    else:
        data = config_to_dict(ExperimentConfig())
    for dotted, value in getattr(args, "_overrides", []):
        apply_override(data, dotted, value)
    return config_from_dict(data)


def _collect_overrides(args, mapping):
    """Map set CLI flags onto dotted config paths."""
    overrides = []
    for attr, dotted in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides.append((dotted, value))
    args._overrides = overrides


def cmd_synth(args):
    _collect_overrides(args, {"seed": "data.seed"})
    config = _load_effective_config(args)
    if args.count_train is not None:
        config.data.counts = {"train": args.count_train, "val": args.count_val, "test": args.count_test}
    out_dir = Path(args.out) if args.out else _out_root() / "dataset"
    manifest = build_dataset(config.data, out_dir)
    save_config(config, out_dir / "config.yaml")

    records = load_manifest(manifest)
    bands = Counter(r.blur["level"] for r in records)
    splits = Counter(r.split for r in records)
    print(f"manifest: {manifest}")
    print("splits: " + ", ".join(f"{k}={v}" for k, v in sorted(splits.items())))
    print("bands: " + ", ".join(f"{k}={bands.get(k, 0)}" for k in BLUR_LEVEL_ORDER))
    return 0


def cmd_train(args):
    _collect_overrides(
        args,
        {
            "epochs": "train.epochs",
            "seed": "train.seed",
            "batch_size": "train.batch_size",
            "lr": "train.lr",
            "val_interval": "train.val_interval",
        },
    )
    config = _load_effective_config(args)
    if args.no_fdd:
        config.model.use_fdd = False
    if args.no_fsgm:
        config.model.use_fsgm = False
    if args.no_fcss:
        config.train.use_fcss = False
    out_dir = Path(args.out) if args.out else _out_root() / "train"
    out_dir.mkdir(parents=True, exist_ok=True)
    save_config(config, out_dir / "config.yaml")
    result = run_training(config, args.manifest, out_dir, resume=args.resume, quiet=args.quiet)
    print(f"best checkpoint: {result['best']} (ap50 {result['best_ap50']:.3f})")
    print(f"last checkpoint: {result['last']}")
    print(f"log: {result['log']}")
    return 0


def _eval_split(model, records, split, eval_cfg):
    dataset = PairDataset(records, split)
    report = evaluate_model(model, dataset, eval_cfg)
    return dataset, report


def cmd_eval(args):
    payload = load_checkpoint(args.checkpoint)
    model, config = model_from_checkpoint(payload)
    records = load_manifest(args.manifest)

    dataset, report = _eval_split(model, records, args.split, config.eval)
    out = {
        "split": args.split,
        "n_images": len(dataset),
        "ap50": report.ap50,
        "ap": report.ap,
        "ar50": report.ar50,
        "ar": report.ar,
    }
    if args.per_blur_level:
        per_level = {}
        for level in BLUR_LEVEL_ORDER:
            subset = [r for r in records if r.split == args.split and r.blur["level"] == level]
            if not subset:
                continue
            lvl_report = evaluate_model(model, PairDataset(subset, args.split), config.eval)
            per_level[level] = {"n_images": len(subset), "ap50": lvl_report.ap50, "ap": lvl_report.ap}
        out["per_blur_level"] = per_level
    if args.scr:
        scr_rep = scr_report(model, dataset)
        out["scr"] = {"per_stage": scr_rep.per_stage, "mean": scr_rep.mean, "degenerate": scr_rep.degenerate}
    print(json.dumps(out, indent=2))
    return 0


def cmd_infer(args):
    image = load_png(args.image)
    detections = infer(args.checkpoint, image, args.score_threshold, args.iou_nms)
    out = [{"box": [float(v) for v in d.box], "score": float(d.score)} for d in detections]
    print(json.dumps(out, indent=2))
    return 0


def _normalize_for_png(x):
    lo, hi = float(x.min()), float(x.max())
    return (x - lo) / (hi - lo) if hi > lo else np.zeros_like(x)


def cmd_inspect(args):
    payload = load_checkpoint(args.checkpoint)
    model, config = model_from_checkpoint(payload)
    out = {
        "epoch": payload["epoch"],
        "tau": float(model.backbone.fsgm.tau.detach()) if model.backbone.fsgm is not None else None,
        "param_counts": model.param_counts(),
        "use_fdd": config.model.use_fdd,
        "use_fsgm": config.model.use_fsgm,
    }

    if args.image:
        image = load_png(args.image)
        x = torch.from_numpy(image)[None, None]
        with torch.no_grad():
            taps, stages = model.extract(x)
            out["stages"] = [
                {
                    "shape": list(f.shape[1:]),
                    "mean": float(f.mean()),
                    "std": float(f.std()),
                    "absmax": float(f.abs().amax()),
                }
                for f in stages
            ]
            box = tuple(float(v) for v in args.box) if args.box else None
            if box is None:
                dets = model.detect(x)[0]
                if dets:
                    box = tuple(float(v) for v in dets[0].box)
            if box is not None:
                per_stage = {}
                for s, fmap in enumerate(stages):
                    scale = fmap.shape[-1] / x.shape[-1]
                    value, degen = scr(fmap[0].numpy(), tuple(v * scale for v in box))
                    per_stage[f"stage{s + 1}"] = {"scr": value, "degenerate": degen}
                out["scr"] = {"box": list(box), "per_stage": per_stage}
            if args.save_prior:
                if taps is None:
                    raise ConfigError("this checkpoint has no restoration branch; nothing to dump")
                prior_dir = Path(args.save_prior)
                prior_dir.mkdir(parents=True, exist_ok=True)
                ffrb = model.backbone.fsgm.ffrb if model.backbone.fsgm is not None else None
                planes = {"prior": taps.prior}
                if ffrb is not None:
                    planes["prior_high"] = high_pass(taps.prior, ffrb.high_pass)
                    planes["prior_refined"] = ffrb(taps.prior)
                for name, plane in planes.items():
                    img = _normalize_for_png(plane[0].mean(dim=0).numpy())
                    save_png(img, prior_dir / f"{name}.png")
                out["saved_prior"] = sorted(str(prior_dir / f"{n}.png") for n in planes)
    print(json.dumps(out, indent=2))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="irblurdet",
        description="Joint feature-domain deblurring and small-target detection toolkit.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a paired sharp/blurred benchmark")
    p_synth.add_argument("--config", help="YAML experiment config")
    p_synth.add_argument("--out", help="output directory (default $IRBLURDET_OUT/dataset)")
    p_synth.add_argument("--seed", type=int, help="generation seed")
    p_synth.add_argument("--count-train", type=int, help="train split size")
    p_synth.add_argument("--count-val", type=int, default=50, help="val split size")
    p_synth.add_argument("--count-test", type=int, default=100, help="test split size")
    p_synth.set_defaults(func=cmd_synth)

    p_train = sub.add_parser("train", help="run dual-branch training")
    p_train.add_argument("--config", help="YAML experiment config")
    p_train.add_argument("--manifest", required=True, help="dataset manifest path")
    p_train.add_argument("--out", help="output directory (default $IRBLURDET_OUT/train)")
    p_train.add_argument("--epochs", type=int, help="override epoch count")
    p_train.add_argument("--seed", type=int, help="override training seed")
    p_train.add_argument("--batch-size", type=int, help="override batch size")
    p_train.add_argument("--lr", type=float, help="override learning rate")
    p_train.add_argument("--val-interval", type=int, help="epochs between validations")
    p_train.add_argument("--no-fdd", action="store_true", help="drop the restoration branch")
    p_train.add_argument("--no-fsgm", action="store_true", help="drop the frequency guidance block")
    p_train.add_argument("--no-fcss", action="store_true", help="drop the stage consistency loss")
    p_train.add_argument("--resume", action="store_true", help="continue from last checkpoint")
    p_train.add_argument("--quiet", action="store_true", help="suppress per-epoch progress lines")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--manifest", required=True)
    p_eval.add_argument("--split", default="test")
    p_eval.add_argument("--per-blur-level", action="store_true", help="also report per severity band")
    p_eval.add_argument("--scr", action="store_true", help="also report per-stage feature SCR")
    p_eval.set_defaults(func=cmd_eval)

    p_infer = sub.add_parser("infer", help="detect targets in one blurred image")
    p_infer.add_argument("--checkpoint", required=True)
    p_infer.add_argument("--image", required=True)
    p_infer.add_argument("--score-threshold", type=float, default=0.3)
    p_infer.add_argument("--iou-nms", type=float, default=0.5)
    p_infer.set_defaults(func=cmd_infer)

    p_inspect = sub.add_parser("inspect", help="dump checkpoint and feature diagnostics")
    p_inspect.add_argument("--checkpoint", required=True)
    p_inspect.add_argument("--image", help="image for feature statistics")
    p_inspect.add_argument("--box", type=float, nargs=4, metavar=("X", "Y", "W", "H"), help="target box for SCR")
    p_inspect.add_argument("--save-prior", help="directory for prior/high-pass/refined dumps")
    p_inspect.set_defaults(func=cmd_inspect)

    return parser


ERROR_CATEGORIES = (
    (ConfigError, "config"),
    (InvalidParameterError, "invalid-parameter"),
    (GenerationError, "generation"),
    (FileNotFoundError, "io"),
    (OSError, "io"),
)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - single exit point maps categories
        for etype, category in ERROR_CATEGORIES:
            if isinstance(exc, etype):
                print(f"error:{category}: {exc}", file=sys.stderr)
                return 2
        print(f"error:internal: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
