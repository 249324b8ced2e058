"""Command-line interface.

Subcommands: train, eval, predict, make-prompts, synth-data. Every train
flag maps to exactly one TrainConfig key; precedence is defaults, then the
YAML config file, then flags. Logs go to stderr, data to stdout or files.
Exit codes: 0 success, 1 validation error (bad flags, bad config, missing or
malformed files), 2 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import yaml
from scipy import ndimage

from . import __version__
from .data import (load_binary_mask, load_image, load_manifest, load_prediction,
                   load_sample, make_synthetic_dataset, save_image, save_prediction)
from .errors import DataError
from .metrics import evaluate_dataset
from .prompting import REFERENCE_SIZE, make_prompt_box, scaled_margin
from .trainer import (MASK_MODES, PROMPT_SOURCES, TrainConfig, config_field_docs,
                      fit, models_from_checkpoint, predict)

log = logging.getLogger("collabseg")

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad usage; the exit-code contract wants 1
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _formatter(prog):
    return argparse.HelpFormatter(prog, width=96)


# TrainConfig keys exposed as flags: (flag, key, parser)
def _int_tuple(text):
    return tuple(int(v) for v in text.split(","))


def _float_tuple(text):
    return tuple(float(v) for v in text.split(","))


_CONFIG_FLAGS = [
    ("--batch-size", "batch_size", int, None),
    ("--epochs", "epochs", int, None),
    ("--lr-min", "lr_min", float, None),
    ("--lr-max", "lr_max", float, None),
    ("--warmup-fraction", "warmup_fraction", float, None),
    ("--momentum", "momentum", float, None),
    ("--weight-decay", "weight_decay", float, None),
    ("--image-size", "image_size", int, None),
    ("--down-scale", "down_scale", float, None),
    ("--crop-min", "crop_min", float, None),
    ("--crop-max", "crop_max", float, None),
    ("--margin-px", "margin_px", int, None),
    ("--tau", "tau", float, None),
    ("--segmenter", "segmenter", str, None),
    ("--prompt-source", "prompt_source", str, PROMPT_SOURCES),
    ("--mask-mode", "mask_mode", str, MASK_MODES),
    ("--collab-start-epoch", "collab_start_epoch", int, None),
    ("--backbone-channels", "backbone_channels", _int_tuple, None),
    ("--decoder-width", "decoder_width", int, None),
    ("--checkpoint-every", "checkpoint_every", int, None),
    ("--seed", "seed", int, None),
    ("--norm-mean", "norm_mean", _float_tuple, None),
    ("--norm-std", "norm_std", _float_tuple, None),
]


def _add_config_flags(p):
    defaults = config_field_docs()
    for flag, key, parse, choices in _CONFIG_FLAGS:
        default = defaults[key]
        if isinstance(default, tuple):
            default = ",".join(str(v) for v in default)
        p.add_argument(flag, dest=key, type=parse, choices=choices, default=None,
                       metavar="V", help=f"config key {key} (default {default})")


def build_parser() -> _Parser:
    parser = _Parser(prog="collabseg", formatter_class=_formatter,
                     description="Scribble-supervised segmentation with a "
                                 "promptable guided segmenter in the loop.")
    parser.add_argument("--version", action="version", version=f"collabseg {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("synth-data", formatter_class=_formatter,
                       help="generate a synthetic scribble dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--n", type=int, default=8, help="number of samples (default 8)")
    p.add_argument("--size", type=int, default=64, help="square image side (default 64)")
    p.add_argument("--seed", type=int, default=0, help="generator seed (default 0)")
    p.add_argument("--thickness", type=int, default=1,
                   help="scribble stroke thickness in pixels (default 1)")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", formatter_class=_formatter,
                       help="train on a scribble dataset")
    p.add_argument("--data", required=True, help="dataset directory or manifest.csv path")
    p.add_argument("--out", required=True, help="run directory for history and checkpoints")
    p.add_argument("--config", default=None, help="YAML file with TrainConfig keys")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", formatter_class=_formatter,
                       help="write probability maps for images")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint path")
    p.add_argument("--input", required=True, help="image file or directory of images")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--overlay", action="store_true",
                   help="also write images with the 0.5-level boundary drawn")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("make-prompts", formatter_class=_formatter,
                       help="emit per-image prompt boxes as CSV")
    p.add_argument("--data", required=True, help="dataset directory or manifest.csv path")
    p.add_argument("--checkpoint", default=None,
                   help="optional checkpoint; enables prediction-box intersection")
    p.add_argument("--margin-px", type=int, default=25,
                   help=f"box margin at the {REFERENCE_SIZE} reference size (default 25)")
    p.add_argument("--out", default=None, help="output CSV path (default stdout)")
    p.set_defaults(func=cmd_make_prompts)

    p = sub.add_parser("eval", formatter_class=_formatter,
                       help="score predictions against ground-truth masks")
    p.add_argument("--pred", required=True, help="directory of probability maps")
    p.add_argument("--gt", required=True, help="directory of binary ground-truth masks")
    p.add_argument("--out", default=None,
                   help="optional directory for report.csv and report.md")
    p.set_defaults(func=cmd_eval)

    return parser


# ---------------------------------------------------------------------------
# handlers


def cmd_synth_data(args) -> int:
    records = make_synthetic_dataset(args.out, n=args.n, size=args.size,
                                     seed=args.seed, thickness=args.thickness)
    log.info("wrote %d samples under %s", len(records), args.out)
    print(Path(args.out) / "manifest.csv")
    return 0


def _manifest_path(data):
    data = Path(data)
    return data if data.is_file() else data / "manifest.csv"


def _load_config_file(path) -> dict:
    known = set(config_field_docs())
    with open(path) as fh:
        loaded = yaml.safe_load(fh) or {}
    if not isinstance(loaded, dict):
        raise DataError(f"config file {path} must hold a mapping of TrainConfig keys")
    unknown = sorted(set(loaded) - known)
    if unknown:
        raise DataError(f"config file {path} has unknown keys: {', '.join(unknown)}")
    return loaded


def _config_from_args(args) -> TrainConfig:
    merged = {}
    if args.config:
        if not Path(args.config).is_file():
            raise DataError(f"config file not found: {args.config}")
        merged.update(_load_config_file(args.config))
    for _, key, _, _ in _CONFIG_FLAGS:
        value = getattr(args, key)
        if value is not None:
            merged[key] = value
    return TrainConfig(**merged)


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    records = load_manifest(_manifest_path(args.data))
    log.info("training on %d records for %d epochs", len(records), cfg.epochs)
    result = fit(records, cfg, args.out, resume_from=args.resume)
    log.info("history: %s", result.history_path)
    print(result.checkpoint_path)
    return 0


def _input_images(path) -> list:
    path = Path(path)
    if path.is_file():
        return [path]
    if path.is_dir():
        found = sorted(p for p in path.iterdir()
                       if p.suffix.lower() in IMAGE_EXTENSIONS)
        if found:
            return found
        raise DataError(f"no images under {path}")
    raise DataError(f"input not found: {path}")


def _draw_boundary(image, mask):
    border = ndimage.binary_dilation(mask) ^ ndimage.binary_erosion(mask)
    out = image.copy()
    out[0][border] = 1.0
    out[1][border] = 0.0
    out[2][border] = 0.0
    return out


def cmd_predict(args) -> int:
    models, cfg = models_from_checkpoint(args.checkpoint)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.overlay:
        # keep the prediction directory eval-clean
        (out_dir / "overlays").mkdir(exist_ok=True)
    for path in _input_images(args.input):
        image = load_image(path)
        prob = predict(image, models, cfg)
        save_prediction(out_dir / f"{path.stem}.png", prob)
        if args.overlay:
            save_image(out_dir / "overlays" / f"{path.stem}.png",
                       _draw_boundary(image, prob >= 0.5))
        log.info("predicted %s", path.stem)
    print(out_dir)
    return 0


def cmd_make_prompts(args) -> int:
    records = load_manifest(_manifest_path(args.data))
    models = cfg = None
    if args.checkpoint:
        models, cfg = models_from_checkpoint(args.checkpoint)
    lines = ["image_id,x0,y0,x1,y1,source"]
    for rec in records:
        if rec.scribble is None:
            continue
        sample = load_sample(rec)
        h, w = sample.scribble.shape
        prob = predict(sample.image, models, cfg) if models is not None else None
        margin = scaled_margin(args.margin_px, max(h, w))
        box, source = make_prompt_box(sample.scribble, prob, margin=margin,
                                      bounds=(w, h), return_source=True)
        lines.append(f"{rec.id},{box.x0},{box.y0},{box.x1},{box.y1},{source}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        log.info("wrote %d prompts to %s", len(lines) - 1, args.out)
    else:
        sys.stdout.write(text)
    return 0


def _stem_map(directory) -> dict:
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"directory not found: {directory}")
    return {p.stem: p for p in sorted(directory.iterdir())
            if p.suffix.lower() in IMAGE_EXTENSIONS}


def cmd_eval(args) -> int:
    preds = _stem_map(args.pred)
    gts = _stem_map(args.gt)
    missing_gt = sorted(set(preds) - set(gts))
    missing_pred = sorted(set(gts) - set(preds))
    if missing_gt or missing_pred:
        raise DataError(
            "prediction/ground-truth mismatch; "
            f"no gt for: {missing_gt or 'none'}; no prediction for: {missing_pred or 'none'}"
        )
    if not preds:
        raise DataError("no prediction images found")
    pairs = ((load_prediction(preds[k]), load_binary_mask(gts[k])) for k in sorted(preds))
    report = evaluate_dataset(pairs)
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.csv").write_text(report.to_csv())
        (out_dir / "report.md").write_text(report.to_markdown())
        log.info("wrote report.csv and report.md under %s", out_dir)
    sys.stdout.write(report.to_csv())
    return 0


# ---------------------------------------------------------------------------


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except ValueError as exc:  # DataError, AnnotationError, PromptError, bad config
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
