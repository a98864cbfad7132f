"""Command-line entry point: ``woundseg {train,predict,gradcam,stats,synth}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data_io import (
    DatasetError,
    DatasetIndex,
    Entry,
    SynthConfig,
    _list_images,
    compute_stats,
    generate_synthetic,
    load_index,
    mask_to_gray,
    read_image,
    write_png,
    write_prediction,
    write_stats,
)
from .errors import ConfigError, ContractError, ShapeError
from .explain import OverlayConfig, bilinear_resize, gradcam, render_overlay, render_side_by_side, upsample_cam
from .metrics import binarize
from .model import CAM_LAYERS, ModelConfig, TransUNet
from .training import CheckpointError, DataGenerator, TrainConfig, TrainingError, load_pair, train
from .weights import WeightsError

log = logging.getLogger("woundseg")

EXPECTED_ERRORS = (
    DatasetError, WeightsError, ConfigError, ContractError, ShapeError,
    CheckpointError, TrainingError, OSError, ValueError,
)


def _model_config(weights: Path, scaled: bool) -> ModelConfig:
    run = weights.parent / "run.json"
    if run.exists():
        meta = json.loads(run.read_text())
        if "model_config" in meta:
            return ModelConfig.from_dict(meta["model_config"])
    return ModelConfig.scaled() if scaled else ModelConfig.full()


def _image_index(folder: Path) -> DatasetIndex:
    if not folder.is_dir():
        raise DatasetError(f"input folder {folder} does not exist")
    images = _list_images(folder)
    if not images:
        raise DatasetError(f"no images in {folder}")
    return DatasetIndex("test", [Entry(p, None) for p in images])


def cmd_train(args) -> int:
    cfg = ModelConfig.scaled() if args.scaled else ModelConfig.full()
    tcfg = TrainConfig(
        lr0=args.lr, batch_size=args.batch_size, max_epochs=args.epochs, seed=args.seed, target_hw=cfg.input_hw
    )
    tr = load_index(args.data_dir, "train", labels_dir=args.labels_dir)
    va = load_index(args.data_dir, "validation", labels_dir=args.labels_dir)
    train_gen = DataGenerator(tr, tcfg.batch_size, shuffle=True, seed=tcfg.seed, target_hw=tcfg.target_hw)
    val_gen = DataGenerator(va, tcfg.batch_size, shuffle=False, target_hw=tcfg.target_hw)
    model = TransUNet(cfg, seed=args.seed)
    result = train(model, train_gen, val_gen, tcfg, args.out)
    last = result.history[-1]
    print(
        f"trained {len(result.history)} epochs; best epoch {result.best_epoch}; "
        f"val dice {last.val.dice:.4f}; weights {result.checkpoint}"
    )
    return 0


def cmd_predict(args) -> int:
    weights = Path(args.weights)
    cfg = _model_config(weights, args.scaled)
    model = TransUNet.load(weights, cfg).eval()
    index = _image_index(Path(args.input))
    out = Path(args.out)
    for e in index:
        img, _ = load_pair(e, cfg.input_hw)
        prob = model.predict(img[None])[0, ..., 0]
        h, w = read_image(e.image).shape[:2]
        if (h, w) != prob.shape:
            prob = np.clip(bilinear_resize(prob, h, w), 0.0, 1.0)
        write_prediction(prob, out / f"{e.stem}.png", args.threshold)
    print(f"wrote {len(index)} masks to {out}")
    return 0


def cmd_gradcam(args) -> int:
    weights = Path(args.weights)
    cfg = _model_config(weights, args.scaled)
    model = TransUNet.load(weights, cfg).eval()
    index = _image_index(Path(args.input))
    out = Path(args.out)
    ocfg = OverlayConfig(alpha=args.alpha)
    for e in index:
        img, _ = load_pair(e, cfg.input_hw)
        cam = upsample_cam(gradcam(model, img, args.layer), cfg.input_hw)
        pred = binarize(model.predict(img[None])[0, ..., 0])
        write_png(render_overlay(img, cam.values, "cam", ocfg), out / f"{e.stem}_cam.png")
        write_png(render_overlay(img, pred, "mask", ocfg), out / f"{e.stem}_overlay.png")
        write_png(render_side_by_side(img, mask_to_gray(pred)), out / f"{e.stem}_sbs.png")
    print(f"wrote Grad-CAM panels for {len(index)} images to {out}")
    return 0


def cmd_stats(args) -> int:
    root = Path(args.data_dir)
    indices = []
    for split in ("train", "validation", "test"):
        if (root / split / "images").is_dir():
            labeled = (root / split / args.labels_dir).is_dir()
            indices.append(load_index(root, split, labels_dir=args.labels_dir, labeled=labeled))
    if not indices:
        raise DatasetError(f"no split folders under {root}")
    report = compute_stats(indices)
    json_path, csv_path = write_stats(report, args.out)
    print(f"wound fraction {report.wound_fraction:.4f}; wrote {json_path} and {csv_path}")
    return 0


def cmd_synth(args) -> int:
    val_count = args.val_count if args.val_count is not None else max(1, args.count // 4)
    generate_synthetic(SynthConfig(count=args.count, image_hw=args.size, seed=args.seed), args.out, "train")
    generate_synthetic(SynthConfig(count=val_count, image_hw=args.size, seed=args.seed + 1), args.out, "validation")
    print(f"wrote {args.count} training and {val_count} validation pairs to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(prog="woundseg", description="Wound segmentation with a transformer U-Net.",
                                formatter_class=fmt)
    p.add_argument("--log-level", default="WARNING", help="logging level")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train on <data-dir>/{train,validation}", formatter_class=fmt)
    t.add_argument("--data-dir", required=True, help="dataset root")
    t.add_argument("--out", required=True, help="output directory for best.futw, history.csv, run.json")
    t.add_argument("--epochs", type=int, default=50, help="maximum epochs")
    t.add_argument("--batch-size", type=int, default=16, help="batch size")
    t.add_argument("--lr", type=float, default=0.001, help="initial Adam learning rate")
    t.add_argument("--seed", type=int, default=0, help="seed for weights and shuffling")
    t.add_argument("--scaled", action="store_true", help="use the 64px desk-scale model")
    t.add_argument("--labels-dir", default="labels", help="mask folder name inside each split")
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="write 0/255 masks for a folder of images", formatter_class=fmt)
    pr.add_argument("--weights", required=True, help=".futw weights file")
    pr.add_argument("--input", required=True, help="folder of input images")
    pr.add_argument("--out", required=True, help="output folder (same filenames, .png)")
    pr.add_argument("--threshold", type=float, default=0.5, help="probability threshold (strict >)")
    pr.add_argument("--scaled", action="store_true", help="scaled model when no run.json sits next to the weights")
    pr.set_defaults(func=cmd_predict)

    g = sub.add_parser("gradcam", help="write Grad-CAM, mask overlay and side-by-side panels", formatter_class=fmt)
    g.add_argument("--weights", required=True, help=".futw weights file")
    g.add_argument("--input", required=True, help="folder of input images")
    g.add_argument("--out", required=True, help="output folder")
    g.add_argument("--layer", default="dec4", choices=CAM_LAYERS, help="target layer")
    g.add_argument("--alpha", type=float, default=0.4, help="overlay blend weight")
    g.add_argument("--scaled", action="store_true", help="scaled model when no run.json sits next to the weights")
    g.set_defaults(func=cmd_gradcam)

    s = sub.add_parser("stats", help="intensity histograms and mask class counts", formatter_class=fmt)
    s.add_argument("--data-dir", required=True, help="dataset root")
    s.add_argument("--out", required=True, help="JSON output path (a .csv histogram is written beside it)")
    s.add_argument("--labels-dir", default="labels", help="mask folder name inside each split")
    s.set_defaults(func=cmd_stats)

    y = sub.add_parser("synth", help="generate a synthetic wound corpus", formatter_class=fmt)
    y.add_argument("--out", required=True, help="output dataset root")
    y.add_argument("--count", type=int, default=8, help="training pairs")
    y.add_argument("--size", type=int, default=64, help="image height and width")
    y.add_argument("--seed", type=int, default=0, help="generator seed")
    y.add_argument("--val-count", type=int, default=None, help="validation pairs (default count // 4, min 1)")
    y.set_defaults(func=cmd_synth)
    return p


def cli(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except EXPECTED_ERRORS as exc:
        print(f"woundseg {args.command}: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli())
