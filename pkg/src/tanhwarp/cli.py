"""Command-line surface.

Exit codes: 0 success, 1 usage error, 2 data error (unreadable or malformed
files, inconsistent shapes), 3 numeric failure (degenerate geometry,
non-finite losses). Details go to stderr.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import dataio, evaluation, training
from .errors import (
    ClassOutOfRange,
    DegenerateBox,
    DegenerateLandmarks,
    MalformedFile,
    NonFiniteLoss,
    OutOfDomain,
    ShapeMismatch,
)
from .geometry import estimate_similarity
from .model import (
    ModelConfig,
    background_fill,
    load_model,
    parse_face,
    save_model,
)
from .sampler import MODES, from_network_frame, to_network_frame

_DATA_ERRORS = (MalformedFile, OSError, ShapeMismatch, ClassOutOfRange, ValueError)
_NUMERIC_ERRORS = (DegenerateLandmarks, DegenerateBox, OutOfDomain, NonFiniteLoss)


def cmd_warp(args) -> int:
    image = dataio.load_image(args.image)
    landmarks = dataio.load_landmarks(args.landmarks)
    t = estimate_similarity(landmarks)
    warped = to_network_frame(image, t, (args.size, args.size), mode=args.mode, policy=args.border)
    dataio.save_image(args.out, warped)
    return 0


def cmd_dewarp(args) -> int:
    path = Path(args.scores)
    if path.suffix.lower() == ".png":
        scores = dataio.load_image(path)
    else:
        scores = dataio.load_scoremap(path)
    landmarks = dataio.load_landmarks(args.landmarks)
    t = estimate_similarity(landmarks)
    fill = background_fill(scores.shape[2]) if scores.shape[2] >= 4 else None
    out = from_network_frame(scores, t, (args.height, args.width), mode=args.mode, outside_fill=fill)
    prefix = args.out
    dataio.save_scoremap(f"{prefix}.twsm", out)
    if out.shape[2] in (1, 3):
        dataio.save_image(f"{prefix}.png", out[:, :, 0] if out.shape[2] == 1 else out)
    else:
        dataio.save_labelmap(f"{prefix}_labels.png", np.argmax(out, axis=-1).astype(np.uint8))
    return 0


def cmd_gen_synth(args) -> int:
    out = Path(args.out)
    for sub in ("images", "labels", "landmarks"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    samples = training.generate_synthetic(args.seed, args.count)
    records = []
    for i, sample in enumerate(samples):
        image_path = out / "images" / f"sample_{i:04d}.png"
        label_path = out / "labels" / f"sample_{i:04d}.png"
        lmk_path = out / "landmarks" / f"sample_{i:04d}.txt"
        dataio.save_image(image_path, sample.image)
        dataio.save_labelmap(label_path, sample.labels)
        dataio.save_landmarks(lmk_path, sample.landmarks)
        records.append(dataio.ManifestRecord(image_path, label_path, lmk_path))
    dataio.save_manifest(out / "manifest.tsv", records)
    dataio.save_palette(out / "palette.txt")
    return 0


def cmd_train(args) -> int:
    if args.config:
        train_cfg = training.train_config_from_text(Path(args.config).read_text(encoding="utf-8"))
    else:
        train_cfg = training.TrainConfig()
    if args.mode:
        train_cfg = replace(train_cfg, mode=args.mode)
    if args.seed is not None:
        train_cfg = replace(train_cfg, seed=args.seed)
    if args.no_padding:
        train_cfg = replace(train_cfg, padding=False)

    manifest = dataio.load_manifest(args.data)
    dataset = dataio.load_samples(manifest)
    for i, sample in enumerate(dataset):
        if sample.labels is None:
            raise MalformedFile(args.data, f"record {i}: training requires a label map")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = training.train(
        ModelConfig(),
        train_cfg,
        dataset,
        log_path=out / "loss_log.csv",
        progress=args.progress,
    )
    save_model(out / "model.twck", result.model)
    with open(out / "train_config.txt", "w", encoding="utf-8") as f:
        f.write(training.train_config_to_text(train_cfg))
    return 0


def cmd_parse(args) -> int:
    model = load_model(args.model)
    image = dataio.load_image(args.image)
    landmarks = dataio.load_landmarks(args.landmarks)
    output = parse_face(model, image, landmarks, mode=args.mode)
    prefix = args.out
    dataio.save_labelmap(f"{prefix}_labels.png", output.labels)
    dataio.save_image(f"{prefix}_overlay.png", dataio.overlay_labels(image, output.labels))
    dataio.save_scoremap(f"{prefix}_scores.twsm", output.scores)
    return 0


def cmd_fuse(args) -> int:
    maps = [dataio.load_scoremap(p) for p in args.scores]
    labels, instances = evaluation.fuse_multiface(maps)
    prefix = args.out
    dataio.save_labelmap(f"{prefix}_labels.png", labels)
    dataio.save_labelmap(f"{prefix}_instances.png", (instances + 1).astype(np.uint8))
    return 0


def cmd_eval(args) -> int:
    pred_dir, gt_dir = Path(args.pred_dir), Path(args.gt_dir)
    pred_files = sorted(pred_dir.glob("*.png"))
    if not pred_files:
        raise MalformedFile(pred_dir, "no .png label maps found")
    scores = evaluation.ClassScores()
    for pred_path in pred_files:
        gt_path = gt_dir / pred_path.name
        if not gt_path.exists():
            raise MalformedFile(gt_path, "no matching ground-truth label map")
        pred = dataio.load_labelmap(pred_path)
        gt = dataio.load_labelmap(gt_path)
        evaluation.f_measure(pred, gt, scores)
    evaluation.write_report(args.report, scores)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tanhwarp", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("warp", help="warp an image into the fixed-size face frame")
    p.add_argument("--image", required=True)
    p.add_argument("--landmarks", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--mode", choices=MODES, default="warp")
    p.add_argument("--border", choices=("zero", "replicate"), default="zero")
    p.set_defaults(func=cmd_warp)

    p = sub.add_parser("dewarp", help="map frame scores or images back to the source domain")
    p.add_argument("--scores", required=True, help=".twsm score map or .png image")
    p.add_argument("--landmarks", required=True)
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--out", required=True, help="output path prefix")
    p.add_argument("--mode", choices=MODES, default="warp")
    p.set_defaults(func=cmd_dewarp)

    p = sub.add_parser("gen-synth", help="generate a synthetic labeled face dataset")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("train", help="two-stage training on a manifest dataset")
    p.add_argument("--config", help="key=value training config file")
    p.add_argument("--data", required=True, help="manifest.tsv path")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--seed", type=int)
    p.add_argument("--no-padding", action="store_true", help="disable RoI box padding (ablation)")
    p.add_argument("--progress", type=int, default=0, help="print losses every N iterations")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("parse", help="parse one face: labels, overlay, de-warped scores")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--landmarks", required=True)
    p.add_argument("--out", required=True, help="output path prefix")
    p.add_argument("--mode", choices=MODES)
    p.set_defaults(func=cmd_parse)

    p = sub.add_parser("fuse", help="fuse per-face score maps into labels + instances")
    p.add_argument("--out", required=True, help="output path prefix")
    p.add_argument("scores", nargs="+", help="per-face .twsm score maps")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("eval", help="score predicted label maps against ground truth")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--report", required=True, help="output CSV path")
    p.set_defaults(func=cmd_eval)
    return parser


def cli_dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1
    try:
        return args.func(args)
    except _NUMERIC_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except _DATA_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def main():
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
