"""Command-line entry point for the full pipeline.

Subcommands: split, augment, synth, train, eval, predict, bench, report,
plot-pr. Every command is seeded and idempotent: identical inputs and seeds
produce byte-identical outputs.
"""

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .config import apply_overrides, load_run_config
from .detector import (
    DetectorConfig,
    build_detector,
    count_params,
    decode_boxes,
    load_checkpoint,
)
from .errors import DatasetError, GcdetError


def _add_config_flags(p):
    p.add_argument("--config", type=str, default=None, help="YAML run config file")
    p.add_argument("--seed", type=int, default=None, help="seed for all randomness (default 0)")


def _detector_flags(p):
    p.add_argument("--size", choices=["S", "M", "L"], default=None, help="model size preset")
    gc = p.add_mutually_exclusive_group()
    gc.add_argument("--gc", dest="gc_enabled", action="store_true", default=None,
                    help="enable the global-context blocks")
    gc.add_argument("--no-gc", dest="gc_enabled", action="store_false", default=None,
                    help="disable the global-context blocks")
    p.add_argument("--gc-ratio", type=int, default=None, help="GC bottleneck reduction ratio")
    p.add_argument("--num-classes", type=int, default=None, help="number of object classes")


def _resolve(args, extra_overrides=None):
    config = load_run_config(getattr(args, "config", None))
    overrides = {
        "detector.size": getattr(args, "size", None),
        "detector.gc_enabled": getattr(args, "gc_enabled", None),
        "detector.gc_ratio": getattr(args, "gc_ratio", None),
        "detector.num_classes": getattr(args, "num_classes", None),
        "train.seed": getattr(args, "seed", None),
    }
    if extra_overrides:
        overrides.update(extra_overrides)
    return apply_overrides(config, overrides)


def _detector_config(config) -> DetectorConfig:
    return DetectorConfig(**config["detector"])


def cmd_split(args):
    from .data import load_dataset, split_dataset

    config = _resolve(args)
    samples = load_dataset(args.data, num_classes=config["detector"]["num_classes"])
    manifest = split_dataset(samples, tuple(args.ratios), seed=config["train"]["seed"])
    out_dir = Path(args.out or args.data)
    manifest.save(out_dir)
    print(
        f"split {len(samples)} samples -> train {len(manifest.train)} / "
        f"val {len(manifest.val)} / test {len(manifest.test)} in {out_dir}"
    )
    return 0


def cmd_augment(args):
    from .data import SplitManifest, build_augmented_trainset, load_dataset, save_dataset

    config = _resolve(args)
    samples = load_dataset(args.data, num_classes=config["detector"]["num_classes"])
    if args.manifest:
        manifest = SplitManifest.load(args.manifest)
        wanted = set(manifest.train)
        samples = [s for s in samples if s.source_id in wanted]
    if not samples:
        raise DatasetError("no training samples to augment")
    doubled = build_augmented_trainset(samples, seed=config["train"]["seed"])
    save_dataset(doubled, args.out)
    print(f"augmented {len(samples)} -> {len(doubled)} samples in {args.out}")
    return 0


def cmd_synth(args):
    from .data import save_dataset, synth_generate

    config = _resolve(args)
    samples = synth_generate(
        n=args.n,
        num_classes=config["detector"]["num_classes"],
        class_weights=args.class_weights,
        image_size=args.image_size,
        seed=config["train"]["seed"],
    )
    save_dataset(samples, args.out)
    print(f"generated {len(samples)} synthetic samples in {args.out}")
    return 0


def cmd_train(args):
    from .data import SplitManifest, load_dataset
    from .train import TrainConfig, run_training

    config = _resolve(
        args,
        {
            "train.epochs": args.epochs,
            "train.batch_size": args.batch_size,
            "train.image_size": args.image_size,
            "train.lr0": args.lr0,
        },
    )
    tc = config["train"]
    samples = load_dataset(args.data, num_classes=config["detector"]["num_classes"])
    by_id = {s.source_id: s for s in samples}
    manifest = SplitManifest.load(args.manifest or args.data)
    missing = [i for i in manifest.train + manifest.val if i not in by_id]
    if missing:
        raise DatasetError(f"manifest ids missing from dataset: {missing[:5]}")
    train_samples = [by_id[i] for i in manifest.train]
    val_samples = [by_id[i] for i in manifest.val]
    cfg = TrainConfig(
        detector=_detector_config(config),
        epochs=tc["epochs"],
        batch_size=tc["batch_size"],
        lr0=tc["lr0"],
        momentum=tc["momentum"],
        weight_decay=tc["weight_decay"],
        warmup_epochs=tc["warmup_epochs"],
        seed=tc["seed"],
        image_size=tc["image_size"],
        clip_norm=tc["clip_norm"],
        augment=tc["augment"],
        out_dir=args.out,
        threads=args.threads,
    )
    best, history = run_training(cfg, train_samples, val_samples)
    last = history.entries[-1]
    print(
        f"trained {cfg.epochs} epochs: final total loss {last.total_loss:.4f}, "
        f"val mAP50 {last.val_map50:.4f}; best checkpoint {best}"
    )
    return 0


def _load_eval_inputs(args, config):
    from .data import SplitManifest, load_dataset

    samples = load_dataset(args.data, num_classes=config["detector"]["num_classes"])
    by_id = {s.source_id: s for s in samples}
    if args.manifest or args.split != "all":
        manifest = SplitManifest.load(args.manifest or args.data)
        ids = {"train": manifest.train, "val": manifest.val, "test": manifest.test}[args.split]
        missing = [i for i in ids if i not in by_id]
        if missing:
            raise DatasetError(f"manifest ids missing from dataset: {missing[:5]}")
        samples = [by_id[i] for i in ids]
    return samples


def cmd_eval(args):
    import statistics
    import time

    import torch

    from .evaluate import GroundTruth, evaluate_detections, nms
    from .flops import estimate_flops
    from .data import letterbox
    from .evaluate import MAX_DETECTIONS_PER_IMAGE

    config = _resolve(args)
    detector, _payload = load_checkpoint(args.checkpoint)
    samples = _load_eval_inputs(args, config)
    if not samples:
        raise DatasetError("no samples selected for evaluation")
    conf = args.conf if args.conf is not None else config["eval"]["conf"]
    nms_iou = args.nms_iou if args.nms_iou is not None else config["eval"]["nms_iou"]

    size = args.image_size or config["train"]["image_size"]
    gts, dets, times = [], [], []
    detector.eval()
    with torch.no_grad():
        for s in samples:
            img, pix_boxes, _ = letterbox(s, size)
            for class_id, x1, y1, x2, y2 in pix_boxes:
                gts.append(GroundTruth(box=(x1, y1, x2, y2), class_id=class_id,
                                       image_id=s.source_id))
            start = time.perf_counter()
            raw = detector(torch.from_numpy(img / 255.0).unsqueeze(0))
            per_image = decode_boxes(raw, conf, image_ids=[s.source_id])[0]
            kept = nms(per_image, nms_iou)
            times.append((time.perf_counter() - start) * 1000.0)
            kept.sort(key=lambda d: -d.confidence)
            dets.extend(kept[:MAX_DETECTIONS_PER_IMAGE])

    report = evaluate_detections(dets, gts, image_ids={s.source_id for s in samples})
    report.params = count_params(detector)
    report.flops = estimate_flops(detector, size)
    report.inference_ms = statistics.median(times)
    report.save_json(args.out)
    print(
        f"evaluated {len(samples)} images: mAP50 {report.map50:.4f}, "
        f"mAP50-95 {report.map50_95:.4f}, F1 {report.f1:.4f} -> {args.out}"
    )
    return 0


def cmd_predict(args):
    import torch

    from .data import letterbox, load_dataset, unletterbox_box
    from .detector import Detection
    from .evaluate import MAX_DETECTIONS_PER_IMAGE, nms, write_predictions

    config = _resolve(args)
    detector, _payload = load_checkpoint(args.checkpoint)
    samples = load_dataset(args.data, num_classes=config["detector"]["num_classes"])
    if not samples:
        raise DatasetError(f"no images found under {args.data}")
    conf = args.conf if args.conf is not None else config["predict"]["conf"]
    nms_iou = args.nms_iou if args.nms_iou is not None else config["predict"]["nms_iou"]
    size = args.image_size or config["train"]["image_size"]

    out = []
    detector.eval()
    with torch.no_grad():
        for s in samples:
            img, _boxes, meta = letterbox(s, size)
            raw = detector(torch.from_numpy(img / 255.0).unsqueeze(0))
            per_image = decode_boxes(raw, conf, image_ids=[s.source_id])[0]
            kept = nms(per_image, nms_iou)
            kept.sort(key=lambda d: -d.confidence)
            for d in kept[:MAX_DETECTIONS_PER_IMAGE]:
                out.append(
                    Detection(
                        box=unletterbox_box(d.box, meta),
                        class_id=d.class_id,
                        confidence=d.confidence,
                        image_id=d.image_id,
                    )
                )
    write_predictions(out, args.out)
    print(f"wrote {len(out)} detections for {len(samples)} images -> {args.out}")
    return 0


def cmd_bench(args):
    import numpy as np

    from .evaluate import benchmark_inference

    config = _resolve(args)
    if args.checkpoint:
        detector, _ = load_checkpoint(args.checkpoint)
    else:
        detector = build_detector(_detector_config(config), seed=config["train"]["seed"])
    rng = np.random.default_rng(config["train"]["seed"])
    images = [
        rng.random((3, args.input_size, args.input_size), dtype=np.float32)
        for _ in range(args.n_images)
    ]
    stats = benchmark_inference(detector, images, warmup=args.warmup, runs=args.runs)
    print(
        f"median {stats.median_ms:.2f} ms/image (iqr {stats.iqr_ms:.2f}) over "
        f"{args.runs} runs at {args.input_size}px [{stats.hardware}]"
    )
    if args.out:
        Path(args.out).write_text(json.dumps(stats.to_json_dict(), indent=2, sort_keys=True))
    return 0


def cmd_report(args):
    from .flops import PROFILE_INPUT_SIZE, estimate_flops

    config = _resolve(args)
    rows = []
    for size in args.sizes:
        for gc_enabled in (False, True):
            cfg = DetectorConfig(
                size=size,
                gc_enabled=gc_enabled,
                gc_ratio=config["detector"]["gc_ratio"],
                num_classes=config["detector"]["num_classes"],
            )
            det = build_detector(cfg, seed=0)
            rows.append(
                {
                    "variant": "+GC" if gc_enabled else "baseline",
                    "size": size,
                    "params": count_params(det),
                    "gflops_reported": estimate_flops(det, PROFILE_INPUT_SIZE) / 1e9,
                    f"gflops_at_{args.input_size}": estimate_flops(det, args.input_size) / 1e9,
                }
            )
    at_key = f"gflops_at_{args.input_size}"
    header = (
        f"{'variant':<10} {'size':<5} {'params':>12} {'GFLOPs':>9} "
        f"{'@' + str(args.input_size):>11}"
    )
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(
            f"{r['variant']:<10} {r['size']:<5} {r['params'] / 1e6:>10.2f}M "
            f"{r['gflops_reported']:>8.1f}G {r[at_key]:>10.1f}G"
        )
    text = "\n".join(lines)
    print(text)
    if args.json:
        Path(args.json).write_text(json.dumps(rows, indent=2, sort_keys=True))
    return 0


def cmd_plot_pr(args):
    from .evaluate import EvalReport

    data = json.loads(Path(args.report).read_text())
    curves = {int(k): [tuple(p) for p in v] for k, v in data.get("pr_curves", {}).items()}
    report = EvalReport(
        per_class_ap50={int(k): v for k, v in data.get("per_class_ap50", {}).items()},
        per_class_ap={int(k): v for k, v in data.get("per_class_ap50_95", {}).items()},
        map50=data.get("map50", 0.0),
        map50_95=data.get("map50_95", 0.0),
        f1=data.get("f1", 0.0),
        pr_curves=curves,
        num_images=data.get("num_images", 0),
        num_ground_truths=data.get("num_ground_truths", 0),
        num_detections=data.get("num_detections", 0),
    )
    paths = report.plot_pr(args.out)
    csv_path = Path(args.out) / "pr_curves.csv"
    report.save_pr_csv(csv_path)
    print(f"wrote {len(paths)} curve images and {csv_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gcdet",
        description="Anchor-free fracture detector with global-context attention",
    )
    parser.add_argument("--version", action="version", version=f"gcdet {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", help="write train/val/test manifests")
    p.add_argument("--data", required=True, help="dataset root (images/ + labels/)")
    p.add_argument("--ratios", type=float, nargs=3, default=(0.7, 0.2, 0.1),
                   metavar=("TRAIN", "VAL", "TEST"), help="split ratios, must sum to 1")
    p.add_argument("--out", default=None, help="manifest directory (default: data root)")
    _add_config_flags(p)
    _detector_flags(p)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("augment", help="materialize the doubled training set")
    p.add_argument("--data", required=True)
    p.add_argument("--manifest", default=None, help="restrict to the train split of this manifest")
    p.add_argument("--out", required=True, help="output dataset root")
    _add_config_flags(p)
    _detector_flags(p)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("synth", help="generate a synthetic shape dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=100, help="number of images")
    p.add_argument("--image-size", type=int, default=160)
    p.add_argument("--class-weights", type=float, nargs="+", default=None,
                   help="relative class frequencies (default: uniform)")
    _add_config_flags(p)
    _detector_flags(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a detector")
    p.add_argument("--data", required=True)
    p.add_argument("--manifest", default=None, help="manifest directory (default: data root)")
    p.add_argument("--out", default="runs/train", help="output directory")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--image-size", type=int, default=None)
    p.add_argument("--lr0", type=float, default=None)
    p.add_argument("--threads", type=int, default=None, help="torch CPU threads (1 = deterministic)")
    _add_config_flags(p)
    _detector_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--manifest", default=None)
    p.add_argument("--split", choices=["train", "val", "test", "all"], default="val")
    p.add_argument("--out", default="report.json")
    p.add_argument("--image-size", type=int, default=None)
    p.add_argument("--conf", type=float, default=None)
    p.add_argument("--nms-iou", type=float, default=None)
    _add_config_flags(p)
    _detector_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="run a checkpoint over images, write detections")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset root with images/")
    p.add_argument("--out", default="predictions.txt")
    p.add_argument("--image-size", type=int, default=None)
    p.add_argument("--conf", type=float, default=None)
    p.add_argument("--nms-iou", type=float, default=None)
    _add_config_flags(p)
    _detector_flags(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("bench", help="benchmark forward + decode + NMS latency")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--input-size", type=int, default=640)
    p.add_argument("--n-images", type=int, default=4)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--out", default=None, help="write timing stats JSON here")
    _add_config_flags(p)
    _detector_flags(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("report", help="parameter/FLOP table for size x variant")
    p.add_argument("--sizes", nargs="+", choices=["S", "M", "L"], default=["S", "M", "L"])
    p.add_argument("--input-size", type=int, default=1024)
    p.add_argument("--json", default=None, help="also write the table as JSON")
    _add_config_flags(p)
    _detector_flags(p)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("plot-pr", help="render PR curves from an eval report")
    p.add_argument("--report", required=True, help="report JSON from the eval command")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_plot_pr)

    return parser


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse handles --help and usage errors
        return int(exc.code or 0)
    try:
        return args.func(args)
    except GcdetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))
