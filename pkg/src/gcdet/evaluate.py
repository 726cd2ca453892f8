"""Detection metrics: IoU, class-wise NMS, PR curves, AP/mAP, F1, timing.

Average precision follows the 101-point interpolation convention: detections
are ranked by confidence, matched greedily one-to-one to ground truths at
each IoU threshold, the precision envelope is taken (running max from the
right) and sampled at recall {0, 0.01, ..., 1}. mAP averages classes that
appear in the ground truth. The single F1 score is the maximum over
confidence thresholds of the class-macro F1 at IoU 0.5.
"""

import csv
import json
import statistics
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .detector import Detection
from .errors import ConfigError, DatasetError

DEFAULT_IOU_GRID = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)

# NMS/confidence settings: loose for mAP-comparable evaluation, tighter for
# prediction output
EVAL_CONF = 0.001
EVAL_NMS_IOU = 0.7
PREDICT_CONF = 0.25
PREDICT_NMS_IOU = 0.45
MAX_DETECTIONS_PER_IMAGE = 300


@dataclass(frozen=True)
class GroundTruth:
    box: tuple
    class_id: int
    image_id: str


@dataclass
class EvalReport:
    per_class_ap50: dict
    per_class_ap: dict
    map50: float
    map50_95: float
    f1: float
    pr_curves: dict
    num_images: int
    num_ground_truths: int
    num_detections: int
    params: int = None
    flops: float = None
    inference_ms: float = None

    def to_json_dict(self):
        return {
            "map50": self.map50,
            "map50_95": self.map50_95,
            "f1": self.f1,
            "per_class_ap50": {str(k): v for k, v in sorted(self.per_class_ap50.items())},
            "per_class_ap50_95": {str(k): v for k, v in sorted(self.per_class_ap.items())},
            "pr_curves": {
                str(k): [[float(r), float(p)] for r, p in v]
                for k, v in sorted(self.pr_curves.items())
            },
            "num_images": self.num_images,
            "num_ground_truths": self.num_ground_truths,
            "num_detections": self.num_detections,
            "params": self.params,
            "flops": self.flops,
            "inference_ms": self.inference_ms,
        }

    def save_json(self, path):
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=2, sort_keys=True))

    def save_pr_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["class_id", "recall", "precision"])
            for class_id in sorted(self.pr_curves):
                for r, p in self.pr_curves[class_id]:
                    writer.writerow([class_id, f"{r:.6f}", f"{p:.6f}"])

    def plot_pr(self, out_dir, class_names=None):
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = []
        for class_id in sorted(self.pr_curves):
            points = self.pr_curves[class_id]
            name = class_names[class_id] if class_names else f"class {class_id}"
            fig, ax = plt.subplots(figsize=(5, 4))
            if points:
                rs, ps = zip(*points)
                ax.plot(rs, ps, marker=".", linewidth=1.2)
            ax.set_xlim(0, 1.02)
            ax.set_ylim(0, 1.02)
            ax.set_xlabel("recall")
            ax.set_ylabel("precision")
            ap = self.per_class_ap50.get(class_id, 0.0)
            ax.set_title(f"{name}  AP50={ap:.3f}")
            ax.grid(alpha=0.3)
            path = out_dir / f"pr_class_{class_id}.png"
            fig.savefig(path, dpi=120, bbox_inches="tight")
            plt.close(fig)
            paths.append(path)
        return paths


def iou(a, b) -> float:
    """area(a n b) / area(a u b) of two xyxy boxes; 0 when the union is empty."""
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    area_a = max(0.0, a[2] - a[0]) * max(0.0, a[3] - a[1])
    area_b = max(0.0, b[2] - b[0]) * max(0.0, b[3] - b[1])
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def nms(dets, iou_thresh: float):
    """Class-wise greedy suppression by descending confidence, per image.

    Ties in confidence are broken toward the smaller input index. Survivors
    come back in their original input order.
    """
    if not (0.0 < iou_thresh < 1.0):
        raise ConfigError(f"iou_thresh must be in (0, 1), got {iou_thresh}")
    groups = {}
    for idx, det in enumerate(dets):
        groups.setdefault((det.image_id, det.class_id), []).append(idx)
    keep = []
    for indices in groups.values():
        order = sorted(indices, key=lambda i: (-dets[i].confidence, i))
        boxes = {i: dets[i].box for i in order}
        alive = list(order)
        while alive:
            best = alive.pop(0)
            keep.append(best)
            alive = [i for i in alive if iou(boxes[best], boxes[i]) <= iou_thresh]
    return [dets[i] for i in sorted(keep)]


def _canonical_dets(dets):
    return sorted(
        dets,
        key=lambda d: (-d.confidence, d.image_id, d.class_id, d.box),
    )


def _canonical_gts(gts):
    return sorted(gts, key=lambda g: (g.image_id, g.class_id, g.box))


def _match_class(dets, gts, thresh):
    """Greedy one-to-one matching for one class; returns tp flags per detection.

    dets must be in canonical (descending-confidence) order; each detection
    takes the unmatched ground truth in its image with the highest IoU at or
    above the threshold.
    """
    gt_by_image = {}
    for j, g in enumerate(gts):
        gt_by_image.setdefault(g.image_id, []).append(j)
    matched = [False] * len(gts)
    tp = [False] * len(dets)
    for i, d in enumerate(dets):
        best_j, best_iou = -1, -1.0
        for j in gt_by_image.get(d.image_id, ()):
            if matched[j]:
                continue
            v = iou(d.box, gts[j].box)
            if v >= thresh and v > best_iou:
                best_j, best_iou = j, v
        if best_j >= 0:
            matched[best_j] = True
            tp[i] = True
    return tp


def _ap_from_flags(tp_flags, n_gt):
    """101-point interpolated AP from ranked true-positive flags."""
    if n_gt == 0:
        return 0.0, []
    tp_cum = np.cumsum(np.asarray(tp_flags, dtype=np.float64))
    fp_cum = np.cumsum(1.0 - np.asarray(tp_flags, dtype=np.float64))
    recall = tp_cum / n_gt
    precision = tp_cum / np.maximum(tp_cum + fp_cum, 1e-16)
    envelope = np.maximum.accumulate(precision[::-1])[::-1] if len(precision) else precision
    sampled = np.zeros_like(RECALL_POINTS)
    if len(recall):
        idx = np.searchsorted(recall, RECALL_POINTS, side="left")
        valid = idx < len(recall)
        sampled[valid] = envelope[idx[valid]]
    ap = float(sampled.mean())
    curve = list(zip(recall.tolist(), precision.tolist()))
    return ap, curve


def evaluate_detections(dets, gts, iou_grid=None, image_ids=None) -> EvalReport:
    """Score NMS-filtered detections against ground truths.

    iou_grid defaults to 0.5:0.05:0.95; AP50 is the grid's 0.5 entry. Classes
    are those present in the ground truth; detections referencing image ids
    outside the ground-truth universe (or the explicit image_ids set) raise.
    """
    grid = tuple(iou_grid) if iou_grid is not None else DEFAULT_IOU_GRID
    if 0.5 not in grid:
        raise ConfigError("iou_grid must contain the 0.5 threshold")
    known = set(image_ids) if image_ids is not None else {g.image_id for g in gts}
    if image_ids is not None:
        known |= {g.image_id for g in gts}
    for d in dets:
        if d.image_id not in known:
            raise DatasetError(f"detection references unknown image id {d.image_id!r}")

    classes = sorted({g.class_id for g in gts})
    dets = _canonical_dets(dets)
    gts = _canonical_gts(gts)

    per_class_ap50, per_class_ap, pr_curves = {}, {}, {}
    tp50_by_class = {}
    for c in classes:
        c_dets = [d for d in dets if d.class_id == c]
        c_gts = [g for g in gts if g.class_id == c]
        aps = []
        for thresh in grid:
            tp = _match_class(c_dets, c_gts, thresh)
            ap, curve = _ap_from_flags(tp, len(c_gts))
            aps.append(ap)
            if thresh == 0.5:
                per_class_ap50[c] = ap
                pr_curves[c] = curve
                tp50_by_class[c] = tp
        per_class_ap[c] = float(np.mean(aps))

    map50 = float(np.mean([per_class_ap50[c] for c in classes])) if classes else 0.0
    map50_95 = float(np.mean([per_class_ap[c] for c in classes])) if classes else 0.0
    f1 = _max_macro_f1(dets, gts, classes, tp50_by_class)

    return EvalReport(
        per_class_ap50=per_class_ap50,
        per_class_ap=per_class_ap,
        map50=map50,
        map50_95=map50_95,
        f1=f1,
        pr_curves=pr_curves,
        num_images=len({g.image_id for g in gts} | {d.image_id for d in dets}),
        num_ground_truths=len(gts),
        num_detections=len(dets),
    )


def _max_macro_f1(dets, gts, classes, tp50_by_class):
    """Max over confidence thresholds of the class-mean F1 at IoU 0.5."""
    if not classes:
        return 0.0
    n_gt = {c: sum(1 for g in gts if g.class_id == c) for c in classes}
    conf_by_class = {
        c: [d.confidence for d in dets if d.class_id == c] for c in classes
    }
    thresholds = sorted({d.confidence for d in dets}, reverse=True)
    best = 0.0
    for t in thresholds:
        precisions, recalls = [], []
        for c in classes:
            flags = tp50_by_class.get(c, [])
            confs = conf_by_class[c]
            kept = [i for i, conf in enumerate(confs) if conf >= t]
            tp = sum(1 for i in kept if flags[i])
            fp = len(kept) - tp
            precisions.append(tp / (tp + fp) if (tp + fp) > 0 else 0.0)
            recalls.append(tp / n_gt[c] if n_gt[c] > 0 else 0.0)
        p, r = float(np.mean(precisions)), float(np.mean(recalls))
        if p + r > 0:
            best = max(best, 2 * p * r / (p + r))
    return best


@dataclass
class TimingStats:
    median_ms: float
    iqr_ms: float
    samples: list
    hardware: str

    def to_json_dict(self):
        return {
            "median_ms": self.median_ms,
            "iqr_ms": self.iqr_ms,
            "samples_ms": list(self.samples),
            "hardware": self.hardware,
        }


def _hardware_description():
    import platform

    import torch

    return (
        f"{platform.machine()} cpu, {platform.system().lower()}, "
        f"python {platform.python_version()}, torch {torch.__version__}, "
        f"{torch.get_num_threads()} threads"
    )


def benchmark_inference(
    detector,
    images,
    warmup: int = 3,
    runs: int = 10,
    conf_thresh: float = PREDICT_CONF,
    nms_iou: float = PREDICT_NMS_IOU,
) -> TimingStats:
    """Median per-image forward + decode + NMS latency over timed runs.

    Warmup passes are executed but not recorded. Each timed run processes
    every image once at batch size 1 on a single torch thread; the recorded
    sample is the mean per-image time of that run in milliseconds.
    """
    import torch

    from .detector import decode_boxes

    if runs < 1:
        raise ConfigError(f"runs must be >= 1, got {runs}")
    batches = [torch.as_tensor(img, dtype=torch.float32).unsqueeze(0) for img in images]
    was_training = detector.training
    old_threads = torch.get_num_threads()
    torch.set_num_threads(1)
    detector.eval()
    samples = []
    try:
        with torch.no_grad():
            for it in range(warmup + runs):
                start = time.perf_counter()
                for batch in batches:
                    raw = detector(batch)
                    dets = decode_boxes(raw, conf_thresh)[0]
                    nms(dets, nms_iou)
                elapsed = time.perf_counter() - start
                if it >= warmup:
                    samples.append(elapsed / len(batches) * 1000.0)
    finally:
        detector.train(was_training)
        torch.set_num_threads(old_threads)
    med = statistics.median(samples)
    if len(samples) >= 4:
        q = statistics.quantiles(samples, n=4)
        iqr_val = q[2] - q[0]
    else:
        iqr_val = max(samples) - min(samples)
    return TimingStats(
        median_ms=med, iqr_ms=iqr_val, samples=samples, hardware=_hardware_description()
    )


def write_predictions(dets, path):
    """Interchange file: one line per detection, 'image_id class conf x1 y1 x2 y2'."""
    with open(path, "w") as fh:
        for d in dets:
            x1, y1, x2, y2 = d.box
            fh.write(
                f"{d.image_id} {d.class_id} {d.confidence:.6f} "
                f"{x1:.2f} {y1:.2f} {x2:.2f} {y2:.2f}\n"
            )


def read_predictions(path):
    dets = []
    for line_no, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) != 7:
            raise DatasetError(f"{path}:{line_no}: expected 7 fields, got {len(fields)}")
        dets.append(
            Detection(
                box=tuple(float(v) for v in fields[3:7]),
                class_id=int(fields[1]),
                confidence=float(fields[2]),
                image_id=fields[0],
            )
        )
    return dets
