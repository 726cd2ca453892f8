"""Dataset ingestion, splitting, photometric augmentation, synthetic data.

On-disk layout: <root>/images/*.png|jpg plus <root>/labels/<stem>.txt, one
label line per box: "class cx cy w h" with center/size normalized to [0, 1].
Split manifests are three plain text files (train.txt/val.txt/test.txt), one
image stem per line.
"""

from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .errors import DatasetError, LabelParseError

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")


@dataclass
class ImageSample:
    """One image as a (3, H, W) float array in [0, 255] plus normalized boxes.

    Boxes are (class_id, cx, cy, w, h) tuples with all coordinates in [0, 1].
    """

    image: np.ndarray
    boxes: list
    source_id: str

    @property
    def height(self):
        return self.image.shape[1]

    @property
    def width(self):
        return self.image.shape[2]


@dataclass
class SplitManifest:
    train: list
    val: list
    test: list
    seed: int
    ratios: tuple

    def all_ids(self):
        return self.train + self.val + self.test

    def save(self, out_dir):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for name, ids in (("train", self.train), ("val", self.val), ("test", self.test)):
            (out_dir / f"{name}.txt").write_text("".join(f"{i}\n" for i in ids))

    @staticmethod
    def load(manifest_dir, seed=0, ratios=(0.7, 0.2, 0.1)):
        manifest_dir = Path(manifest_dir)
        parts = []
        for name in ("train", "val", "test"):
            path = manifest_dir / f"{name}.txt"
            if not path.exists():
                raise DatasetError(f"missing manifest file {path}")
            parts.append([line for line in path.read_text().splitlines() if line])
        return SplitManifest(parts[0], parts[1], parts[2], seed, tuple(ratios))


def clip_box(cx, cy, w, h):
    """Clip a normalized cx/cy/w/h box so both edges stay inside [0, 1]."""
    x1 = min(max(cx - w / 2, 0.0), 1.0)
    y1 = min(max(cy - h / 2, 0.0), 1.0)
    x2 = min(max(cx + w / 2, 0.0), 1.0)
    y2 = min(max(cy + h / 2, 0.0), 1.0)
    return ((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)


def parse_label_file(path, num_classes):
    path = Path(path)
    boxes = []
    for line_no, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) != 5:
            raise LabelParseError(path, line_no, f"expected 5 fields, got {len(fields)}")
        try:
            class_id = int(fields[0])
            cx, cy, w, h = (float(v) for v in fields[1:])
        except ValueError as exc:
            raise LabelParseError(path, line_no, f"non-numeric field: {exc}") from exc
        if not (0 <= class_id < num_classes):
            raise LabelParseError(
                path, line_no, f"class id {class_id} outside [0, {num_classes})"
            )
        boxes.append((class_id, *clip_box(cx, cy, w, h)))
    return boxes


def load_dataset(root, num_classes=9):
    """Read every image under <root>/images with its label file, if any.

    Samples are returned sorted by source_id so the result is independent of
    directory enumeration order.
    """
    root = Path(root)
    image_dir, label_dir = root / "images", root / "labels"
    if not image_dir.is_dir():
        raise DatasetError(f"missing image directory {image_dir}")
    samples = []
    for path in sorted(image_dir.iterdir()):
        if path.suffix.lower() not in IMAGE_EXTENSIONS:
            continue
        bgr = cv2.imread(str(path), cv2.IMREAD_COLOR)
        if bgr is None:
            raise DatasetError(f"unreadable image {path}")
        image = bgr[:, :, ::-1].transpose(2, 0, 1).astype(np.float32)
        label_path = label_dir / f"{path.stem}.txt"
        boxes = parse_label_file(label_path, num_classes) if label_path.exists() else []
        samples.append(ImageSample(image=image, boxes=boxes, source_id=path.stem))
    samples.sort(key=lambda s: s.source_id)
    return samples


def save_dataset(samples, root):
    """Write samples back to the <root>/images + <root>/labels layout."""
    root = Path(root)
    image_dir, label_dir = root / "images", root / "labels"
    image_dir.mkdir(parents=True, exist_ok=True)
    label_dir.mkdir(parents=True, exist_ok=True)
    for s in samples:
        rgb = np.clip(s.image, 0, 255).astype(np.uint8).transpose(1, 2, 0)
        cv2.imwrite(str(image_dir / f"{s.source_id}.png"), rgb[:, :, ::-1])
        lines = "".join(
            f"{c} {cx:.6f} {cy:.6f} {w:.6f} {h:.6f}\n" for c, cx, cy, w, h in s.boxes
        )
        (label_dir / f"{s.source_id}.txt").write_text(lines)


def split_dataset(samples, ratios=(0.7, 0.2, 0.1), seed=0) -> SplitManifest:
    """Deterministic shuffle + per-ratio floor split into train/val/test ids.

    Sizes are floor(n * r_train) and floor(n * r_val); the test split takes
    the remainder, so the partition is always exhaustive.
    """
    if not samples:
        raise DatasetError("cannot split an empty dataset")
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise DatasetError(f"need three positive ratios, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DatasetError(f"ratios must sum to 1, got {sum(ratios)}")
    ids = sorted(s.source_id if isinstance(s, ImageSample) else str(s) for s in samples)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n = len(shuffled)
    n_train = int(n * ratios[0])
    n_val = int(n * ratios[1])
    return SplitManifest(
        train=shuffled[:n_train],
        val=shuffled[n_train : n_train + n_val],
        test=shuffled[n_train + n_val :],
        seed=seed,
        ratios=tuple(ratios),
    )


def augment_blend(image: np.ndarray, alpha: float, beta: float) -> np.ndarray:
    """Contrast/brightness blend: clip(alpha * pixel + beta, 0, 255)."""
    if alpha <= 0:
        raise DatasetError(f"alpha must be positive, got {alpha}")
    return np.clip(alpha * image.astype(np.float32) + beta, 0.0, 255.0)


def build_augmented_trainset(
    train,
    seed=0,
    alpha_range=(0.8, 1.2),
    beta_range=(-20.0, 20.0),
):
    """Double the training set with one photometric copy per sample.

    The copies keep the originals' boxes untouched; alpha/beta are drawn per
    image from a generator seeded here, so the result depends only on
    (input order, seed).
    """
    if not train:
        raise DatasetError("cannot augment an empty training set")
    rng = np.random.default_rng(seed)
    out = list(train)
    for s in train:
        alpha = rng.uniform(*alpha_range)
        beta = rng.uniform(*beta_range)
        out.append(
            ImageSample(
                image=augment_blend(s.image, alpha, beta),
                boxes=[tuple(b) for b in s.boxes],
                source_id=f"{s.source_id}_aug",
            )
        )
    return out


# class id -> (shape kind, fill intensity); high-contrast and distinct so a
# small model can tell classes apart at desk scale
_SHAPE_KINDS = ("rect", "disk", "diamond")
_TONES = (235, 20, 185, 60, 210, 95, 150, 245, 35)


def _draw_shape(canvas, class_id, x1, y1, x2, y2, rng):
    kind = _SHAPE_KINDS[class_id % len(_SHAPE_KINDS)]
    tone = _TONES[class_id % len(_TONES)] + rng.uniform(-8, 8)
    h, w = canvas.shape
    yy, xx = np.mgrid[0:h, 0:w]
    cx, cy = (x1 + x2) / 2.0, (y1 + y2) / 2.0
    rx, ry = max((x2 - x1) / 2.0, 1.0), max((y2 - y1) / 2.0, 1.0)
    if kind == "rect":
        mask = (xx >= x1) & (xx <= x2) & (yy >= y1) & (yy <= y2)
    elif kind == "disk":
        mask = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
    else:  # diamond
        mask = np.abs(xx - cx) / rx + np.abs(yy - cy) / ry <= 1.0
    canvas[mask] = tone


def synth_generate(
    n,
    num_classes=9,
    class_weights=None,
    image_size=160,
    seed=0,
    max_boxes=4,
):
    """Deterministic synthetic dataset: bright/dark shapes on a noisy gray field.

    Each image carries 1..max_boxes non-overlapping boxes; classes are drawn
    according to class_weights (uniform when omitted). Every box lies fully
    inside the image.
    """
    if n < 1:
        raise DatasetError(f"n must be >= 1, got {n}")
    if class_weights is None:
        class_weights = [1.0] * num_classes
    weights = np.asarray(class_weights, dtype=np.float64)
    if len(weights) != num_classes or (weights < 0).any() or weights.sum() == 0:
        raise DatasetError("class_weights must be non-negative, not all zero")
    probs = weights / weights.sum()

    rng = np.random.default_rng(seed)
    pad = 2
    samples = []
    for idx in range(n):
        canvas = rng.normal(112.0, 11.0, size=(image_size, image_size))
        k = int(rng.integers(1, max_boxes + 1))
        boxes = []
        placed = []
        for _ in range(k):
            for _attempt in range(20):
                bw = rng.uniform(0.20, 0.42) * image_size
                bh = rng.uniform(0.20, 0.42) * image_size
                x1 = rng.uniform(pad, image_size - pad - bw)
                y1 = rng.uniform(pad, image_size - pad - bh)
                x2, y2 = x1 + bw, y1 + bh
                if all(_box_iou_xyxy((x1, y1, x2, y2), p) < 0.1 for p in placed):
                    class_id = int(rng.choice(num_classes, p=probs))
                    _draw_shape(canvas, class_id, x1, y1, x2, y2, rng)
                    placed.append((x1, y1, x2, y2))
                    boxes.append(
                        (
                            class_id,
                            (x1 + x2) / 2 / image_size,
                            (y1 + y2) / 2 / image_size,
                            (x2 - x1) / image_size,
                            (y2 - y1) / image_size,
                        )
                    )
                    break
        image = np.clip(canvas, 0, 255).astype(np.float32)
        samples.append(
            ImageSample(
                image=np.repeat(image[None, :, :], 3, axis=0),
                boxes=boxes,
                source_id=f"synth_{idx:05d}",
            )
        )
    return samples


def _box_iou_xyxy(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    area = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / area if area > 0 else 0.0


def letterbox(sample: ImageSample, size: int, fill: float = 114.0):
    """Scale to fit a size x size square, pad the rest; returns (image, boxes, meta).

    image is (3, size, size) float32 in [0, 255]; boxes become pixel xyxy
    (class_id, x1, y1, x2, y2) in the padded frame; meta = (scale, pad_x,
    pad_y) maps padded-frame pixels back to the original image.
    """
    _, h, w = sample.image.shape
    scale = min(size / h, size / w)
    new_h, new_w = int(round(h * scale)), int(round(w * scale))
    hwc = sample.image.transpose(1, 2, 0)
    resized = cv2.resize(hwc, (new_w, new_h), interpolation=cv2.INTER_LINEAR)
    out = np.full((size, size, 3), fill, dtype=np.float32)
    pad_x = (size - new_w) // 2
    pad_y = (size - new_h) // 2
    out[pad_y : pad_y + new_h, pad_x : pad_x + new_w] = resized
    boxes = []
    for class_id, cx, cy, bw, bh in sample.boxes:
        x1 = (cx - bw / 2) * w * scale + pad_x
        y1 = (cy - bh / 2) * h * scale + pad_y
        x2 = (cx + bw / 2) * w * scale + pad_x
        y2 = (cy + bh / 2) * h * scale + pad_y
        boxes.append((class_id, x1, y1, x2, y2))
    return out.transpose(2, 0, 1), boxes, (scale, pad_x, pad_y)


def unletterbox_box(box, meta):
    """Map a padded-frame xyxy box back to original-image pixels."""
    scale, pad_x, pad_y = meta
    x1, y1, x2, y2 = box
    return ((x1 - pad_x) / scale, (y1 - pad_y) / scale, (x2 - pad_x) / scale, (y2 - pad_y) / scale)
