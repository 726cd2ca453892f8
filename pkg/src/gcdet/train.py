"""Training loop: SGD with momentum, decoupled weight decay, linear schedule.

Weight decay is applied to convolution/linear weights only; normalization
parameters and biases are excluded. The learning rate ramps linearly from
0.1 * lr0 to lr0 over the warmup epochs, then decays linearly to 0.01 * lr0
at the final epoch. Per-epoch validation runs the detection metrics on the
validation split; best-mAP50 and last checkpoints are written each run.
"""

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .data import letterbox
from .detector import DetectorConfig, build_detector, decode_boxes, save_checkpoint
from .errors import ConfigError, DatasetError, NumericError, TrainingDivergedError
from .evaluate import (
    EVAL_CONF,
    EVAL_NMS_IOU,
    MAX_DETECTIONS_PER_IMAGE,
    GroundTruth,
    evaluate_detections,
    nms,
)
from .loss import AssignerConfig, LossWeights, assign_targets, detection_loss


@dataclass(frozen=True)
class TrainConfig:
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    epochs: int = 100
    batch_size: int = 16
    lr0: float = 0.01
    momentum: float = 0.937
    weight_decay: float = 0.0005
    warmup_epochs: float = 3.0
    seed: int = 0
    image_size: int = 640
    clip_norm: float = 10.0
    augment: bool = True
    out_dir: str = "runs/train"
    threads: int = None
    loss_weights: LossWeights = field(default_factory=LossWeights)
    assigner: AssignerConfig = field(default_factory=AssignerConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr0 <= 0:
            raise ConfigError(f"lr0 must be positive, got {self.lr0}")
        if not (0.0 <= self.momentum < 1.0):
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.image_size % 32 != 0:
            raise ConfigError(f"image_size must be a multiple of 32, got {self.image_size}")


@dataclass
class EpochStats:
    epoch: int
    box_loss: float
    cls_loss: float
    dfl_loss: float
    total_loss: float
    val_map50: float
    lr: float


@dataclass
class TrainHistory:
    entries: list = field(default_factory=list)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "box", "cls", "dfl", "total", "val_map50", "lr"])
            for e in self.entries:
                writer.writerow(
                    [
                        e.epoch,
                        f"{e.box_loss:.6f}",
                        f"{e.cls_loss:.6f}",
                        f"{e.dfl_loss:.6f}",
                        f"{e.total_loss:.6f}",
                        f"{e.val_map50:.6f}",
                        f"{e.lr:.8f}",
                    ]
                )


def lr_schedule(cfg: TrainConfig, epoch: int) -> float:
    """Piecewise-linear rate: warmup from 0.1*lr0, decay to 0.01*lr0."""
    if not (0 <= epoch < cfg.epochs):
        raise ConfigError(f"epoch {epoch} outside [0, {cfg.epochs})")
    lr0, warmup = cfg.lr0, cfg.warmup_epochs
    if warmup > 0 and epoch < warmup:
        return lr0 * (0.1 + 0.9 * epoch / warmup)
    span = (cfg.epochs - 1) - warmup
    if span <= 0:
        return lr0
    return lr0 * (1.0 - 0.99 * (epoch - warmup) / span)


def build_optimizer(model: nn.Module, cfg: TrainConfig):
    """SGD with momentum; weight decay only on conv/linear weights."""
    decay, no_decay = [], []
    for module in model.modules():
        if isinstance(module, (nn.BatchNorm2d, nn.LayerNorm)):
            no_decay.extend(p for p in module.parameters(recurse=False))
        else:
            for name, p in module.named_parameters(recurse=False):
                (no_decay if name.endswith("bias") else decay).append(p)
    return torch.optim.SGD(
        [
            {"params": decay, "weight_decay": cfg.weight_decay},
            {"params": no_decay, "weight_decay": 0.0},
        ],
        lr=cfg.lr0,
        momentum=cfg.momentum,
    )


def _prepare(samples, size):
    """Letterbox every sample once: tensors in [0, 1] plus pixel-space targets."""
    images, boxes, classes, ids = [], [], [], []
    for s in samples:
        img, pix_boxes, _meta = letterbox(s, size)
        images.append(torch.from_numpy(img / 255.0))
        if pix_boxes:
            boxes.append(torch.tensor([b[1:] for b in pix_boxes], dtype=torch.float32))
            classes.append(torch.tensor([b[0] for b in pix_boxes], dtype=torch.long))
        else:
            boxes.append(torch.zeros(0, 4))
            classes.append(torch.zeros(0, dtype=torch.long))
        ids.append(s.source_id)
    return images, boxes, classes, ids


def validation_map50(model, images, boxes, classes, ids, batch_size):
    """mAP50 of the current weights over a prepared validation set."""
    gts = []
    for img_boxes, img_classes, image_id in zip(boxes, classes, ids):
        for b, c in zip(img_boxes.tolist(), img_classes.tolist()):
            gts.append(GroundTruth(box=tuple(b), class_id=int(c), image_id=image_id))
    dets = []
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            chunk = images[start : start + batch_size]
            batch = torch.stack(chunk)
            raw = model(batch)
            batch_ids = ids[start : start + len(chunk)]
            for per_image in decode_boxes(raw, EVAL_CONF, image_ids=batch_ids):
                kept = nms(per_image, EVAL_NMS_IOU)
                kept.sort(key=lambda d: -d.confidence)
                dets.extend(kept[:MAX_DETECTIONS_PER_IMAGE])
    model.train(was_training)
    report = evaluate_detections(dets, gts, image_ids=set(ids))
    return report.map50


def run_training(cfg: TrainConfig, train_samples, val_samples):
    """Train a detector; returns (best checkpoint path, TrainHistory).

    Deterministic for a fixed (config, seed) when run single-threaded: batch
    order, augmentation and initialization all derive from cfg.seed.
    """
    if not train_samples:
        raise DatasetError("training set is empty")
    if cfg.threads is not None:
        torch.set_num_threads(cfg.threads)
    torch.manual_seed(cfg.seed)

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if cfg.augment:
        from .data import build_augmented_trainset

        train_samples = build_augmented_trainset(train_samples, seed=cfg.seed)

    model = build_detector(cfg.detector, seed=cfg.seed)
    optimizer = build_optimizer(model, cfg)
    images, boxes, classes, _ids = _prepare(train_samples, cfg.image_size)
    val_prep = _prepare(val_samples, cfg.image_size) if val_samples else None

    order_rng = np.random.default_rng(cfg.seed)
    history = TrainHistory()
    best_map, best_path = -1.0, out_dir / "best.pt"
    last_path = out_dir / "last.pt"

    for epoch in range(cfg.epochs):
        lr = lr_schedule(cfg, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr

        order = order_rng.permutation(len(images))
        model.train()
        sums = np.zeros(4)
        n_batches = 0
        for batch_no, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            batch = torch.stack([images[i] for i in idx])
            gt_boxes = [boxes[i] for i in idx]
            gt_classes = [classes[i] for i in idx]

            try:
                raw = model(batch)
                assignment = assign_targets(raw, gt_boxes, gt_classes, cfg.assigner)
                loss = detection_loss(raw, assignment, cfg.loss_weights)
            except NumericError as exc:
                raise TrainingDivergedError(epoch, batch_no) from exc
            if not torch.isfinite(loss.total):
                raise TrainingDivergedError(epoch, batch_no)

            optimizer.zero_grad()
            loss.total.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.clip_norm)
            optimizer.step()

            sums += np.array(loss.floats())
            n_batches += 1

        mean_box, mean_cls, mean_dfl, mean_total = sums / max(n_batches, 1)
        val_map = (
            validation_map50(model, *val_prep, batch_size=cfg.batch_size)
            if val_prep
            else 0.0
        )
        history.entries.append(
            EpochStats(epoch, mean_box, mean_cls, mean_dfl, mean_total, val_map, lr)
        )

        save_checkpoint(last_path, model, optimizer, extra={"epoch": epoch})
        if val_map > best_map or (val_prep is None and epoch == cfg.epochs - 1):
            best_map = val_map
            save_checkpoint(
                best_path, model, optimizer, extra={"epoch": epoch, "val_map50": val_map}
            )

    history.to_csv(out_dir / "history.csv")
    return best_path, history
