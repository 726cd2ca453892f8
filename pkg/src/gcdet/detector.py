"""Scalable anchor-free detector: CSP backbone, PAN neck, decoupled head.

The neck's four cross-stage blocks (two top-down, two bottom-up) can each be
followed by one global-context block. Box regression is distributional: each
side of a box is predicted as a categorical distribution over reg_max bins and
decoded as its expectation times the stride.
"""

import math
from dataclasses import dataclass, asdict
from typing import Optional, Sequence

import torch
from torch import nn

from .errors import CheckpointError, ConfigError, ShapeError
from .gc_block import GlobalContextBlock, gc_param_count
from .layers import C2f, Conv, SPPF

# size -> (depth_multiple, width_multiple, max_channels)
SIZE_PRESETS = {
    "S": (0.33, 0.50, 1024),
    "M": (0.67, 0.75, 768),
    "L": (1.00, 1.00, 512),
}

STRIDES = (8, 16, 32)

CHECKPOINT_VERSION = 1


def _scaled_width(c, width_multiple, max_channels, divisor=8):
    return int(math.ceil(min(c, max_channels) * width_multiple / divisor) * divisor)


def _scaled_depth(n, depth_multiple):
    return max(round(n * depth_multiple), 1)


@dataclass(frozen=True)
class DetectorConfig:
    size: str = "S"
    gc_enabled: bool = False
    gc_ratio: int = 8
    num_classes: int = 9
    reg_max: int = 16

    def __post_init__(self):
        if self.size not in SIZE_PRESETS:
            raise ConfigError(
                f"unknown size {self.size!r}, expected one of {sorted(SIZE_PRESETS)}"
            )
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.reg_max < 2:
            raise ConfigError(f"reg_max must be >= 2, got {self.reg_max}")
        if self.gc_ratio < 1:
            raise ConfigError(f"gc_ratio must be >= 1, got {self.gc_ratio}")

    @property
    def strides(self):
        return STRIDES

    def widths(self):
        """Channel widths (w64, w128, w256, w512, w1024) after scaling."""
        _, wm, max_ch = SIZE_PRESETS[self.size]
        return tuple(_scaled_width(c, wm, max_ch) for c in (64, 128, 256, 512, 1024))

    def depths(self):
        """(n3, n6): repeat counts for the shallow and deep stages."""
        dm, _, _ = SIZE_PRESETS[self.size]
        return _scaled_depth(3, dm), _scaled_depth(6, dm)

    def gc_channel_widths(self):
        """Channel count at each of the four neck GC placements, in forward order."""
        _, _, w256, w512, w1024 = self.widths()
        return (w512, w256, w512, w1024)


@dataclass
class RawPredictions:
    """Dense per-scale head outputs before decoding.

    cls_logits[i] has shape (N, num_classes, H/s_i, W/s_i) and dfl_logits[i]
    (N, 4*reg_max, H/s_i, W/s_i) for stride s_i.
    """

    cls_logits: tuple
    dfl_logits: tuple
    strides: tuple
    input_hw: tuple
    reg_max: int

    @property
    def batch_size(self):
        return self.cls_logits[0].shape[0]

    @property
    def num_classes(self):
        return self.cls_logits[0].shape[1]

    def cell_centers(self):
        """Pixel-space centers of every head cell, flattened over scales.

        Returns (centers (A, 2), stride_per_cell (A,)) as float tensors.
        """
        ref = self.cls_logits[0]
        centers, strides = [], []
        for logits, s in zip(self.cls_logits, self.strides):
            _, _, h, w = logits.shape
            ys = (torch.arange(h, dtype=ref.dtype) + 0.5) * s
            xs = (torch.arange(w, dtype=ref.dtype) + 0.5) * s
            gy, gx = torch.meshgrid(ys, xs, indexing="ij")
            centers.append(torch.stack((gx, gy), dim=-1).view(-1, 2))
            strides.append(torch.full((h * w,), float(s), dtype=ref.dtype))
        return torch.cat(centers), torch.cat(strides)

    def flat_cls(self):
        """Class logits flattened to (N, A, num_classes)."""
        n, nc = self.batch_size, self.num_classes
        return torch.cat(
            [t.view(n, nc, -1).permute(0, 2, 1) for t in self.cls_logits], dim=1
        )

    def flat_dfl(self):
        """Box distribution logits flattened to (N, A, 4, reg_max)."""
        n = self.batch_size
        out = []
        for t in self.dfl_logits:
            a = t.shape[2] * t.shape[3]
            out.append(t.view(n, 4, self.reg_max, a).permute(0, 3, 1, 2))
        return torch.cat(out, dim=1)


@dataclass(frozen=True)
class Detection:
    """One decoded detection: pixel xyxy box, class id, confidence, image id."""

    box: tuple
    class_id: int
    confidence: float
    image_id: str = ""


class Detector(nn.Module):
    def __init__(self, cfg: DetectorConfig):
        super().__init__()
        self.cfg = cfg
        w64, w128, w256, w512, w1024 = cfg.widths()
        n3, n6 = cfg.depths()

        # backbone
        self.stem = Conv(3, w64, 3, 2)
        self.down2 = Conv(w64, w128, 3, 2)
        self.stage2 = C2f(w128, w128, n3, shortcut=True)
        self.down3 = Conv(w128, w256, 3, 2)
        self.stage3 = C2f(w256, w256, n6, shortcut=True)
        self.down4 = Conv(w256, w512, 3, 2)
        self.stage4 = C2f(w512, w512, n6, shortcut=True)
        self.down5 = Conv(w512, w1024, 3, 2)
        self.stage5 = C2f(w1024, w1024, n3, shortcut=True)
        self.sppf = SPPF(w1024, w1024, 5)

        # neck: top-down (FPN) then bottom-up (PAN)
        self.up = nn.Upsample(scale_factor=2.0, mode="nearest")
        self.td_p4 = C2f(w1024 + w512, w512, n3, shortcut=False)
        self.td_p3 = C2f(w512 + w256, w256, n3, shortcut=False)
        self.down_p3 = Conv(w256, w256, 3, 2)
        self.bu_p4 = C2f(w256 + w512, w512, n3, shortcut=False)
        self.down_p4 = Conv(w512, w512, 3, 2)
        self.bu_p5 = C2f(w512 + w1024, w1024, n3, shortcut=False)

        if cfg.gc_enabled:
            gw = cfg.gc_channel_widths()
            self.gc_td_p4 = GlobalContextBlock(gw[0], cfg.gc_ratio)
            self.gc_td_p3 = GlobalContextBlock(gw[1], cfg.gc_ratio)
            self.gc_bu_p4 = GlobalContextBlock(gw[2], cfg.gc_ratio)
            self.gc_bu_p5 = GlobalContextBlock(gw[3], cfg.gc_ratio)

        # decoupled head: separate box (distribution) and class branches per scale
        head_in = (w256, w512, w1024)
        cb = max(16, w256 // 4, 4 * cfg.reg_max)
        cc = max(w256, min(cfg.num_classes, 100))
        self.box_heads = nn.ModuleList(
            nn.Sequential(Conv(c, cb, 3), Conv(cb, cb, 3), nn.Conv2d(cb, 4 * cfg.reg_max, 1))
            for c in head_in
        )
        self.cls_heads = nn.ModuleList(
            nn.Sequential(Conv(c, cc, 3), Conv(cc, cc, 3), nn.Conv2d(cc, cfg.num_classes, 1))
            for c in head_in
        )

    def gc_blocks(self):
        return [m for m in self.modules() if isinstance(m, GlobalContextBlock)]

    def init_weights(self, seed: int):
        """Deterministic init: fan-in uniform conv weights, zero biases,
        unit norms, zeroed GC expand convs, prior-shifted head biases."""
        g = torch.Generator().manual_seed(seed)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                fan_in = (m.in_channels // m.groups) * m.kernel_size[0] * m.kernel_size[1]
                bound = 1.0 / math.sqrt(fan_in)
                m.weight.data.uniform_(-bound, bound, generator=g)
                if m.bias is not None:
                    m.bias.data.zero_()
            elif isinstance(m, nn.BatchNorm2d):
                m.weight.data.fill_(1.0)
                m.bias.data.zero_()
                m.running_mean.data.zero_()
                m.running_var.data.fill_(1.0)
                m.num_batches_tracked.data.zero_()
            elif isinstance(m, nn.LayerNorm):
                m.weight.data.fill_(1.0)
                m.bias.data.zero_()
        for gc in self.gc_blocks():
            gc.expand.weight.data.zero_()
            gc.expand.bias.data.zero_()
        # bias priors: boxes start small, class confidences start rare
        for i, s in enumerate(self.cfg.strides):
            self.box_heads[i][-1].bias.data.fill_(1.0)
            prior = math.log(5.0 / self.cfg.num_classes / (640.0 / s) ** 2)
            self.cls_heads[i][-1].bias.data.fill_(prior)
        return self

    def _neck_features(self, x):
        x = self.stem(x)
        x = self.stage2(self.down2(x))
        p3 = self.stage3(self.down3(x))
        p4 = self.stage4(self.down4(p3))
        p5 = self.sppf(self.stage5(self.down5(p4)))

        t4 = self.td_p4(torch.cat((self.up(p5), p4), 1))
        if self.cfg.gc_enabled:
            t4 = self.gc_td_p4(t4)
        t3 = self.td_p3(torch.cat((self.up(t4), p3), 1))
        if self.cfg.gc_enabled:
            t3 = self.gc_td_p3(t3)
        b4 = self.bu_p4(torch.cat((self.down_p3(t3), t4), 1))
        if self.cfg.gc_enabled:
            b4 = self.gc_bu_p4(b4)
        b5 = self.bu_p5(torch.cat((self.down_p4(b4), p5), 1))
        if self.cfg.gc_enabled:
            b5 = self.gc_bu_p5(b5)
        return t3, b4, b5

    def forward(self, images: torch.Tensor) -> RawPredictions:
        n, c, h, w = images.shape
        if c != 3:
            raise ShapeError(f"expected 3 input channels, got {c}")
        for name, dim in (("height", h), ("width", w)):
            if dim % 32 != 0:
                raise ShapeError(f"input {name} {dim} is not a multiple of 32")
        feats = self._neck_features(images)
        cls_logits = tuple(head(f) for head, f in zip(self.cls_heads, feats))
        dfl_logits = tuple(head(f) for head, f in zip(self.box_heads, feats))
        return RawPredictions(
            cls_logits=cls_logits,
            dfl_logits=dfl_logits,
            strides=self.cfg.strides,
            input_hw=(h, w),
            reg_max=self.cfg.reg_max,
        )


def build_detector(cfg: DetectorConfig, seed: int = 0) -> Detector:
    return Detector(cfg).init_weights(seed)


def forward_raw(detector: Detector, images: torch.Tensor) -> RawPredictions:
    return detector(images)


def count_params(detector: Detector) -> int:
    """Exact number of learnable scalars in the model."""
    return sum(p.numel() for p in detector.parameters() if p.requires_grad)


def gc_param_delta(cfg: DetectorConfig) -> int:
    """Closed-form parameter cost of enabling the four neck GC blocks."""
    return sum(gc_param_count(c, cfg.gc_ratio) for c in cfg.gc_channel_widths())


def decode_distances(raw: RawPredictions) -> torch.Tensor:
    """Expected side distances in pixels, shape (N, A, 4) = (left, top, right, bottom)."""
    dfl = raw.flat_dfl()  # (N, A, 4, reg_max)
    bins = torch.arange(raw.reg_max, dtype=dfl.dtype)
    expect = (dfl.softmax(dim=3) * bins).sum(dim=3)  # (N, A, 4) in stride units
    _, stride_per_cell = raw.cell_centers()
    return expect * stride_per_cell.view(1, -1, 1)


def decode_boxes_tensor(raw: RawPredictions, clip: bool = True):
    """Decode every cell to a pixel xyxy box. Returns (boxes (N, A, 4), probs (N, A, nc))."""
    centers, _ = raw.cell_centers()
    dist = decode_distances(raw)
    cx, cy = centers[:, 0].view(1, -1), centers[:, 1].view(1, -1)
    x1 = cx - dist[..., 0]
    y1 = cy - dist[..., 1]
    x2 = cx + dist[..., 2]
    y2 = cy + dist[..., 3]
    boxes = torch.stack((x1, y1, x2, y2), dim=-1)
    if clip:
        h, w = raw.input_hw
        boxes[..., 0::2] = boxes[..., 0::2].clamp(0, w)
        boxes[..., 1::2] = boxes[..., 1::2].clamp(0, h)
    probs = raw.flat_cls().sigmoid()
    return boxes, probs


def decode_boxes(
    raw: RawPredictions,
    conf_thresh: float,
    image_ids: Optional[Sequence[str]] = None,
) -> list:
    """Threshold and materialize detections per image.

    Emits one Detection per (cell, class) whose sigmoid confidence reaches
    conf_thresh; boxes are clipped to the input bounds. Returns a list with
    one list of detections per batch image.
    """
    if not (0.0 <= conf_thresh <= 1.0):
        raise ConfigError(f"conf_thresh must be in [0, 1], got {conf_thresh}")
    with torch.no_grad():
        boxes, probs = decode_boxes_tensor(raw, clip=True)
    n = raw.batch_size
    if image_ids is None:
        image_ids = [str(i) for i in range(n)]
    if len(image_ids) != n:
        raise ConfigError(f"got {len(image_ids)} image ids for batch of {n}")
    out = []
    for i in range(n):
        keep = (probs[i] >= conf_thresh).nonzero(as_tuple=False)
        dets = []
        for cell, cls in keep.tolist():
            b = boxes[i, cell]
            dets.append(
                Detection(
                    box=(float(b[0]), float(b[1]), float(b[2]), float(b[3])),
                    class_id=int(cls),
                    confidence=float(probs[i, cell, cls]),
                    image_id=image_ids[i],
                )
            )
        out.append(dets)
    return out


def save_checkpoint(path, detector: Detector, optimizer=None, extra=None):
    """Versioned checkpoint: config echo + named weight arrays (+ optimizer state)."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "kind": "gcdet-checkpoint",
        "detector_config": asdict(detector.cfg),
        "model_state": detector.state_dict(),
    }
    if optimizer is not None:
        payload["optimizer_state"] = optimizer.state_dict()
    if extra:
        payload["extra"] = dict(extra)
    torch.save(payload, path)


def load_checkpoint(path, expected_cfg: Optional[DetectorConfig] = None):
    """Load a checkpoint; returns (detector, payload).

    If expected_cfg is given it must match the stored config exactly.
    """
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("kind") != "gcdet-checkpoint":
        raise CheckpointError(f"{path}: not a detector checkpoint")
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version {payload.get('format_version')}"
        )
    cfg = DetectorConfig(**payload["detector_config"])
    if expected_cfg is not None and cfg != expected_cfg:
        raise CheckpointError(
            f"{path}: checkpoint config {cfg} does not match expected {expected_cfg}"
        )
    detector = Detector(cfg)
    detector.load_state_dict(payload["model_state"])
    return detector, payload
