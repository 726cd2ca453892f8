"""Target assignment and the composite detection loss.

Assignment is task-aligned: candidate cells are those whose centers fall
inside a ground-truth box, ranked by (class prob)^alpha * (IoU)^beta, top-k
kept per ground truth, conflicts resolved toward the higher-IoU ground truth.
The loss combines complete-IoU box regression, binary cross-entropy against
soft alignment-score targets, and a two-bin distributional term for box sides.
"""

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .detector import RawPredictions, decode_boxes_tensor
from .errors import NumericError


@dataclass(frozen=True)
class AssignerConfig:
    alpha: float = 0.5
    beta: float = 6.0
    topk: int = 10


@dataclass(frozen=True)
class LossWeights:
    box: float = 7.5
    cls: float = 0.5
    dfl: float = 1.5


@dataclass
class LossBreakdown:
    box_loss: torch.Tensor
    cls_loss: torch.Tensor
    dfl_loss: torch.Tensor
    total: torch.Tensor

    def floats(self):
        return (
            float(self.box_loss.detach()),
            float(self.cls_loss.detach()),
            float(self.dfl_loss.detach()),
            float(self.total.detach()),
        )


@dataclass
class Assignment:
    """Per-cell assignment over the flattened anchor grid (A cells).

    fg_mask (N, A) marks positive cells; gt_index (N, A) gives the matched
    ground-truth row; target_dist holds the four side distances in stride
    units, clamped into the distribution support; target_scores are the soft
    classification targets (zero everywhere for negatives).
    """

    fg_mask: torch.Tensor
    gt_index: torch.Tensor
    target_boxes: torch.Tensor
    target_dist: torch.Tensor
    target_scores: torch.Tensor

    @property
    def num_positives(self) -> int:
        return int(self.fg_mask.sum())

    def per_scale_masks(self, raw: RawPredictions):
        """Positive mask reshaped back to one (N, H/s, W/s) map per scale."""
        n = raw.batch_size
        out, offset = [], 0
        for t in raw.cls_logits:
            h, w = t.shape[2], t.shape[3]
            out.append(self.fg_mask[:, offset : offset + h * w].view(n, h, w))
            offset += h * w
        return out


def pairwise_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Plain IoU between every row of a (M, 4) and b (N, 4), xyxy."""
    area_a = (a[:, 2] - a[:, 0]).clamp(min=0) * (a[:, 3] - a[:, 1]).clamp(min=0)
    area_b = (b[:, 2] - b[:, 0]).clamp(min=0) * (b[:, 3] - b[:, 1]).clamp(min=0)
    lt = torch.maximum(a[:, None, :2], b[None, :, :2])
    rb = torch.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / union.clamp(min=1e-12)


def ciou_tensor(a: torch.Tensor, b: torch.Tensor, eps: float = 1e-9) -> torch.Tensor:
    """Complete IoU of paired boxes a and b, shape (..., 4) xyxy.

    IoU minus the normalized center distance and the aspect-ratio penalty.
    Fully differentiable; degenerate zero-area pairs at the same center
    evaluate to 0.
    """
    ax1, ay1, ax2, ay2 = a.unbind(-1)
    bx1, by1, bx2, by2 = b.unbind(-1)
    wa, ha = (ax2 - ax1).clamp(min=0), (ay2 - ay1).clamp(min=0)
    wb, hb = (bx2 - bx1).clamp(min=0), (by2 - by1).clamp(min=0)

    inter_w = (torch.minimum(ax2, bx2) - torch.maximum(ax1, bx1)).clamp(min=0)
    inter_h = (torch.minimum(ay2, by2) - torch.maximum(ay1, by1)).clamp(min=0)
    inter = inter_w * inter_h
    union = wa * ha + wb * hb - inter
    iou = inter / (union + eps)

    cw = torch.maximum(ax2, bx2) - torch.minimum(ax1, bx1)
    ch = torch.maximum(ay2, by2) - torch.minimum(ay1, by1)
    c2 = cw * cw + ch * ch
    rho2 = ((ax1 + ax2 - bx1 - bx2) ** 2 + (ay1 + ay2 - by1 - by2) ** 2) / 4.0

    v = (4.0 / math.pi**2) * (torch.atan2(wb, hb) - torch.atan2(wa, ha)) ** 2
    alpha = v / (1.0 - iou + v + eps)
    return iou - rho2 / (c2 + eps) - alpha * v


def ciou(a, b) -> float:
    """Scalar complete IoU of two xyxy boxes."""
    ta = torch.as_tensor(a, dtype=torch.float64)
    tb = torch.as_tensor(b, dtype=torch.float64)
    return float(ciou_tensor(ta, tb))


def assign_targets(
    raw: RawPredictions,
    gt_boxes,
    gt_classes,
    cfg: AssignerConfig = AssignerConfig(),
) -> Assignment:
    """Map ground truths to head cells.

    gt_boxes is a sequence of (M_i, 4) pixel xyxy tensors, gt_classes the
    matching (M_i,) integer tensors, one pair per batch image. Predictions are
    used detached: assignment is a fixed input to the loss, not part of the
    gradient path.
    """
    n = raw.batch_size
    nc = raw.num_classes
    with torch.no_grad():
        boxes, probs = decode_boxes_tensor(raw, clip=False)
        centers, strides = raw.cell_centers()
        a = centers.shape[0]
        dtype = boxes.dtype

        fg_mask = torch.zeros(n, a, dtype=torch.bool)
        gt_index = torch.zeros(n, a, dtype=torch.long)
        target_boxes = torch.zeros(n, a, 4, dtype=dtype)
        target_dist = torch.zeros(n, a, 4, dtype=dtype)
        target_scores = torch.zeros(n, a, nc, dtype=dtype)

        max_dist = raw.reg_max - 1 - 0.01
        for i in range(n):
            gb = torch.as_tensor(gt_boxes[i], dtype=dtype).reshape(-1, 4)
            gc = torch.as_tensor(gt_classes[i], dtype=torch.long).reshape(-1)
            m = gb.shape[0]
            if m == 0:
                continue
            cx, cy = centers[:, 0], centers[:, 1]
            inside = (
                (cx[None, :] > gb[:, 0, None])
                & (cx[None, :] < gb[:, 2, None])
                & (cy[None, :] > gb[:, 1, None])
                & (cy[None, :] < gb[:, 3, None])
            )  # (M, A)
            iou = pairwise_iou(gb, boxes[i])  # (M, A)
            cls_prob = probs[i][:, gc].t()  # (M, A)
            align = cls_prob.clamp(min=0) ** cfg.alpha * iou.clamp(min=0) ** cfg.beta
            align = torch.where(inside, align, torch.full_like(align, -1.0))

            k = min(cfg.topk, a)
            top_vals, top_idx = align.topk(k, dim=1)
            candidate = torch.zeros_like(inside)
            rows = torch.arange(m).unsqueeze(1).expand(-1, k)
            valid = top_vals > 0
            candidate[rows[valid], top_idx[valid]] = True

            # a cell claimed by several ground truths goes to the higher-IoU one
            iou_masked = torch.where(candidate, iou, torch.full_like(iou, -1.0))
            best_gt = iou_masked.argmax(dim=0)  # (A,)
            claimed = candidate.any(dim=0)
            chosen = torch.zeros_like(candidate)
            chosen[best_gt[claimed], claimed.nonzero(as_tuple=True)[0]] = True

            fg_mask[i] = claimed
            gt_index[i] = torch.where(claimed, best_gt, torch.zeros_like(best_gt))
            tb = gb[gt_index[i]]
            target_boxes[i] = tb
            d = torch.stack(
                (cx - tb[:, 0], cy - tb[:, 1], tb[:, 2] - cx, tb[:, 3] - cy), dim=1
            ) / strides.unsqueeze(1)
            target_dist[i] = d.clamp(0.0, max_dist)

            # soft targets: alignment renormalized per ground truth so its best
            # cell scores that ground truth's best IoU
            align_pos = torch.where(chosen, align, torch.zeros_like(align))
            iou_pos = torch.where(chosen, iou, torch.zeros_like(iou))
            amax = align_pos.max(dim=1).values  # (M,)
            omax = iou_pos.max(dim=1).values
            scale = omax / (amax + 1e-9)
            soft = align_pos * scale.unsqueeze(1)  # (M, A)
            cell_idx = claimed.nonzero(as_tuple=True)[0]
            g_idx = best_gt[cell_idx]
            target_scores[i, cell_idx, gc[g_idx]] = soft[g_idx, cell_idx]

    return Assignment(fg_mask, gt_index, target_boxes, target_dist, target_scores)


def detection_loss(
    raw: RawPredictions,
    assignment: Assignment,
    weights: LossWeights = LossWeights(),
) -> LossBreakdown:
    """Composite loss given a fixed assignment.

    box: mean (1 - CIoU) over positives; cls: BCE against the soft targets
    over all cells, normalized by the total target mass; dfl: mean two-bin
    interpolated negative log-likelihood of the target side distances.
    """
    cls_logits = raw.flat_cls()
    dfl_logits = raw.flat_dfl()
    if not torch.isfinite(cls_logits).all() or not torch.isfinite(dfl_logits).all():
        raise NumericError("non-finite logits in detection loss")

    scores = assignment.target_scores.to(cls_logits.dtype)
    bce = F.binary_cross_entropy_with_logits(cls_logits, scores, reduction="sum")
    cls_loss = bce / scores.sum().clamp(min=1.0)

    fg = assignment.fg_mask
    zero = cls_logits.new_zeros(())
    if fg.any():
        pred_boxes, _ = decode_boxes_tensor(raw, clip=False)
        box_loss = (
            1.0
            - ciou_tensor(pred_boxes[fg], assignment.target_boxes[fg].to(cls_logits.dtype))
        ).mean()

        logp = F.log_softmax(dfl_logits[fg], dim=-1)  # (P, 4, reg_max)
        d = assignment.target_dist[fg].to(cls_logits.dtype)  # (P, 4)
        tl = d.floor().long()
        tr = tl + 1
        wl = tr.to(d.dtype) - d
        wr = d - tl.to(d.dtype)
        nll_l = -logp.gather(-1, tl.unsqueeze(-1)).squeeze(-1)
        nll_r = -logp.gather(-1, tr.clamp(max=raw.reg_max - 1).unsqueeze(-1)).squeeze(-1)
        dfl_loss = (wl * nll_l + wr * nll_r).mean()
    else:
        box_loss = zero
        dfl_loss = zero

    total = weights.box * box_loss + weights.cls * cls_loss + weights.dfl * dfl_loss
    return LossBreakdown(box_loss, cls_loss, dfl_loss, total)
