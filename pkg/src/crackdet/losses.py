"""Training losses mirroring the assignment costs.

Classification uses the quality-focal form — binary cross entropy against the
soft IoU label, damped by the squared gap — evaluated in logit space so no
probability clamping is needed. Regression penalizes 1 - GIoU over matched
anchors. Both are normalized by the positive count, floored at one so
background-only batches stay finite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import ShapeError
from .numerics import Tensor


@dataclass
class LossBreakdown:
    cls_loss: float
    reg_loss: float
    total: float
    num_pos: int


def quality_focal_terms(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise CE(sigmoid(l), y) * (y - sigmoid(l))^2, stable in logit space."""
    if logits.shape != targets.shape:
        raise ShapeError(f"loss targets {targets.shape} do not match logits {logits.shape}")
    y = nm.as_tensor(targets, like=logits)
    ce = nm.sub(nm.softplus(logits), nm.mul(y, logits))
    gap = nm.sub(y, nm.sigmoid(logits))
    return nm.mul(ce, nm.mul(gap, gap))


def soft_cls_loss_pooled(logits: Tensor, targets: np.ndarray, num_pos: int) -> Tensor:
    """Summed quality-focal loss over every anchor-class cell / max(1, num_pos)."""
    return nm.mul(nm.tsum(quality_focal_terms(logits, targets)), 1.0 / max(1, num_pos))


def soft_cls_loss(logits: Tensor, assignment, gt_labels) -> Tensor:
    """Classification loss of one image's (N, K) logits under an Assignment."""
    targets = assignment.targets(gt_labels, logits.shape[-1])
    return soft_cls_loss_pooled(logits, targets, assignment.num_pos)


def giou_tensor(x1: Tensor, y1: Tensor, x2: Tensor, y2: Tensor,
                gt_boxes: np.ndarray) -> Tensor:
    """Differentiable GIoU of predicted corner coordinates against fixed boxes."""
    g = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gx1, gy1, gx2, gy2 = (nm.as_tensor(g[:, i]) for i in range(4))
    iw = nm.maximum(nm.sub(nm.minimum(x2, gx2), nm.maximum(x1, gx1)), 0.0)
    ih = nm.maximum(nm.sub(nm.minimum(y2, gy2), nm.maximum(y1, gy1)), 0.0)
    inter = nm.mul(iw, ih)
    area_p = nm.mul(nm.sub(x2, x1), nm.sub(y2, y1))
    area_g = nm.mul(nm.sub(gx2, gx1), nm.sub(gy2, gy1))
    union = nm.sub(nm.add(area_p, area_g), inter)
    ex1, ey1 = nm.minimum(x1, gx1), nm.minimum(y1, gy1)
    ex2, ey2 = nm.maximum(x2, gx2), nm.maximum(y2, gy2)
    enclosing = nm.mul(nm.sub(ex2, ex1), nm.sub(ey2, ey1))
    return nm.sub(nm.div(inter, union), nm.div(nm.sub(enclosing, union), enclosing))


def giou_loss(pred_corners, gt_boxes: np.ndarray) -> Tensor:
    """Mean (1 - GIoU) over matched anchors; zero Tensor when none matched.

    ``pred_corners`` is the (x1, y1, x2, y2) quadruple of (P,) coordinate
    tensors for the matched anchors.
    """
    g = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if g.shape[0] == 0:
        return Tensor(np.float64(0.0))
    x1, y1, x2, y2 = pred_corners
    return nm.tmean(nm.sub(1.0, giou_tensor(x1, y1, x2, y2, g)))


def total_loss(cls_loss: Tensor, reg_loss: Tensor, num_pos: int,
               w_cls: float = 1.0, w_reg: float = 2.0):
    """Weighted sum; returns (scalar Tensor for backward, float LossBreakdown)."""
    total = nm.add(nm.mul(cls_loss, w_cls), nm.mul(reg_loss, w_reg))
    breakdown = LossBreakdown(cls_loss=float(cls_loss.data), reg_loss=float(reg_loss.data),
                              total=float(total.data), num_pos=int(num_pos))
    return total, breakdown
