"""Response distillation: match head outputs under a GI-derived binary mask.

The mask picks which of the R output locations participate: for an
anchor-based head a location is in when some GI box overlaps its anchor by at
least the match threshold, for an anchor-free head when its point falls
inside some GI box. The masked loss couples a soft-target classification term
(Bernoulli KL, so it bottoms out at exactly zero when student equals teacher)
with the head's native regression loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .geometry import iou_matrix

__all__ = [
    "assign_mask_anchor_based",
    "assign_mask_anchor_free",
    "iou_loss_pairwise",
    "ResponseLoss",
    "response_loss",
]


def assign_mask_anchor_based(
    gi_boxes: np.ndarray, anchors: np.ndarray, iou_threshold: float = 0.5
) -> np.ndarray:
    """Binary ``[R]`` mask: anchor i is in iff max-IoU over GI boxes >= threshold."""
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    gi_boxes = np.asarray(gi_boxes, dtype=np.float64).reshape(-1, 4)
    if len(gi_boxes) == 0:
        return np.zeros(len(anchors), dtype=np.float64)
    overlap = iou_matrix(anchors, gi_boxes).max(axis=1)
    return (overlap >= iou_threshold).astype(np.float64)


def assign_mask_anchor_free(gi_boxes: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Binary ``[R]`` mask: point i is in iff it lies inside some GI box."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    gi_boxes = np.asarray(gi_boxes, dtype=np.float64).reshape(-1, 4)
    if len(gi_boxes) == 0:
        return np.zeros(len(points), dtype=np.float64)
    px = points[:, 0:1]
    py = points[:, 1:2]
    inside = (
        (px >= gi_boxes[None, :, 0].reshape(1, -1))
        & (px <= gi_boxes[None, :, 2].reshape(1, -1))
        & (py >= gi_boxes[None, :, 1].reshape(1, -1))
        & (py <= gi_boxes[None, :, 3].reshape(1, -1))
    )
    return inside.any(axis=1).astype(np.float64)


def _bernoulli_kl(teacher_logit: torch.Tensor, student_logit: torch.Tensor) -> torch.Tensor:
    """Per-entry KL(teacher || student) for independent sigmoid classes.

    Equals binary cross-entropy with the teacher probability as soft target
    minus the teacher's self-entropy. Written via softplus differences so it
    is finite for any logits and exactly 0 when the logits are bit-equal.
    """
    p = torch.sigmoid(teacher_logit)
    return p * (F.softplus(-student_logit) - F.softplus(-teacher_logit)) + (1.0 - p) * (
        F.softplus(student_logit) - F.softplus(teacher_logit)
    )


def _boxes_from_distances(distances: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    """Decode (left, top, right, bottom) distances at points into x1y1x2y2."""
    x1 = points[:, 0] - distances[:, 0]
    y1 = points[:, 1] - distances[:, 1]
    x2 = points[:, 0] + distances[:, 2]
    y2 = points[:, 1] + distances[:, 3]
    return torch.stack([x1, y1, x2, y2], dim=1)


def iou_loss_pairwise(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """-log IoU between row-matched boxes; both sets share a common point, so
    the intersection is always nonempty."""
    ix1 = torch.maximum(pred[:, 0], target[:, 0])
    iy1 = torch.maximum(pred[:, 1], target[:, 1])
    ix2 = torch.minimum(pred[:, 2], target[:, 2])
    iy2 = torch.minimum(pred[:, 3], target[:, 3])
    inter = (ix2 - ix1).clamp(min=0) * (iy2 - iy1).clamp(min=0)
    area_p = (pred[:, 2] - pred[:, 0]).clamp(min=0) * (pred[:, 3] - pred[:, 1]).clamp(min=0)
    area_t = (target[:, 2] - target[:, 0]).clamp(min=0) * (target[:, 3] - target[:, 1]).clamp(min=0)
    union = area_p + area_t - inter
    iou = inter / union.clamp(min=1e-12)
    return -torch.log(iou.clamp(min=1e-12))


@dataclass
class ResponseLoss:
    """Alpha/beta-weighted components; ``total = classification + regression``."""

    classification: torch.Tensor
    regression: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        return self.classification + self.regression


def response_loss(
    mask,
    teacher_cls_logits: torch.Tensor,
    student_cls_logits: torch.Tensor,
    teacher_reg: torch.Tensor,
    student_reg: torch.Tensor,
    alpha: float = 0.1,
    beta: float = 1.0,
    reg_loss: str = "smooth_l1",
    smooth_l1_beta: float = 0.1,
    points: torch.Tensor | None = None,
) -> ResponseLoss:
    """Masked, count-normalized response loss over ``[R, C]`` classification
    logits and ``[R, 4]`` regression outputs.

    ``reg_loss`` selects the head's native regression distillation:
    ``"smooth_l1"`` compares encoded deltas directly; ``"iou"`` decodes
    (l, t, r, b) distances at ``points`` and applies -log IoU. The teacher
    tensors are detached. An all-zero mask yields an exact zero with no
    gradient into the student.
    """
    mask_t = torch.as_tensor(mask, dtype=student_cls_logits.dtype,
                             device=student_cls_logits.device).reshape(-1)
    if mask_t.shape[0] != student_cls_logits.shape[0]:
        raise ValueError(
            f"mask length {mask_t.shape[0]} != prediction count {student_cls_logits.shape[0]}"
        )
    n_m = mask_t.sum()
    zero = torch.zeros((), dtype=student_cls_logits.dtype, device=student_cls_logits.device)
    if float(n_m) == 0.0:
        return ResponseLoss(classification=zero, regression=zero.clone())

    sel = mask_t > 0
    t_cls = teacher_cls_logits.detach()[sel]
    s_cls = student_cls_logits[sel]
    t_reg = teacher_reg.detach()[sel]
    s_reg = student_reg[sel]

    cls_per_loc = _bernoulli_kl(t_cls, s_cls).sum(dim=1)

    if reg_loss == "smooth_l1":
        reg_per_loc = F.smooth_l1_loss(
            s_reg, t_reg, beta=smooth_l1_beta, reduction="none"
        ).sum(dim=1)
    elif reg_loss == "iou":
        if points is None:
            raise ValueError("iou regression loss needs the per-location points")
        pts = torch.as_tensor(points, dtype=student_reg.dtype,
                              device=student_reg.device).reshape(-1, 2)[sel]
        reg_per_loc = iou_loss_pairwise(
            _boxes_from_distances(s_reg, pts), _boxes_from_distances(t_reg, pts)
        )
    else:
        raise ValueError(f"unknown reg_loss {reg_loss!r}")

    return ResponseLoss(
        classification=alpha * cls_per_loc.sum() / n_m,
        regression=beta * reg_per_loc.sum() / n_m,
    )
