"""Desk-scale one-stage detectors for teacher/student experiments.

A small convolutional backbone (depth and width configurable, so a deep
teacher and a shallow student can share the rest of the design) feeds a
3-level feature pyramid at strides 8/16/32 and a pair of shared head towers.
Two head variants are supported with identical output shapes per location:

    * ``anchor_based``: one square anchor per location (edge = 4 x stride),
      box regression as (dx, dy, dw, dh) deltas, smooth-L1 task regression;
    * ``anchor_free``: per-point (left, top, right, bottom) distances decoded
      through ``exp(x) * stride``, -log IoU task regression.

Classification is per-class sigmoid with focal task loss in both variants.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

__all__ = [
    "DetectorConfig",
    "DetectorOutput",
    "TaskLoss",
    "OneStageDetector",
    "build_detector",
    "postprocess_detections",
    "save_checkpoint",
    "load_checkpoint",
    "focal_loss",
    "encode_deltas",
    "decode_deltas",
]

ANCHOR_BASED = "anchor_based"
ANCHOR_FREE = "anchor_free"

CHECKPOINT_FORMAT = "distilldet-checkpoint"
CHECKPOINT_VERSION = 1

# focal loss parameters for the classification task loss
FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
# smooth-L1 beta for anchor-based task/box regression
REG_SMOOTH_L1_BETA = 0.1
# anchor assignment thresholds (positive / negative IoU)
ANCHOR_POS_IOU = 0.5
ANCHOR_NEG_IOU = 0.4
# classification prior probability for bias init
PRIOR_PROB = 0.01
# clamp on predicted log-sizes before exp to keep decoding finite
LOG_SIZE_CLAMP = 6.0


@dataclass
class DetectorConfig:
    variant: str = ANCHOR_BASED
    num_classes: int = 4
    backbone_width: int = 32
    backbone_depth: int = 2  # convs per backbone stage; also picks the stem depth
    fpn_channels: int = 64
    head_depth: int = 2
    strides: tuple[int, ...] = (8, 16, 32)
    anchor_scale: float = 4.0

    def __post_init__(self):
        if self.variant not in (ANCHOR_BASED, ANCHOR_FREE):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.backbone_depth < 1:
            raise ValueError("backbone_depth must be >= 1")
        self.strides = tuple(int(s) for s in self.strides)
        if list(self.strides) != sorted(set(self.strides)):
            raise ValueError("strides must be strictly increasing")

    def head_signature(self) -> tuple:
        """Everything that determines head output shapes; a teacher/student
        pair must agree on this."""
        return (self.variant, self.num_classes, self.fpn_channels,
                self.head_depth, self.strides, self.anchor_scale)


@dataclass
class DetectorOutput:
    """Flattened outputs plus the geometry needed to interpret them.

    Location order is level-major, then row-major within each level. The
    ``scores`` / ``boxes`` pair is the detached, decoded view used for GI
    selection and evaluation; ``cls_logits`` / ``reg_raw`` / ``reg_distill``
    stay in the autograd graph.
    """

    cls_logits: torch.Tensor  # [B, R, C]
    reg_raw: torch.Tensor  # [B, R, 4] raw head outputs
    reg_distill: torch.Tensor  # [B, R, 4] native distill parameterization
    scores: torch.Tensor  # [B, R, C] sigmoid probabilities, detached
    boxes: torch.Tensor  # [B, R, 4] decoded + clipped, detached
    features: list[torch.Tensor] = field(default_factory=list)  # per-level FPN maps
    strides: tuple[int, ...] = ()
    anchors: np.ndarray | None = None  # [R, 4] for anchor_based
    points: np.ndarray | None = None  # [R, 2] location centers
    level_of: np.ndarray | None = None  # [R] level index per location

    @property
    def num_locations(self) -> int:
        return self.cls_logits.shape[1]


@dataclass
class TaskLoss:
    classification: torch.Tensor
    regression: torch.Tensor
    num_positives: int

    @property
    def total(self) -> torch.Tensor:
        return self.classification + self.regression


def _conv_block(in_ch: int, out_ch: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1),
        nn.GroupNorm(8, out_ch),
        nn.ReLU(inplace=True),
    )


class _Backbone(nn.Module):
    """Stem (stride 4) plus three stages emitting strides 8/16/32."""

    def __init__(self, width: int, depth: int):
        super().__init__()
        w = width
        if depth >= 2:
            self.stem = nn.Sequential(_conv_block(3, w, 2), _conv_block(w, w, 2))
        else:
            self.stem = nn.Sequential(_conv_block(3, w, 2), nn.MaxPool2d(2))

        def stage(in_ch, out_ch):
            layers = [_conv_block(in_ch, out_ch, 2)]
            layers += [_conv_block(out_ch, out_ch) for _ in range(depth - 1)]
            return nn.Sequential(*layers)

        self.stage3 = stage(w, 2 * w)
        self.stage4 = stage(2 * w, 4 * w)
        self.stage5 = stage(4 * w, 4 * w)
        self.out_channels = (2 * w, 4 * w, 4 * w)

    def forward(self, x):
        x = self.stem(x)
        c3 = self.stage3(x)
        c4 = self.stage4(c3)
        c5 = self.stage5(c4)
        return c3, c4, c5


class _FPN(nn.Module):
    def __init__(self, in_channels: tuple[int, int, int], out_channels: int):
        super().__init__()
        self.lateral = nn.ModuleList(nn.Conv2d(c, out_channels, 1) for c in in_channels)
        self.output = nn.ModuleList(
            nn.Conv2d(out_channels, out_channels, 3, padding=1) for _ in in_channels
        )

    def forward(self, c3, c4, c5):
        p5 = self.lateral[2](c5)
        p4 = self.lateral[1](c4) + F.interpolate(p5, scale_factor=2, mode="nearest")
        p3 = self.lateral[0](c3) + F.interpolate(p4, scale_factor=2, mode="nearest")
        return [self.output[i](p) for i, p in enumerate((p3, p4, p5))]


class _Head(nn.Module):
    """Classification + regression towers shared across pyramid levels."""

    def __init__(self, channels: int, depth: int, num_classes: int):
        super().__init__()
        self.cls_tower = nn.Sequential(*[_conv_block(channels, channels) for _ in range(depth)])
        self.reg_tower = nn.Sequential(*[_conv_block(channels, channels) for _ in range(depth)])
        self.cls_out = nn.Conv2d(channels, num_classes, 3, padding=1)
        self.reg_out = nn.Conv2d(channels, 4, 3, padding=1)
        for conv in (self.cls_out, self.reg_out):
            nn.init.normal_(conv.weight, std=0.01)
            nn.init.zeros_(conv.bias)
        # start with every class probability near the prior
        nn.init.constant_(self.cls_out.bias, -math.log((1.0 - PRIOR_PROB) / PRIOR_PROB))

    def forward(self, feats):
        return (
            [self.cls_out(self.cls_tower(f)) for f in feats],
            [self.reg_out(self.reg_tower(f)) for f in feats],
        )


def _grid_points(height: int, width: int, stride: int) -> np.ndarray:
    ys = (np.arange(height, dtype=np.float64) + 0.5) * stride
    xs = (np.arange(width, dtype=np.float64) + 0.5) * stride
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([xx.reshape(-1), yy.reshape(-1)], axis=1)


def encode_deltas(boxes: torch.Tensor, anchors: torch.Tensor) -> torch.Tensor:
    """Box -> (dx, dy, dw, dh) relative to anchors; all ``[N, 4]`` tensors."""
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + 0.5 * aw
    ay = anchors[:, 1] + 0.5 * ah
    gw = boxes[:, 2] - boxes[:, 0]
    gh = boxes[:, 3] - boxes[:, 1]
    gx = boxes[:, 0] + 0.5 * gw
    gy = boxes[:, 1] + 0.5 * gh
    return torch.stack(
        [(gx - ax) / aw, (gy - ay) / ah, torch.log(gw / aw), torch.log(gh / ah)], dim=1
    )


def decode_deltas(deltas: torch.Tensor, anchors: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`encode_deltas`, with log-sizes clamped for safety."""
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + 0.5 * aw
    ay = anchors[:, 1] + 0.5 * ah
    cx = ax + deltas[..., 0] * aw
    cy = ay + deltas[..., 1] * ah
    w = aw * torch.exp(deltas[..., 2].clamp(max=LOG_SIZE_CLAMP))
    h = ah * torch.exp(deltas[..., 3].clamp(max=LOG_SIZE_CLAMP))
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=-1)


class OneStageDetector(nn.Module):
    def __init__(self, config: DetectorConfig):
        super().__init__()
        self.config = config
        self.backbone = _Backbone(config.backbone_width, config.backbone_depth)
        self.fpn = _FPN(self.backbone.out_channels, config.fpn_channels)
        self.head = _Head(config.fpn_channels, config.head_depth, config.num_classes)

    # geometry ---------------------------------------------------------

    def _level_shapes(self, height: int, width: int) -> list[tuple[int, int]]:
        return [(height // s, width // s) for s in self.config.strides]

    def location_geometry(self, height: int, width: int):
        """Per-location points, anchors (or None), and level indices for an
        input of the given size, in flattened output order."""
        points, levels = [], []
        for li, s in enumerate(self.config.strides):
            h, w = height // s, width // s
            pts = _grid_points(h, w, s)
            points.append(pts)
            levels.append(np.full(len(pts), li, dtype=np.int64))
        points = np.concatenate(points, axis=0)
        level_of = np.concatenate(levels, axis=0)
        anchors = None
        if self.config.variant == ANCHOR_BASED:
            half = 0.5 * self.config.anchor_scale * np.array(
                [self.config.strides[li] for li in level_of], dtype=np.float64
            )
            anchors = np.stack(
                [points[:, 0] - half, points[:, 1] - half,
                 points[:, 0] + half, points[:, 1] + half],
                axis=1,
            )
        return points, anchors, level_of

    # forward ----------------------------------------------------------

    def forward(self, images: torch.Tensor) -> DetectorOutput:
        if images.dim() != 4 or images.shape[1] != 3:
            raise ValueError(f"images must be [B, 3, H, W], got {tuple(images.shape)}")
        height, width = images.shape[2], images.shape[3]
        max_stride = self.config.strides[-1]
        if height % max_stride or width % max_stride:
            raise ValueError(
                f"image dims ({height}x{width}) must be divisible by the max stride {max_stride}"
            )
        feats = self.fpn(*self.backbone(images))
        cls_maps, reg_maps = self.head(feats)

        b = images.shape[0]
        c = self.config.num_classes
        cls_flat = torch.cat(
            [m.permute(0, 2, 3, 1).reshape(b, -1, c) for m in cls_maps], dim=1
        )
        reg_flat = torch.cat(
            [m.permute(0, 2, 3, 1).reshape(b, -1, 4) for m in reg_maps], dim=1
        )

        points, anchors, level_of = self.location_geometry(height, width)
        dtype, device = reg_flat.dtype, reg_flat.device
        if self.config.variant == ANCHOR_BASED:
            reg_distill = reg_flat
            anchors_t = torch.as_tensor(anchors, dtype=dtype, device=device)
            with torch.no_grad():
                boxes = decode_deltas(reg_flat, anchors_t)
        else:
            strides_per_loc = torch.as_tensor(
                np.array(self.config.strides, dtype=np.float64)[level_of],
                dtype=dtype, device=device,
            )
            reg_distill = torch.exp(reg_flat.clamp(max=LOG_SIZE_CLAMP)) * strides_per_loc[None, :, None]
            points_t = torch.as_tensor(points, dtype=dtype, device=device)
            with torch.no_grad():
                boxes = torch.stack(
                    [
                        points_t[None, :, 0] - reg_distill[..., 0],
                        points_t[None, :, 1] - reg_distill[..., 1],
                        points_t[None, :, 0] + reg_distill[..., 2],
                        points_t[None, :, 1] + reg_distill[..., 3],
                    ],
                    dim=-1,
                )
        boxes = boxes.detach().clone()
        boxes[..., 0::2] = boxes[..., 0::2].clamp(0.0, float(width))
        boxes[..., 1::2] = boxes[..., 1::2].clamp(0.0, float(height))

        with torch.no_grad():
            scores = torch.sigmoid(cls_flat)

        return DetectorOutput(
            cls_logits=cls_flat,
            reg_raw=reg_flat,
            reg_distill=reg_distill,
            scores=scores,
            boxes=boxes,
            features=feats,
            strides=self.config.strides,
            anchors=anchors,
            points=points,
            level_of=level_of,
        )

    # task loss --------------------------------------------------------

    def task_loss(self, output: DetectorOutput, gt_boxes_list, gt_classes_list) -> TaskLoss:
        """Focal classification + box regression over a batch.

        ``gt_boxes_list`` / ``gt_classes_list`` hold one array per image
        (possibly empty). Both terms are normalized by the positive count
        (at least 1), summed over the batch.
        """
        if self.config.variant == ANCHOR_BASED:
            return _anchor_based_task_loss(self.config, output, gt_boxes_list, gt_classes_list)
        return _anchor_free_task_loss(self.config, output, gt_boxes_list, gt_classes_list)


def focal_loss(
    logits: torch.Tensor,
    targets: torch.Tensor,
    alpha: float = FOCAL_ALPHA,
    gamma: float = FOCAL_GAMMA,
) -> torch.Tensor:
    """Element-wise binary focal loss on logits with 0/1 targets."""
    p = torch.sigmoid(logits)
    ce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p_t = targets * p + (1.0 - targets) * (1.0 - p)
    alpha_t = targets * alpha + (1.0 - targets) * (1.0 - alpha)
    return alpha_t * (1.0 - p_t) ** gamma * ce


def _anchor_based_task_loss(config, output, gt_boxes_list, gt_classes_list) -> TaskLoss:
    from .geometry import iou_matrix  # local import to avoid cycles

    anchors_np = output.anchors
    anchors = torch.as_tensor(anchors_np, dtype=output.reg_raw.dtype,
                              device=output.reg_raw.device)
    batch = output.cls_logits.shape[0]
    cls_total = output.cls_logits.new_zeros(())
    reg_total = output.reg_raw.new_zeros(())
    n_pos_total = 0
    for b in range(batch):
        gt_boxes = np.asarray(gt_boxes_list[b], dtype=np.float64).reshape(-1, 4)
        gt_classes = np.asarray(gt_classes_list[b], dtype=np.int64).reshape(-1)
        logits = output.cls_logits[b]
        targets = torch.zeros_like(logits)
        if len(gt_boxes) == 0:
            cls_total = cls_total + focal_loss(logits, targets).sum()
            continue
        ious = iou_matrix(anchors_np, gt_boxes)  # [R, G]
        best_gt = ious.argmax(axis=1)
        best_iou = ious[np.arange(len(anchors_np)), best_gt]
        pos = best_iou >= ANCHOR_POS_IOU
        ignore = (~pos) & (best_iou >= ANCHOR_NEG_IOU)
        # every GT gets its single best anchor even below the IoU cut
        force = ious.argmax(axis=0)
        pos[force] = True
        ignore[force] = False
        best_gt[force] = np.arange(len(gt_boxes))

        pos_idx = np.flatnonzero(pos)
        targets[pos_idx, gt_classes[best_gt[pos_idx]]] = 1.0
        fl = focal_loss(logits, targets)
        keep = torch.as_tensor(~ignore, device=logits.device)
        n_pos = max(1, len(pos_idx))
        cls_total = cls_total + fl[keep].sum() / n_pos

        if len(pos_idx):
            matched = torch.as_tensor(gt_boxes[best_gt[pos_idx]],
                                      dtype=anchors.dtype, device=anchors.device)
            target_deltas = encode_deltas(matched, anchors[pos_idx])
            reg = F.smooth_l1_loss(
                output.reg_raw[b, pos_idx], target_deltas,
                beta=REG_SMOOTH_L1_BETA, reduction="sum",
            )
            reg_total = reg_total + reg / n_pos
            n_pos_total += len(pos_idx)
    return TaskLoss(
        classification=cls_total / batch,
        regression=reg_total / batch,
        num_positives=n_pos_total,
    )


def _anchor_free_task_loss(config, output, gt_boxes_list, gt_classes_list) -> TaskLoss:
    points = output.points
    level_of = output.level_of
    strides = np.asarray(config.strides, dtype=np.float64)
    # per-level regression range on the max side distance: (0,32], (32,64], (64,inf)
    bounds = [0.0] + [4.0 * s for s in strides[:-1]] + [float("inf")]
    lo = np.array([bounds[li] for li in level_of])
    hi = np.array([bounds[li + 1] for li in level_of])

    batch = output.cls_logits.shape[0]
    cls_total = output.cls_logits.new_zeros(())
    reg_total = output.reg_raw.new_zeros(())
    n_pos_total = 0
    for b in range(batch):
        gt_boxes = np.asarray(gt_boxes_list[b], dtype=np.float64).reshape(-1, 4)
        gt_classes = np.asarray(gt_classes_list[b], dtype=np.int64).reshape(-1)
        logits = output.cls_logits[b]
        targets = torch.zeros_like(logits)
        if len(gt_boxes) == 0:
            cls_total = cls_total + focal_loss(logits, targets).sum()
            continue
        px = points[:, 0:1]
        py = points[:, 1:2]
        left = px - gt_boxes[None, :, 0].reshape(1, -1)
        top = py - gt_boxes[None, :, 1].reshape(1, -1)
        right = gt_boxes[None, :, 2].reshape(1, -1) - px
        bottom = gt_boxes[None, :, 3].reshape(1, -1) - py
        dists = np.stack([left, top, right, bottom], axis=2)  # [R, G, 4]
        inside = dists.min(axis=2) > 0
        max_dist = dists.max(axis=2)
        in_range = (max_dist > lo[:, None]) & (max_dist <= hi[:, None])
        candidate = inside & in_range
        areas = (gt_boxes[:, 2] - gt_boxes[:, 0]) * (gt_boxes[:, 3] - gt_boxes[:, 1])
        area_mat = np.where(candidate, areas[None, :], np.inf)
        best_gt = area_mat.argmin(axis=1)
        pos = candidate[np.arange(len(points)), best_gt]
        pos_idx = np.flatnonzero(pos)

        targets[pos_idx, gt_classes[best_gt[pos_idx]]] = 1.0
        n_pos = max(1, len(pos_idx))
        cls_total = cls_total + focal_loss(logits, targets).sum() / n_pos

        if len(pos_idx):
            pred_dist = output.reg_distill[b, pos_idx]
            pts = torch.as_tensor(points[pos_idx], dtype=pred_dist.dtype,
                                  device=pred_dist.device)
            pred_boxes = torch.stack(
                [pts[:, 0] - pred_dist[:, 0], pts[:, 1] - pred_dist[:, 1],
                 pts[:, 0] + pred_dist[:, 2], pts[:, 1] + pred_dist[:, 3]],
                dim=1,
            )
            tgt_boxes = torch.as_tensor(gt_boxes[best_gt[pos_idx]],
                                        dtype=pred_dist.dtype, device=pred_dist.device)
            from .response_distill import iou_loss_pairwise

            reg_total = reg_total + iou_loss_pairwise(pred_boxes, tgt_boxes).sum() / n_pos
            n_pos_total += len(pos_idx)
    return TaskLoss(
        classification=cls_total / batch,
        regression=reg_total / batch,
        num_positives=n_pos_total,
    )


def postprocess_detections(
    output: DetectorOutput,
    score_threshold: float = 0.05,
    nms_iou: float = 0.5,
    max_detections: int = 100,
) -> list[list[tuple[int, float, np.ndarray]]]:
    """Turn one batch of decoded outputs into per-image detection lists.

    Per class: threshold scores, class-wise NMS, then keep the best
    ``max_detections`` per image overall.
    """
    from .geometry import nms

    scores = output.scores.cpu().numpy()
    boxes = output.boxes.cpu().numpy()
    batch_dets: list[list[tuple[int, float, np.ndarray]]] = []
    for b in range(scores.shape[0]):
        dets: list[tuple[int, float, np.ndarray]] = []
        for cls in range(scores.shape[2]):
            cls_scores = scores[b, :, cls]
            keep = cls_scores >= score_threshold
            if not keep.any():
                continue
            idx = np.flatnonzero(keep)
            kept = nms(cls_scores[idx], boxes[b, idx], nms_iou)
            dets.extend(
                (cls, float(cls_scores[idx[i]]), boxes[b, idx[i]].copy()) for i in kept
            )
        dets.sort(key=lambda d: -d[1])
        batch_dets.append(dets[:max_detections])
    return batch_dets


def build_detector(config: DetectorConfig) -> OneStageDetector:
    return OneStageDetector(config)


def save_checkpoint(path, model: OneStageDetector) -> None:
    """Self-describing parameter archive: config header + state dict."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "state_dict": model.state_dict(),
    }
    torch.save(payload, path)


def load_checkpoint(path) -> OneStageDetector:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a detector checkpoint")
    cfg_dict = dict(payload["config"])
    cfg_dict["strides"] = tuple(cfg_dict["strides"])
    model = OneStageDetector(DetectorConfig(**cfg_dict))
    model.load_state_dict(payload["state_dict"])
    return model
