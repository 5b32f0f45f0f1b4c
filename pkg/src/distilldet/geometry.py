"""Axis-aligned box arithmetic: areas, IoU, IoP, and non-maximum suppression.

Boxes are ``(x1, y1, x2, y2)`` half-open real intervals in image pixel
coordinates, so ``area = max(0, x2 - x1) * max(0, y2 - y1)``. Everything here
is pure and operates on plain floats or numpy arrays.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "box_area",
    "iou",
    "iop",
    "iou_matrix",
    "iop_matrix",
    "nms",
    "clip_boxes",
]


def box_area(boxes: np.ndarray) -> np.ndarray:
    """Area of ``(..., 4)`` boxes; degenerate boxes get area 0."""
    boxes = np.asarray(boxes, dtype=np.float64)
    w = np.maximum(0.0, boxes[..., 2] - boxes[..., 0])
    h = np.maximum(0.0, boxes[..., 3] - boxes[..., 1])
    return w * h


def _intersection(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise intersection areas between ``(N, 4)`` and ``(M, 4)`` boxes."""
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    iw = np.maximum(0.0, ix2 - ix1)
    ih = np.maximum(0.0, iy2 - iy1)
    return iw * ih


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(N, 4)`` and ``(M, 4)`` boxes.

    Zero-area unions give IoU 0 instead of dividing by zero.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    inter = _intersection(a, b)
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def iop_matrix(proposals: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """Pairwise intersection-over-proposal between ``(N, 4)`` proposals and
    ``(M, 4)`` reference boxes.

    The denominator is the proposal area; zero-area proposals give 0.
    """
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    inter = _intersection(proposals, gts)
    area = box_area(proposals)[:, None]
    out = np.zeros_like(inter)
    np.divide(inter, np.broadcast_to(area, inter.shape), out=out, where=area > 0)
    return out


def iou(a, b) -> float:
    """IoU between two boxes; 0 when the union has zero area."""
    return float(iou_matrix(np.asarray(a), np.asarray(b))[0, 0])


def iop(proposal, gt) -> float:
    """Intersection area over proposal area; 0 for a zero-area proposal."""
    return float(iop_matrix(np.asarray(proposal), np.asarray(gt))[0, 0])


def nms(scores: np.ndarray, boxes: np.ndarray, iou_threshold: float) -> list[int]:
    """Greedy non-maximum suppression.

    Iteratively keeps the highest-scoring box and suppresses every remaining
    box whose IoU with it is strictly greater than ``iou_threshold``. Score
    ties are broken by lower index. Zero-area boxes never suppress anything
    (their IoU is 0 by convention), so they survive.

    Returns kept indices in descending-score order.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if scores.shape[0] != boxes.shape[0]:
        raise ValueError(
            f"scores ({scores.shape[0]}) and boxes ({boxes.shape[0]}) differ in length"
        )
    if scores.size == 0:
        return []
    # stable sort on -scores: descending score, ties by lower original index
    order = np.argsort(-scores, kind="stable")
    ious = iou_matrix(boxes, boxes)
    kept: list[int] = []
    suppressed = np.zeros(scores.size, dtype=bool)
    for idx in order:
        if suppressed[idx]:
            continue
        kept.append(int(idx))
        suppressed |= ious[idx] > iou_threshold
        suppressed[idx] = True
    return kept


def clip_boxes(boxes: np.ndarray, width: float, height: float) -> np.ndarray:
    """Clip ``(..., 4)`` boxes to ``[0, width] x [0, height]``."""
    boxes = np.asarray(boxes, dtype=np.float64).copy()
    boxes[..., 0] = np.clip(boxes[..., 0], 0.0, width)
    boxes[..., 2] = np.clip(boxes[..., 2], 0.0, width)
    boxes[..., 1] = np.clip(boxes[..., 1], 0.0, height)
    boxes[..., 3] = np.clip(boxes[..., 3], 0.0, height)
    return boxes
