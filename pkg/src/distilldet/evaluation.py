"""COCO-style mean average precision for desk-scale experiments.

Detections are matched to ground truth greedily by descending score at each
IoU threshold, precision is interpolated at 101 recall points, and AP is
averaged over the 10 thresholds 0.50:0.05:0.95 and over classes that have at
least one ground-truth box.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import iou_matrix

__all__ = ["EvalResult", "average_precision", "DEFAULT_IOU_THRESHOLDS"]

DEFAULT_IOU_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.96, 0.05), 2))
MAX_DETECTIONS_PER_IMAGE = 100
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass
class EvalResult:
    mean_ap: float
    per_class_ap: dict[int, float]
    per_threshold_ap: dict[float, float] = field(default_factory=dict)

    @property
    def ap50(self) -> float:
        return self.per_threshold_ap.get(0.5, float("nan"))

    @property
    def ap75(self) -> float:
        return self.per_threshold_ap.get(0.75, float("nan"))


def _match_image(dets: list[tuple[float, np.ndarray]], gts: np.ndarray,
                 iou_thr: float) -> list[bool]:
    """Greedy matching for one image and class; dets sorted by score desc.

    Each detection claims the unmatched GT with the highest IoU >= threshold.
    Returns one bool (true positive?) per detection.
    """
    taken = np.zeros(len(gts), dtype=bool)
    out = []
    for _score, box in dets:
        if len(gts) == 0:
            out.append(False)
            continue
        ious = iou_matrix(box, gts)[0]
        ious[taken] = -1.0
        j = int(np.argmax(ious))
        if ious[j] >= iou_thr:
            taken[j] = True
            out.append(True)
        else:
            out.append(False)
    return out


def _interpolated_ap(tp_flags: np.ndarray, scores: np.ndarray, num_gt: int) -> float:
    """101-point interpolated AP from per-detection TP flags sorted by score."""
    if num_gt == 0:
        return float("nan")
    if len(tp_flags) == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    tp = tp_flags[order].astype(np.float64)
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(1.0 - tp)
    recall = cum_tp / num_gt
    precision = cum_tp / np.maximum(cum_tp + cum_fp, 1e-12)
    # precision envelope: best precision at recall >= r
    for i in range(len(precision) - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    ap = 0.0
    idx = 0
    for r in RECALL_POINTS:
        while idx < len(recall) and recall[idx] < r:
            idx += 1
        ap += precision[idx] if idx < len(recall) else 0.0
    return ap / len(RECALL_POINTS)


def average_precision(
    results: dict[int, list[tuple[int, float, np.ndarray]]],
    annotations: dict[int, tuple[np.ndarray, np.ndarray]],
    iou_thresholds=DEFAULT_IOU_THRESHOLDS,
) -> EvalResult:
    """Evaluate detections against ground truth.

    ``results`` maps image id to (class_id, score, box) detections;
    ``annotations`` maps image id to (class_ids, boxes). Image id sets must
    match. Classes without any ground truth are excluded from the mean.
    """
    if set(results) != set(annotations):
        raise ValueError("result and annotation image id sets differ")

    classes = sorted(
        {int(c) for cls_ids, _ in annotations.values() for c in cls_ids}
        | {int(c) for dets in results.values() for c, _, _ in dets}
    )
    # cap detections per image by score
    capped: dict[int, list[tuple[int, float, np.ndarray]]] = {}
    for image_id, dets in results.items():
        dets = sorted(dets, key=lambda d: -d[1])[:MAX_DETECTIONS_PER_IMAGE]
        capped[image_id] = dets

    per_class_ap: dict[int, float] = {}
    per_threshold: dict[float, list[float]] = {float(t): [] for t in iou_thresholds}
    for cls in classes:
        num_gt = sum(
            int((cls_ids == cls).sum()) for cls_ids, _ in annotations.values()
        )
        if num_gt == 0:
            continue  # no GT for this class anywhere: excluded from the mean
        ap_per_thr = []
        for thr in iou_thresholds:
            flags: list[bool] = []
            scores: list[float] = []
            for image_id in sorted(capped):
                dets = [
                    (score, box) for c, score, box in capped[image_id] if c == cls
                ]
                dets.sort(key=lambda d: -d[0])
                cls_ids, boxes = annotations[image_id]
                gts = boxes[cls_ids == cls]
                flags.extend(_match_image(dets, gts, float(thr)))
                scores.extend(score for score, _ in dets)
            ap = _interpolated_ap(np.array(flags, dtype=bool),
                                  np.array(scores, dtype=np.float64), num_gt)
            ap_per_thr.append(ap)
            per_threshold[float(thr)].append(ap)
        per_class_ap[cls] = float(np.mean(ap_per_thr))

    mean_ap = float(np.mean(list(per_class_ap.values()))) if per_class_ap else 0.0
    per_threshold_ap = {
        t: (float(np.mean(v)) if v else 0.0) for t, v in per_threshold.items()
    }
    return EvalResult(
        mean_ap=mean_ap, per_class_ap=per_class_ap, per_threshold_ap=per_threshold_ap
    )
