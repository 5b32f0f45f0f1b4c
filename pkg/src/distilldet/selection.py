"""General-instance selection: score teacher/student disagreement, pick the
more confident side's box, deduplicate with NMS, and keep the top K.

A "general instance" (GI) is a prediction location chosen for distillation
because the two models disagree there, independent of ground-truth labels.
Selection is a discrete decision: run it on detached, post-activation scores.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import iop_matrix, iou_matrix, nms

__all__ = [
    "GIType",
    "GeneralInstance",
    "gi_scores",
    "gi_boxes",
    "select_gis",
    "classify_gi",
    "write_gi_records",
]

TEACHER = "teacher"
STUDENT = "student"


class GIType(enum.Enum):
    """Post-hoc GI label from overlap with ground truth."""

    POS = "Pos"
    SEMI_POS = "SemiPos"
    NEG = "Neg"
    IGNORE = "Ignore"


@dataclass
class GeneralInstance:
    score: float
    box: np.ndarray  # (4,) x1, y1, x2, y2
    source: str  # "teacher" or "student"
    gi_type: GIType | None = field(default=None)
    index: int = -1  # row in the prediction batch this GI came from


def _check_matched(teacher_scores: np.ndarray, student_scores: np.ndarray) -> None:
    if teacher_scores.shape != student_scores.shape:
        raise ValueError(
            "teacher/student score shapes differ: "
            f"{teacher_scores.shape} vs {student_scores.shape}"
        )
    if teacher_scores.ndim != 2:
        raise ValueError(f"scores must be [R, C], got shape {teacher_scores.shape}")


def gi_scores(teacher_scores: np.ndarray, student_scores: np.ndarray) -> np.ndarray:
    """Per-location GI score: the largest per-class absolute gap between the
    two models' classification scores.

    Both inputs are ``[R, C]`` post-activation probabilities with one-to-one
    location correspondence; the result is a ``[R]`` vector in ``[0, 1]``.
    """
    teacher_scores = np.asarray(teacher_scores, dtype=np.float64)
    student_scores = np.asarray(student_scores, dtype=np.float64)
    _check_matched(teacher_scores, student_scores)
    if teacher_scores.shape[1] == 0:
        return np.zeros(teacher_scores.shape[0])
    return np.abs(teacher_scores - student_scores).max(axis=1)


def gi_boxes(
    teacher_scores: np.ndarray,
    student_scores: np.ndarray,
    teacher_boxes: np.ndarray,
    student_boxes: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-location GI box: the box from whichever model is more confident.

    The teacher's box wins only when its best class score is strictly greater
    than the student's; ties go to the student. Returns the ``[R, 4]`` boxes
    plus a ``[R]`` array of source tags ("teacher"/"student").
    """
    teacher_scores = np.asarray(teacher_scores, dtype=np.float64)
    student_scores = np.asarray(student_scores, dtype=np.float64)
    _check_matched(teacher_scores, student_scores)
    teacher_boxes = np.asarray(teacher_boxes, dtype=np.float64).reshape(-1, 4)
    student_boxes = np.asarray(student_boxes, dtype=np.float64).reshape(-1, 4)
    if teacher_boxes.shape != student_boxes.shape or len(teacher_boxes) != len(teacher_scores):
        raise ValueError("box arrays must both be [R, 4] matching the score batch")
    teacher_wins = teacher_scores.max(axis=1) > student_scores.max(axis=1)
    boxes = np.where(teacher_wins[:, None], teacher_boxes, student_boxes)
    sources = np.where(teacher_wins, TEACHER, STUDENT)
    return boxes, sources


def select_gis(
    teacher_scores: np.ndarray,
    student_scores: np.ndarray,
    teacher_boxes: np.ndarray,
    student_boxes: np.ndarray,
    iou_threshold: float = 0.3,
    k: int = 10,
) -> list[GeneralInstance]:
    """Select up to ``k`` general instances from one image's paired outputs.

    GI scores and boxes are computed per location, deduplicated with NMS at
    ``iou_threshold``, and the ``k`` highest-scoring survivors are returned in
    descending score order. ``k = 0`` disables selection.
    """
    if k < 0:
        raise ValueError(f"k must be >= 0, got {k}")
    if k == 0:
        return []
    scores = gi_scores(teacher_scores, student_scores)
    boxes, sources = gi_boxes(teacher_scores, student_scores, teacher_boxes, student_boxes)
    kept = nms(scores, boxes, iou_threshold)[:k]
    return [
        GeneralInstance(
            score=float(scores[i]),
            box=boxes[i].copy(),
            source=str(sources[i]),
            index=i,
        )
        for i in kept
    ]


def classify_gi(gi_box: np.ndarray, gt_boxes: np.ndarray) -> GIType:
    """Label a GI box against ground truth via its best-IoU match.

    Pos when IoU > 0.5; otherwise SemiPos if IoP > 0.7, Neg if IoP < 0.3, and
    Ignore for IoP in [0.3, 0.7]. With no ground truth at all every GI is Neg.
    """
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if len(gt_boxes) == 0:
        return GIType.NEG
    gi_box = np.asarray(gi_box, dtype=np.float64).reshape(1, 4)
    ious = iou_matrix(gi_box, gt_boxes)[0]
    best = int(np.argmax(ious))
    best_iou = float(ious[best])
    if best_iou > 0.5:
        return GIType.POS
    best_iop = float(iop_matrix(gi_box, gt_boxes[best : best + 1])[0, 0])
    if best_iop > 0.7:
        return GIType.SEMI_POS
    if best_iop < 0.3:
        return GIType.NEG
    return GIType.IGNORE


def write_gi_records(fp, image_id, gis: list[GeneralInstance]) -> None:
    """Append one JSON line per GI (id, score, box, source, type) to ``fp``."""
    for gi in gis:
        record = {
            "image_id": image_id,
            "score": gi.score,
            "box": [float(v) for v in gi.box],
            "source": gi.source,
            "gi_type": gi.gi_type.value if gi.gi_type is not None else None,
        }
        fp.write(json.dumps(record) + "\n")
