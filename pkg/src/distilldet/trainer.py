"""Training loops: teacher pretraining, baseline students, and distillation.

The distillation step wires the whole pipeline together: forward both models,
select general instances from their paired predictions, pool and adapt GI
features, build the response mask, and combine

    total = task + lambda_feature * feature
                 + lambda_relation * relation
                 + lambda_response * response.

Baseline training is literally the same loop with distillation disabled, so a
run with ``k = 0`` (or every knowledge type off) reproduces the baseline
trajectory bit for bit under the same seed in determinism mode.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from . import selection
from .data import ShapesDataset
from .detector import (
    ANCHOR_BASED,
    DetectorConfig,
    OneStageDetector,
    postprocess_detections,
    save_checkpoint,
)
from .evaluation import EvalResult, average_precision
from .feature_distill import FeatureAdapter, assign_fpn_level, feature_loss, roi_align_multi
from .relation_distill import relation_loss
from .response_distill import (
    assign_mask_anchor_based,
    assign_mask_anchor_free,
    response_loss,
)
from .selection import GIType, GeneralInstance, classify_gi, select_gis

__all__ = [
    "OptimConfig",
    "DistillConfig",
    "LossBreakdown",
    "GITrace",
    "TrainResult",
    "TrainingDivergedError",
    "train_teacher",
    "train_student",
    "distill",
    "evaluate_model",
    "ablate",
    "KNOWLEDGE_GRID",
    "GI_TYPE_GRID",
    "TOPK_GRID",
    "save_run",
]

# exponential smoothing factor for the GI count curves
TRACE_SMOOTHING = 0.9


class TrainingDivergedError(RuntimeError):
    """Raised when a loss component stops being finite."""


@dataclass
class OptimConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 8
    total_steps: int = 1000
    # learning rate drops (x0.1) at these fractions of total_steps
    milestones: tuple[float, float] = (2.0 / 3.0, 8.0 / 9.0)

    def milestone_steps(self) -> tuple[int, ...]:
        return tuple(int(math.floor(m * self.total_steps)) for m in self.milestones)


@dataclass
class DistillConfig:
    k: int = 10
    nms_iou: float = 0.3
    lambda_feature: float = 5e-4
    lambda_relation: float = 40.0
    lambda_response: float = 1.0
    alpha: float = 0.1
    beta: float = 1.0
    relation_smooth_l1_beta: float = 1.0
    response_smooth_l1_beta: float = 0.1
    mask_iou_threshold: float = 0.5
    use_feature: bool = True
    use_relation: bool = True
    use_response: bool = True
    # None distills every selected GI; otherwise keep only these types
    # (Ignore-type GIs are dropped whenever a filter is active)
    gi_type_filter: tuple[str, ...] | None = None
    record_heatmaps: bool = True

    def __post_init__(self):
        if self.k < 0:
            raise ValueError("k must be >= 0")
        for name in ("lambda_feature", "lambda_relation", "lambda_response",
                     "alpha", "beta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.gi_type_filter is not None:
            valid = {t.value for t in GIType}
            bad = set(self.gi_type_filter) - valid
            if bad:
                raise ValueError(f"unknown GI types in filter: {sorted(bad)}")

    @property
    def active(self) -> bool:
        return self.k > 0 and (self.use_feature or self.use_relation or self.use_response)


@dataclass
class LossBreakdown:
    task: float
    feature: float
    relation: float
    response: float
    total: float

    @staticmethod
    def combine(task: float, feature: float, relation: float, response: float,
                cfg: DistillConfig | None) -> "LossBreakdown":
        if cfg is None:
            total = task
        else:
            total = (task + cfg.lambda_feature * feature
                     + cfg.lambda_relation * relation
                     + cfg.lambda_response * response)
        return LossBreakdown(task, feature, relation, response, total)


@dataclass
class GITrace:
    """Per-step GI bookkeeping: counts by type and optional score heatmaps."""

    steps: list[int] = field(default_factory=list)
    # per step: one {type-name: count} dict per image in the batch
    per_image_counts: list[list[dict[str, int]]] = field(default_factory=list)
    heatmaps: list[tuple[int, np.ndarray]] = field(default_factory=list)

    def record(self, step: int, batch_counts: list[dict[str, int]]) -> None:
        self.steps.append(step)
        self.per_image_counts.append(batch_counts)

    def raw_series(self, gi_type: str) -> np.ndarray:
        """Mean per-image count of one GI type at each recorded step."""
        return np.array(
            [
                float(np.mean([c.get(gi_type, 0) for c in counts])) if counts else 0.0
                for counts in self.per_image_counts
            ]
        )

    def smoothed_series(self, gi_type: str) -> np.ndarray:
        """Exponentially smoothed counts: s_t = 0.9 s_{t-1} + 0.1 x_t."""
        raw = self.raw_series(gi_type)
        out = np.zeros_like(raw)
        for t, x in enumerate(raw):
            out[t] = x if t == 0 else TRACE_SMOOTHING * out[t - 1] + (1 - TRACE_SMOOTHING) * x
        return out


@dataclass
class TrainResult:
    model: OneStageDetector
    adapter: FeatureAdapter | None
    history: list[LossBreakdown]
    trace: GITrace
    metrics: EvalResult | None
    config: dict


def images_to_tensor(images: list[np.ndarray]) -> torch.Tensor:
    """Stack HxWx3 uint8 images into a normalized [B, 3, H, W] float tensor."""
    arr = np.stack(images).astype(np.float32) / 255.0 - 0.5
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


def _apply_determinism(enabled: bool) -> None:
    if enabled:
        torch.set_num_threads(1)


def _select_batch_gis(
    teacher_out, student_out, batch_gt_boxes, cfg: DistillConfig
) -> list[list[GeneralInstance]]:
    """Per-image GI selection + typing + filtering on detached outputs."""
    batch = student_out.scores.shape[0]
    t_scores = teacher_out.scores.cpu().numpy()
    s_scores = student_out.scores.cpu().numpy()
    t_boxes = teacher_out.boxes.cpu().numpy()
    s_boxes = student_out.boxes.cpu().numpy()
    out: list[list[GeneralInstance]] = []
    for b in range(batch):
        gis = select_gis(
            t_scores[b], s_scores[b], t_boxes[b], s_boxes[b],
            iou_threshold=cfg.nms_iou, k=cfg.k,
        )
        for gi in gis:
            gi.gi_type = classify_gi(gi.box, batch_gt_boxes[b])
        # identical models produce zero-score GIs that carry no signal
        gis = [gi for gi in gis if gi.score > 0.0]
        if cfg.gi_type_filter is not None:
            wanted = set(cfg.gi_type_filter)
            gis = [gi for gi in gis if gi.gi_type.value in wanted]
        out.append(gis)
    return out


def _pooled_gi_features(model_out, image_index: int, gi_boxes: np.ndarray) -> torch.Tensor:
    """ROIAlign each GI from its assigned pyramid level; returns [K, D, 10, 10]."""
    levels = [
        assign_fpn_level(box, len(model_out.strides), model_out.strides[0])
        for box in gi_boxes
    ]
    feats_dim = model_out.features[0].shape[1]
    pooled = [None] * len(gi_boxes)
    for level in sorted(set(levels)):
        idx = [i for i, l in enumerate(levels) if l == level]
        chunk = roi_align_multi(
            model_out.features[level][image_index],
            float(model_out.strides[level]),
            gi_boxes[idx],
        )
        for slot, i in enumerate(idx):
            pooled[i] = chunk[slot]
    if not pooled:
        dummy = model_out.features[0]
        return dummy.new_zeros((0, feats_dim, 10, 10))
    return torch.stack(pooled)


def _gi_score_heatmap(scores_row: np.ndarray, model_out) -> np.ndarray:
    """Max-over-levels GI score grid at the finest level's resolution."""
    level_of = model_out.level_of
    strides = model_out.strides
    grids = []
    base_h = base_w = None
    for li, s in enumerate(strides):
        vec = scores_row[level_of == li]
        side = int(round(math.sqrt(vec.size)))
        grid = vec.reshape(side, side)
        if base_h is None:
            base_h, base_w = grid.shape
        factor = s // strides[0]
        grid = np.repeat(np.repeat(grid, factor, axis=0), factor, axis=1)
        grids.append(grid[:base_h, :base_w])
    return np.max(np.stack(grids), axis=0)


def _train_loop(
    model_config: DetectorConfig,
    optim_config: OptimConfig,
    dataset: ShapesDataset,
    seed: int,
    teacher: OneStageDetector | None = None,
    distill_config: DistillConfig | None = None,
    determinism: bool = False,
    eval_at_end: bool = True,
) -> TrainResult:
    _apply_determinism(determinism)
    torch.manual_seed(seed)
    model = OneStageDetector(model_config)
    model.train()

    adapter = None
    params = list(model.parameters())
    distilling = teacher is not None and distill_config is not None and distill_config.active
    if teacher is not None and distill_config is not None:
        if teacher.config.head_signature() != model_config.head_signature():
            raise ValueError(
                "teacher and student head shapes differ: "
                f"{teacher.config.head_signature()} vs {model_config.head_signature()}"
            )
        teacher.eval()
        for p in teacher.parameters():
            p.requires_grad_(False)
        # adapter init after the student so the student draws the same
        # RNG stream as a baseline run
        torch.manual_seed(seed + 7919)
        adapter = FeatureAdapter(model_config.fpn_channels, teacher.config.fpn_channels)
        adapter.train()
        params = params + list(adapter.parameters())

    optimizer = torch.optim.SGD(
        params,
        lr=optim_config.lr,
        momentum=optim_config.momentum,
        weight_decay=optim_config.weight_decay,
    )
    milestones = set(optim_config.milestone_steps())

    data_rng = np.random.default_rng(seed)
    train_ids = dataset.train_ids
    variant_anchor_based = model_config.variant == ANCHOR_BASED

    history: list[LossBreakdown] = []
    trace = GITrace()
    heatmap_steps: set[int] = set()
    if distilling and distill_config.record_heatmaps and optim_config.total_steps > 0:
        n_marks = min(4, optim_config.total_steps)
        heatmap_steps = {
            int(round(f)) for f in np.linspace(0, optim_config.total_steps - 1, n_marks)
        }

    for step in range(optim_config.total_steps):
        if step in milestones:
            for group in optimizer.param_groups:
                group["lr"] *= 0.1
        batch_size = min(optim_config.batch_size, len(train_ids))
        idx = data_rng.choice(len(train_ids), size=batch_size, replace=False)
        ids = [train_ids[i] for i in idx]
        images = images_to_tensor([dataset.images[i] for i in ids])
        gt_boxes = [dataset.annotations[i].boxes for i in ids]
        gt_classes = [dataset.annotations[i].class_ids for i in ids]

        student_out = model(images)
        task = model.task_loss(student_out, gt_boxes, gt_classes)

        feat_val = rel_val = resp_val = 0.0
        if distilling:
            with torch.no_grad():
                teacher_out = teacher(images)
            gis_per_image = _select_batch_gis(teacher_out, student_out, gt_boxes,
                                              distill_config)
            trace.record(step, [
                {
                    t.value: sum(1 for gi in gis if gi.gi_type == t)
                    for t in GIType
                }
                for gis in gis_per_image
            ])
            if step in heatmap_steps:
                trace.heatmaps.append(
                    (step, _gi_score_heatmap(
                        selection.gi_scores(
                            teacher_out.scores[0].cpu().numpy(),
                            student_out.scores[0].cpu().numpy(),
                        ),
                        student_out,
                    ))
                )

            feat_terms, rel_terms, resp_terms = [], [], []
            for b, gis in enumerate(gis_per_image):
                if not gis:
                    continue
                boxes = np.stack([gi.box for gi in gis])
                if distill_config.use_feature or distill_config.use_relation:
                    t_pooled = _pooled_gi_features(teacher_out, b, boxes).detach()
                    s_pooled = adapter(_pooled_gi_features(student_out, b, boxes))
                    if distill_config.use_feature:
                        feat_terms.append(feature_loss(t_pooled, s_pooled))
                    if distill_config.use_relation:
                        rel_terms.append(relation_loss(
                            t_pooled, s_pooled,
                            smooth_l1_beta=distill_config.relation_smooth_l1_beta,
                        ))
                if distill_config.use_response:
                    if variant_anchor_based:
                        mask = assign_mask_anchor_based(
                            boxes, student_out.anchors,
                            iou_threshold=distill_config.mask_iou_threshold,
                        )
                        reg_kind, pts = "smooth_l1", None
                    else:
                        mask = assign_mask_anchor_free(boxes, student_out.points)
                        reg_kind, pts = "iou", student_out.points
                    resp = response_loss(
                        mask,
                        teacher_out.cls_logits[b], student_out.cls_logits[b],
                        teacher_out.reg_distill[b], student_out.reg_distill[b],
                        alpha=distill_config.alpha, beta=distill_config.beta,
                        reg_loss=reg_kind,
                        smooth_l1_beta=distill_config.response_smooth_l1_beta,
                        points=pts,
                    )
                    resp_terms.append(resp.total)

            batch = len(gis_per_image)
            feat_t = sum(feat_terms) / batch if feat_terms else None
            rel_t = sum(rel_terms) / batch if rel_terms else None
            resp_t = sum(resp_terms) / batch if resp_terms else None

            total = task.total
            for weight, term in (
                (distill_config.lambda_feature, feat_t),
                (distill_config.lambda_relation, rel_t),
                (distill_config.lambda_response, resp_t),
            ):
                if term is not None:
                    total = total + weight * term
            feat_val = float(feat_t) if feat_t is not None else 0.0
            rel_val = float(rel_t) if rel_t is not None else 0.0
            resp_val = float(resp_t) if resp_t is not None else 0.0
        else:
            total = task.total

        breakdown = LossBreakdown.combine(
            float(task.total), feat_val, rel_val, resp_val,
            distill_config if distilling else None,
        )
        _check_finite(breakdown, step)
        history.append(breakdown)

        optimizer.zero_grad(set_to_none=True)
        total.backward()
        optimizer.step()

    model.eval()
    metrics = evaluate_model(model, dataset, split="val") if eval_at_end else None
    return TrainResult(
        model=model,
        adapter=adapter,
        history=history,
        trace=trace,
        metrics=metrics,
        config={
            "model": dataclasses.asdict(model_config),
            "optim": dataclasses.asdict(optim_config),
            "distill": dataclasses.asdict(distill_config) if distill_config else None,
            "seed": seed,
            "determinism": determinism,
        },
    )


def _check_finite(breakdown: LossBreakdown, step: int) -> None:
    for name in ("task", "feature", "relation", "response"):
        if not math.isfinite(getattr(breakdown, name)):
            raise TrainingDivergedError(
                f"{name} loss became non-finite at step {step}"
            )


def train_teacher(
    model_config: DetectorConfig,
    optim_config: OptimConfig,
    dataset: ShapesDataset,
    seed: int = 0,
    determinism: bool = False,
    eval_at_end: bool = True,
) -> TrainResult:
    """Task-loss-only training for the teacher model."""
    return _train_loop(model_config, optim_config, dataset, seed,
                       determinism=determinism, eval_at_end=eval_at_end)


def train_student(
    model_config: DetectorConfig,
    optim_config: OptimConfig,
    dataset: ShapesDataset,
    seed: int = 0,
    determinism: bool = False,
    eval_at_end: bool = True,
) -> TrainResult:
    """Baseline student: identical loop to :func:`distill` minus the teacher."""
    return _train_loop(model_config, optim_config, dataset, seed,
                       determinism=determinism, eval_at_end=eval_at_end)


def distill(
    teacher: OneStageDetector,
    student_config: DetectorConfig,
    distill_config: DistillConfig,
    optim_config: OptimConfig,
    dataset: ShapesDataset,
    seed: int = 0,
    determinism: bool = False,
    eval_at_end: bool = True,
) -> TrainResult:
    """Train a student against a frozen teacher with the combined loss."""
    return _train_loop(
        model_config=student_config,
        optim_config=optim_config,
        dataset=dataset,
        seed=seed,
        teacher=teacher,
        distill_config=distill_config,
        determinism=determinism,
        eval_at_end=eval_at_end,
    )


def evaluate_model(
    model: OneStageDetector,
    dataset: ShapesDataset,
    split: str = "val",
    score_threshold: float = 0.05,
    nms_iou: float = 0.5,
    batch_size: int = 16,
) -> EvalResult:
    """Run the detector over one split and score it with COCO-style mAP."""
    ids = dataset.val_ids if split == "val" else dataset.train_ids
    was_training = model.training
    model.eval()
    results: dict[int, list] = {}
    with torch.no_grad():
        for start in range(0, len(ids), batch_size):
            chunk = ids[start : start + batch_size]
            images = images_to_tensor([dataset.images[i] for i in chunk])
            dets = postprocess_detections(model(images), score_threshold, nms_iou)
            for image_id, d in zip(chunk, dets):
                results[image_id] = d
    if was_training:
        model.train()
    annotations = {
        i: (dataset.annotations[i].class_ids, dataset.annotations[i].boxes) for i in ids
    }
    return average_precision(results, annotations)


# ablation grids ---------------------------------------------------------

KNOWLEDGE_GRID = (
    ("none", {"use_feature": False, "use_relation": False, "use_response": False}),
    ("feature", {"use_feature": True, "use_relation": False, "use_response": False}),
    ("relation", {"use_feature": False, "use_relation": True, "use_response": False}),
    ("response", {"use_feature": False, "use_relation": False, "use_response": True}),
    ("feature+response", {"use_feature": True, "use_relation": False, "use_response": True}),
    ("all", {"use_feature": True, "use_relation": True, "use_response": True}),
)

GI_TYPE_GRID = (
    ("pos", {"gi_type_filter": ("Pos",)}),
    ("semipos", {"gi_type_filter": ("SemiPos",)}),
    ("neg", {"gi_type_filter": ("Neg",)}),
    ("pos+semipos", {"gi_type_filter": ("Pos", "SemiPos")}),
    ("pos+semipos+neg", {"gi_type_filter": ("Pos", "SemiPos", "Neg")}),
)

TOPK_GRID = (
    ("k=0", {"k": 0}),
    ("k=5", {"k": 5}),
    ("k=10", {"k": 10}),
    ("k=40", {"k": 40}),
)

GRIDS = {"knowledge": KNOWLEDGE_GRID, "gi-type": GI_TYPE_GRID, "topk": TOPK_GRID}


def ablate(
    grid_name: str,
    teacher: OneStageDetector,
    student_config: DetectorConfig,
    base_distill_config: DistillConfig,
    optim_config: OptimConfig,
    dataset: ShapesDataset,
    seeds: tuple[int, ...] = (0,),
    determinism: bool = False,
) -> dict:
    """Run one distillation per grid cell per seed; failures are recorded
    per cell and do not stop the grid."""
    if grid_name not in GRIDS:
        raise ValueError(f"unknown grid {grid_name!r}; pick from {sorted(GRIDS)}")
    rows = []
    for cell_name, overrides in GRIDS[grid_name]:
        cell = {
            "name": cell_name,
            "overrides": overrides,
            "seeds": list(seeds),
            "map_per_seed": [],
            "error": None,
        }
        try:
            cfg = dataclasses.replace(base_distill_config, **overrides)
            for seed in seeds:
                result = distill(
                    teacher, student_config, cfg, optim_config, dataset,
                    seed=seed, determinism=determinism,
                )
                cell["map_per_seed"].append(result.metrics.mean_ap)
            cell["map_mean"] = float(np.mean(cell["map_per_seed"]))
        except Exception as exc:  # cell failure must not kill the grid
            cell["error"] = f"{type(exc).__name__}: {exc}"
            cell["map_mean"] = None
        rows.append(cell)
    return {"grid": grid_name, "rows": rows}


# run artifacts ----------------------------------------------------------


def save_run(out_dir, result: TrainResult, name: str = "model") -> None:
    """Write checkpoint, manifest, loss history, and GI trace for a run."""
    os.makedirs(out_dir, exist_ok=True)
    save_checkpoint(os.path.join(out_dir, f"{name}.pt"), result.model)
    manifest = {
        "config": result.config,
        "final_map": result.metrics.mean_ap if result.metrics else None,
        "final_ap50": result.metrics.ap50 if result.metrics else None,
        "per_class_ap": (
            {str(k): v for k, v in result.metrics.per_class_ap.items()}
            if result.metrics else None
        ),
        "steps": len(result.history),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fp:
        json.dump(manifest, fp, indent=2)
        fp.write("\n")
    with open(os.path.join(out_dir, "losses.jsonl"), "w") as fp:
        for i, b in enumerate(result.history):
            fp.write(json.dumps({"step": i, **dataclasses.asdict(b)}) + "\n")
    if result.trace.steps:
        with open(os.path.join(out_dir, "gitrace.jsonl"), "w") as fp:
            for step, counts in zip(result.trace.steps, result.trace.per_image_counts):
                fp.write(json.dumps({"step": step, "per_image_counts": counts}) + "\n")
        np.savez(
            os.path.join(out_dir, "heatmaps.npz"),
            **{f"step_{step}": grid for step, grid in result.trace.heatmaps},
        )
