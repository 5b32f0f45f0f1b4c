"""Deterministic synthetic-shapes detection dataset.

Images are noisy colored backgrounds with a handful of rendered shapes
(circle, square, triangle, cross), each with an exact ground-truth box. The
same spec + seed always regenerates the bit-identical dataset, which is the
contract the on-disk manifest records.

On disk a dataset is::

    <root>/
      spec.json              generation spec incl. seed
      annotations.jsonl      one JSON object per image: id, split, objects
      results/.. (optional)  detection files share the annotation format
      images/<id>.png        lossless rasters
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .geometry import iou_matrix

__all__ = [
    "CLASS_NAMES",
    "DatasetSpec",
    "Annotation",
    "ShapesDataset",
    "DatasetFormatError",
    "generate",
    "save_dataset",
    "load_dataset",
    "write_detections",
    "read_detections",
]

CLASS_NAMES = ("circle", "square", "triangle", "cross")

MIN_BOX_AREA = 16.0  # 4x4 px


class DatasetFormatError(ValueError):
    """Raised for unreadable dataset files; carries file and line context."""


@dataclass
class DatasetSpec:
    seed: int = 0
    image_size: int = 64
    num_classes: int = 4
    min_objects: int = 1
    max_objects: int = 5
    min_size: int = 12
    max_size: int = 40
    noise: float = 0.06
    train_count: int = 500
    val_count: int = 100

    def __post_init__(self):
        if not 1 <= self.num_classes <= len(CLASS_NAMES):
            raise ValueError(f"num_classes must be in [1, {len(CLASS_NAMES)}]")
        if self.min_objects < 0 or self.max_objects < self.min_objects:
            raise ValueError("need 0 <= min_objects <= max_objects")
        if self.min_size < 4:
            raise ValueError("min_size must be >= 4 px")
        if self.max_size >= self.image_size:
            raise ValueError("max_size must fit inside the image")


@dataclass
class Annotation:
    image_id: int
    split: str  # "train" | "val"
    class_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4), dtype=np.float64))


@dataclass
class ShapesDataset:
    spec: DatasetSpec
    images: dict[int, np.ndarray]  # id -> HxWx3 uint8
    annotations: dict[int, Annotation]

    @property
    def train_ids(self) -> list[int]:
        return [i for i, a in sorted(self.annotations.items()) if a.split == "train"]

    @property
    def val_ids(self) -> list[int]:
        return [i for i, a in sorted(self.annotations.items()) if a.split == "val"]

    def checksum(self) -> str:
        h = hashlib.sha256()
        for i in sorted(self.images):
            h.update(np.ascontiguousarray(self.images[i]).tobytes())
            ann = self.annotations[i]
            h.update(ann.class_ids.tobytes())
            h.update(np.round(ann.boxes, 6).tobytes())
        return h.hexdigest()


# rendering -------------------------------------------------------------


def _draw_shape(img: np.ndarray, class_id: int, cx: float, cy: float,
                size: float, color: np.ndarray) -> np.ndarray:
    """Paint one shape and return its exact bounding box."""
    h, w, _ = img.shape
    yy, xx = np.mgrid[0:h, 0:w]
    # pixel centers at integer + 0.5
    px = xx + 0.5
    py = yy + 0.5
    half = size / 2.0
    name = CLASS_NAMES[class_id]
    if name == "circle":
        mask = (px - cx) ** 2 + (py - cy) ** 2 <= half**2
    elif name == "square":
        mask = (np.abs(px - cx) <= half) & (np.abs(py - cy) <= half)
    elif name == "triangle":
        # upward triangle: apex at top, base at bottom
        t = (py - (cy - half)) / size  # 0 at apex row, 1 at base
        mask = (py >= cy - half) & (py <= cy + half) & (np.abs(px - cx) <= half * t)
    elif name == "cross":
        arm = size / 6.0
        horiz = (np.abs(py - cy) <= arm) & (np.abs(px - cx) <= half)
        vert = (np.abs(px - cx) <= arm) & (np.abs(py - cy) <= half)
        mask = horiz | vert
    else:  # pragma: no cover
        raise ValueError(f"bad class id {class_id}")
    img[mask] = color
    return np.array([cx - half, cy - half, cx + half, cy + half], dtype=np.float64)


def _render_image(spec: DatasetSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    s = spec.image_size
    bg = rng.uniform(0.05, 0.45, size=3)
    img = np.ones((s, s, 3), dtype=np.float64) * bg

    n_obj = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    boxes = []
    class_ids = []
    for _ in range(n_obj):
        class_id = int(rng.integers(0, spec.num_classes))
        size = float(rng.uniform(spec.min_size, spec.max_size))
        placed = False
        for _attempt in range(20):
            cx = float(rng.uniform(size / 2, s - size / 2))
            cy = float(rng.uniform(size / 2, s - size / 2))
            cand = np.array([cx - size / 2, cy - size / 2, cx + size / 2, cy + size / 2])
            if boxes and iou_matrix(cand, np.array(boxes)).max() > 0.2:
                continue
            placed = True
            break
        if not placed:
            continue
        color = rng.uniform(0.55, 1.0, size=3)
        # rotate channels so classes are not color-separable
        color = np.roll(color, class_id % 3)
        box = _draw_shape(img, class_id, cx, cy, size, color)
        boxes.append(box)
        class_ids.append(class_id)

    img += rng.normal(0.0, spec.noise, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    img_u8 = np.round(img * 255.0).astype(np.uint8)
    boxes_arr = np.array(boxes, dtype=np.float64).reshape(-1, 4)
    return img_u8, np.array(class_ids, dtype=np.int64), boxes_arr


def generate(spec: DatasetSpec) -> ShapesDataset:
    """Render the full train+val dataset for a spec. Deterministic in the seed."""
    if spec.min_objects > 0 and spec.min_size >= spec.image_size:
        raise ValueError("objects cannot fit in the image")
    rng = np.random.default_rng(spec.seed)
    images: dict[int, np.ndarray] = {}
    annotations: dict[int, Annotation] = {}
    next_id = 0
    for split, count in (("train", spec.train_count), ("val", spec.val_count)):
        for _ in range(count):
            img, class_ids, boxes = _render_image(spec, rng)
            images[next_id] = img
            annotations[next_id] = Annotation(
                image_id=next_id, split=split, class_ids=class_ids, boxes=boxes
            )
            next_id += 1
    return ShapesDataset(spec=spec, images=images, annotations=annotations)


# persistence -----------------------------------------------------------


def save_dataset(dataset: ShapesDataset, root) -> None:
    root = os.fspath(root)
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    with open(os.path.join(root, "spec.json"), "w") as fp:
        json.dump(dataclasses.asdict(dataset.spec), fp, indent=2)
        fp.write("\n")
    with open(os.path.join(root, "annotations.jsonl"), "w") as fp:
        for image_id in sorted(dataset.annotations):
            ann = dataset.annotations[image_id]
            record = {
                "image_id": image_id,
                "split": ann.split,
                "objects": [
                    {"class_id": int(c), "box": [float(v) for v in b]}
                    for c, b in zip(ann.class_ids, ann.boxes)
                ],
            }
            fp.write(json.dumps(record) + "\n")
    for image_id, img in dataset.images.items():
        Image.fromarray(img).save(os.path.join(root, "images", f"{image_id}.png"))


def _parse_jsonl(path) -> list[dict]:
    records = []
    with open(path) as fp:
        for lineno, line in enumerate(fp, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"{path}:{lineno}: invalid record: {exc}") from exc
    return records


def load_dataset(root) -> ShapesDataset:
    root = os.fspath(root)
    spec_path = os.path.join(root, "spec.json")
    try:
        with open(spec_path) as fp:
            spec = DatasetSpec(**json.load(fp))
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{spec_path}: invalid spec: {exc}") from exc
    images: dict[int, np.ndarray] = {}
    annotations: dict[int, Annotation] = {}
    for record in _parse_jsonl(os.path.join(root, "annotations.jsonl")):
        try:
            image_id = int(record["image_id"])
            split = record["split"]
            objs = record["objects"]
            class_ids = np.array([o["class_id"] for o in objs], dtype=np.int64)
            boxes = np.array([o["box"] for o in objs], dtype=np.float64).reshape(-1, 4)
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetFormatError(f"annotations.jsonl: bad record {record!r}") from exc
        annotations[image_id] = Annotation(
            image_id=image_id, split=split, class_ids=class_ids, boxes=boxes
        )
        img_path = os.path.join(root, "images", f"{image_id}.png")
        images[image_id] = np.asarray(Image.open(img_path).convert("RGB"))
    return ShapesDataset(
        spec=spec, images=images, annotations=annotations
    )


def write_detections(path, detections: dict[int, list[tuple[int, float, np.ndarray]]]) -> None:
    """Detection results: the annotation format plus a score per object."""
    with open(path, "w") as fp:
        for image_id in sorted(detections):
            record = {
                "image_id": int(image_id),
                "objects": [
                    {"class_id": int(c), "score": float(s), "box": [float(v) for v in b]}
                    for c, s, b in detections[image_id]
                ],
            }
            fp.write(json.dumps(record) + "\n")


def read_detections(path) -> dict[int, list[tuple[int, float, np.ndarray]]]:
    out: dict[int, list[tuple[int, float, np.ndarray]]] = {}
    for record in _parse_jsonl(path):
        try:
            out[int(record["image_id"])] = [
                (int(o["class_id"]), float(o["score"]), np.asarray(o["box"], dtype=np.float64))
                for o in record["objects"]
            ]
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetFormatError(f"{path}: bad record {record!r}") from exc
    return out
