"""Geometric primitives, the detection data model and JSON (de)serialization.

Boxes use continuous coordinates: ``area = (x_max - x_min) * (y_max - y_min)``.
Identifiers are opaque strings externally; internally every proposal window has
a dense integer index given by its position in :attr:`Dataset.boxes`, and that
index is the global tie-break for equal scores everywhere in the package.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "BoundingBox",
    "GroundTruthObject",
    "ProposalWindow",
    "ImageRecord",
    "Dataset",
    "ScoreTable",
    "iou",
    "iou_matrix",
    "validate_dataset",
]


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def is_valid(self) -> bool:
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        return all(math.isfinite(c) for c in coords) and self.x_max > self.x_min and self.y_max > self.y_min

    def translate(self, dx: float, dy: float) -> "BoundingBox":
        return BoundingBox(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)

    def to_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    @classmethod
    def from_seq(cls, seq: Sequence[float]) -> "BoundingBox":
        if len(seq) != 4:
            raise ValueError(f"a box needs 4 coordinates, got {len(seq)}")
        return cls(*(float(v) for v in seq))


@dataclass(frozen=True)
class GroundTruthObject:
    image_id: str
    class_id: int
    box: BoundingBox


@dataclass(frozen=True)
class ProposalWindow:
    image_id: str
    window_id: str
    box: BoundingBox


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection-over-union of two boxes; 0.0 when they are disjoint."""
    for box in (a, b):
        if not box.is_valid():
            raise ValueError(f"degenerate or non-finite box: {box}")
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two ``(n, 4)`` / ``(m, 4)`` arrays of valid boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0.0, inter / np.where(union > 0.0, union, 1.0), 0.0)


@dataclass(frozen=True)
class ImageRecord:
    """One image: its proposal windows and its ground-truth objects."""

    id: str
    window_ids: tuple[str, ...]
    boxes: np.ndarray  # (n, 4)
    gt_boxes: np.ndarray  # (m, 4)
    gt_classes: np.ndarray  # (m,)

    def __post_init__(self):
        boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        gt_boxes = np.asarray(self.gt_boxes, dtype=np.float64).reshape(-1, 4)
        gt_classes = np.asarray(self.gt_classes, dtype=np.int64).reshape(-1)
        if len(self.window_ids) != len(boxes):
            raise ValueError("window_ids and boxes differ in length")
        if len(gt_boxes) != len(gt_classes):
            raise ValueError("gt_boxes and gt_classes differ in length")
        object.__setattr__(self, "window_ids", tuple(str(w) for w in self.window_ids))
        object.__setattr__(self, "boxes", boxes)
        object.__setattr__(self, "gt_boxes", gt_boxes)
        object.__setattr__(self, "gt_classes", gt_classes)

    @property
    def windows(self) -> list[ProposalWindow]:
        return [ProposalWindow(self.id, w, BoundingBox(*b)) for w, b in zip(self.window_ids, self.boxes.tolist())]

    @property
    def ground_truths(self) -> list[GroundTruthObject]:
        return [
            GroundTruthObject(self.id, int(c), BoundingBox(*b))
            for c, b in zip(self.gt_classes.tolist(), self.gt_boxes.tolist())
        ]


@dataclass(frozen=True)
class Dataset:
    """Images with proposals and ground truths, plus the class count ``n_classes``.

    ``unassigned`` holds ground truths whose image id matched no image when the
    dataset was assembled from flat records; :func:`validate_dataset` reports them.
    """

    images: tuple[ImageRecord, ...]
    n_classes: int
    unassigned: tuple[GroundTruthObject, ...] = ()
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "images", tuple(self.images))
        offsets = np.zeros(len(self.images) + 1, dtype=np.int64)
        offsets[1:] = np.cumsum([len(im.window_ids) for im in self.images])
        gt_offsets = np.zeros(len(self.images) + 1, dtype=np.int64)
        gt_offsets[1:] = np.cumsum([len(im.gt_classes) for im in self.images])
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "gt_offsets", gt_offsets)

    # flat views -------------------------------------------------------------

    @property
    def n_windows(self) -> int:
        return int(self.offsets[-1])

    @property
    def n_ground_truths(self) -> int:
        return int(self.gt_offsets[-1])

    @property
    def boxes(self) -> np.ndarray:
        if "boxes" not in self._cache:
            parts = [im.boxes for im in self.images]
            self._cache["boxes"] = np.concatenate(parts) if parts else np.zeros((0, 4))
        return self._cache["boxes"]

    @property
    def window_image(self) -> np.ndarray:
        if "window_image" not in self._cache:
            self._cache["window_image"] = np.repeat(np.arange(len(self.images)), np.diff(self.offsets))
        return self._cache["window_image"]

    @property
    def gt_boxes(self) -> np.ndarray:
        if "gt_boxes" not in self._cache:
            parts = [im.gt_boxes for im in self.images]
            self._cache["gt_boxes"] = np.concatenate(parts) if parts else np.zeros((0, 4))
        return self._cache["gt_boxes"]

    @property
    def gt_classes(self) -> np.ndarray:
        if "gt_classes" not in self._cache:
            parts = [im.gt_classes for im in self.images]
            self._cache["gt_classes"] = np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)
        return self._cache["gt_classes"]

    @property
    def gt_image(self) -> np.ndarray:
        if "gt_image" not in self._cache:
            self._cache["gt_image"] = np.repeat(np.arange(len(self.images)), np.diff(self.gt_offsets))
        return self._cache["gt_image"]

    def gt_counts(self) -> np.ndarray:
        """Number of ground-truth objects per class."""
        cls = self.gt_classes
        cls = cls[(cls >= 0) & (cls < self.n_classes)]
        return np.bincount(cls, minlength=self.n_classes)

    def window_key(self, index: int) -> tuple[str, str]:
        img = int(self.window_image[index])
        return self.images[img].id, self.images[img].window_ids[index - int(self.offsets[img])]

    def window_index(self) -> dict[tuple[str, str], int]:
        """Map ``(image_id, window_id)`` to the dense window index."""
        if "window_index" not in self._cache:
            index = {}
            for i, im in enumerate(self.images):
                base = int(self.offsets[i])
                for j, w in enumerate(im.window_ids):
                    index[(im.id, w)] = base + j
            self._cache["window_index"] = index
        return self._cache["window_index"]

    def foreground_mask(self, threshold: float = 0.5) -> np.ndarray:
        """Windows overlapping any ground truth (any class) with IoU above ``threshold``."""
        mask = np.zeros(self.n_windows, dtype=bool)
        for i, im in enumerate(self.images):
            if len(im.gt_boxes) and len(im.boxes):
                mask[self.offsets[i]:self.offsets[i + 1]] = (iou_matrix(im.boxes, im.gt_boxes) > threshold).any(axis=1)
        return mask

    # construction -----------------------------------------------------------

    def subset(self, image_indices: Iterable[int], window_mask: np.ndarray | None = None) -> "Dataset":
        """Dataset restricted to some images and, optionally, a window mask over all windows.

        Ground truths of the selected images are always kept.
        """
        images = []
        for i in image_indices:
            im = self.images[int(i)]
            if window_mask is None:
                images.append(im)
                continue
            keep = np.asarray(window_mask[self.offsets[i]:self.offsets[i + 1]], dtype=bool)
            images.append(
                ImageRecord(
                    im.id,
                    tuple(w for w, k in zip(im.window_ids, keep) if k),
                    im.boxes[keep],
                    im.gt_boxes,
                    im.gt_classes,
                )
            )
        return Dataset(tuple(images), self.n_classes)

    @classmethod
    def from_records(
        cls,
        image_ids: Sequence[str],
        proposals: Iterable[ProposalWindow],
        ground_truths: Iterable[GroundTruthObject],
        n_classes: int,
    ) -> "Dataset":
        """Assemble a dataset from flat records; images and windows are sorted by id."""
        props: dict[str, list[ProposalWindow]] = {str(i): [] for i in image_ids}
        gts: dict[str, list[GroundTruthObject]] = {str(i): [] for i in image_ids}
        orphans = []
        for p in proposals:
            props.setdefault(p.image_id, []).append(p)
            gts.setdefault(p.image_id, [])
        for g in ground_truths:
            if g.image_id in gts:
                gts[g.image_id].append(g)
            else:
                orphans.append(g)
        images = []
        for image_id in sorted(props):
            ws = sorted(props[image_id], key=lambda p: p.window_id)
            gs = gts[image_id]
            images.append(
                ImageRecord(
                    image_id,
                    tuple(p.window_id for p in ws),
                    np.array([p.box.to_list() for p in ws], dtype=np.float64).reshape(-1, 4),
                    np.array([g.box.to_list() for g in gs], dtype=np.float64).reshape(-1, 4),
                    np.array([g.class_id for g in gs], dtype=np.int64),
                )
            )
        return cls(tuple(images), int(n_classes), tuple(orphans))

    # JSON -------------------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "classes": self.n_classes,
            "images": [
                {
                    "id": im.id,
                    "proposals": [{"id": w, "box": b} for w, b in zip(im.window_ids, im.boxes.tolist())],
                    "ground_truth": [
                        {"class": c, "box": b} for c, b in zip(im.gt_classes.tolist(), im.gt_boxes.tolist())
                    ],
                }
                for im in self.images
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Dataset":
        try:
            n_classes = int(obj["classes"])
            image_ids, proposals, gts = [], [], []
            for im in obj["images"]:
                image_id = str(im["id"])
                image_ids.append(image_id)
                for p in im.get("proposals", []):
                    proposals.append(ProposalWindow(image_id, str(p["id"]), BoundingBox.from_seq(p["box"])))
                for g in im.get("ground_truth", []):
                    gts.append(GroundTruthObject(image_id, int(g["class"]), BoundingBox.from_seq(g["box"])))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed dataset JSON: {exc!r}") from exc
        if len(set(image_ids)) != len(image_ids):
            raise ValueError("duplicate image ids in dataset JSON")
        return cls.from_records(image_ids, proposals, gts, n_classes)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "Dataset":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def validate_dataset(d: Dataset) -> list[str]:
    """Return a list of human-readable invariant violations (empty when valid)."""
    problems = []
    if d.n_classes < 1:
        problems.append(f"class count must be >= 1, got {d.n_classes}")
    seen_images = set()
    for im in d.images:
        if im.id in seen_images:
            problems.append(f"duplicate image id {im.id!r}")
        seen_images.add(im.id)
        if len(set(im.window_ids)) != len(im.window_ids):
            problems.append(f"image {im.id!r}: duplicate window ids")
        for w, b in zip(im.window_ids, im.boxes.tolist()):
            if not BoundingBox(*b).is_valid():
                problems.append(f"image {im.id!r}: window {w!r} has invalid box {b}")
        for k, (c, b) in enumerate(zip(im.gt_classes.tolist(), im.gt_boxes.tolist())):
            if not 0 <= c < d.n_classes:
                problems.append(f"image {im.id!r}: ground truth {k} has class {c} outside [0, {d.n_classes})")
            if not BoundingBox(*b).is_valid():
                problems.append(f"image {im.id!r}: ground truth {k} has invalid box {b}")
    for g in d.unassigned:
        problems.append(f"ground truth references unknown image {g.image_id!r}")
    return problems


@dataclass
class ScoreTable:
    """Scores for every (window, class) pair, aligned with a dataset's dense window order."""

    values: np.ndarray  # (n_windows, n_classes)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("score table must be 2-D (windows x classes)")

    @property
    def n_classes(self) -> int:
        return self.values.shape[1]

    def copy(self) -> "ScoreTable":
        return ScoreTable(self.values.copy())

    def to_json(self, d: Dataset) -> dict:
        entries = []
        for i, im in enumerate(d.images):
            base = int(d.offsets[i])
            for j, w in enumerate(im.window_ids):
                for c in range(self.n_classes):
                    entries.append({"image": im.id, "window": w, "class": c, "score": float(self.values[base + j, c])})
        return {"scores": entries}

    @classmethod
    def from_json(cls, obj: dict, d: Dataset) -> "ScoreTable":
        index = d.window_index()
        values = np.full((d.n_windows, d.n_classes), np.nan)
        try:
            for e in obj["scores"]:
                key = (str(e["image"]), str(e["window"]))
                c = int(e["class"])
                if key not in index:
                    raise ValueError(f"score for unknown window {key}")
                if not 0 <= c < d.n_classes:
                    raise ValueError(f"score for unknown class {c}")
                if not np.isnan(values[index[key], c]):
                    raise ValueError(f"duplicate score for {key} class {c}")
                values[index[key], c] = float(e["score"])
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed scores JSON: {exc!r}") from exc
        if np.isnan(values).any():
            missing = int(np.isnan(values).sum())
            raise ValueError(f"score table is missing {missing} (window, class) entries")
        return cls(values)

    def save(self, path, d: Dataset) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(d), fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path, d: Dataset) -> "ScoreTable":
        with open(path) as fh:
            return cls.from_json(json.load(fh), d)
