"""Greedy non-maximum suppression with suppression bookkeeping.

A window is suppressed only when its IoU with a retained window is strictly
greater than the threshold. Equal scores are ordered by window id (dense index
for dataset-backed calls), lower first.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np
from numba import njit

from .core import BoundingBox, Dataset, iou_matrix

__all__ = ["NmsConfig", "NmsOutcome", "run_nms", "class_order", "nms_suppressors", "overlap_masks"]

RETAINED = -1


@dataclass(frozen=True)
class NmsConfig:
    overlap_threshold: float = 0.3

    def __post_init__(self):
        if not 0.0 < self.overlap_threshold < 1.0:
            raise ValueError(f"overlap_threshold must lie in (0, 1), got {self.overlap_threshold}")


@dataclass
class NmsOutcome:
    retained: list = field(default_factory=list)
    suppression_records: dict = field(default_factory=dict)

    @property
    def suppressed(self) -> set:
        return set(self.suppression_records)


def run_nms(windows: Sequence[tuple[Hashable, BoundingBox, float]], cfg: NmsConfig = NmsConfig()) -> NmsOutcome:
    """Run NMS over ``(window_id, box, score)`` triples of a single image and class."""
    if not windows:
        return NmsOutcome()
    ids = [w[0] for w in windows]
    if len(set(ids)) != len(ids):
        raise ValueError("window ids must be unique")
    scores = np.array([float(w[2]) for w in windows])
    if not np.isfinite(scores).all():
        raise ValueError("scores must be finite")
    boxes = np.array([w[1].to_list() for w in windows], dtype=np.float64)
    rank = sorted(range(len(windows)), key=lambda i: (-scores[i], ids[i]))
    # dense ids in tie-break order make the kernel's index tie-break match the id order
    boxes = boxes[rank]
    over = iou_matrix(boxes, boxes) > cfg.overlap_threshold
    sup = nms_suppressors(
        np.arange(len(rank)),
        np.zeros(len(rank), dtype=np.int64),
        np.array([0, len(rank)], dtype=np.int64),
        over.ravel(),
        np.array([0], dtype=np.int64),
    )
    out = NmsOutcome()
    for pos, i in enumerate(rank):
        if sup[pos] == RETAINED:
            out.retained.append(ids[i])
        else:
            out.suppression_records[ids[i]] = ids[rank[sup[pos]]]
    return out


def class_order(scores: np.ndarray) -> np.ndarray:
    """Indices sorted by decreasing score, ties broken by lower index."""
    return np.lexsort((np.arange(len(scores)), -np.asarray(scores)))


@njit(cache=True, nogil=True)
def nms_suppressors(order, window_image, offsets, mask_flat, mask_offsets):
    """Suppressor index for every window (``-1`` when retained).

    ``order`` visits windows by decreasing score across all images; each image's
    ``n x n`` boolean overlap mask lives at ``mask_flat[mask_offsets[img]:]``.
    """
    n_total = order.shape[0]
    sup = np.full(n_total, -2, dtype=np.int64)
    for t in range(n_total):
        idx = order[t]
        if sup[idx] != -2:
            continue
        sup[idx] = -1
        img = window_image[idx]
        a = offsets[img]
        n = offsets[img + 1] - a
        row = mask_offsets[img] + (idx - a) * n
        for j in range(n):
            if mask_flat[row + j] and sup[a + j] == -2:
                sup[a + j] = idx
    return sup


def overlap_masks(d: Dataset, threshold: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-image ``IoU > threshold`` masks, flattened, with their offsets (cached on ``d``)."""
    key = ("overlap", float(threshold))
    if key not in d._cache:
        sizes = np.diff(d.offsets)
        mask_offsets = np.zeros(len(sizes), dtype=np.int64)
        if len(sizes):
            mask_offsets[1:] = np.cumsum(sizes[:-1] ** 2)
        parts = [(iou_matrix(im.boxes, im.boxes) > threshold).ravel() for im in d.images]
        flat = np.concatenate(parts) if parts else np.zeros(0, dtype=bool)
        d._cache[key] = (flat, mask_offsets)
    return d._cache[key]


def dataset_nms(d: Dataset, scores: np.ndarray, cfg: NmsConfig) -> np.ndarray:
    """Suppressor array for one class's scores over every image of ``d``."""
    flat, mask_offsets = overlap_masks(d, cfg.overlap_threshold)
    return nms_suppressors(class_order(scores), d.window_image, d.offsets, flat, mask_offsets)
