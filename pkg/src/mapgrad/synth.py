"""Seeded synthetic detection problems.

Each ground truth gets jittered copies of itself as proposals, so their IoU with
it straddles the matching threshold; every image also gets uniformly placed
background boxes. With the defaults roughly 5% of proposals are foreground.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import Dataset, ImageRecord, ScoreTable

__all__ = ["SynthConfig", "generate", "foreground_fraction", "from_labels", "random_instance"]


@dataclass(frozen=True)
class SynthConfig:
    n_images: int = 20
    n_classes: int = 3
    gts_per_image: tuple[int, int] = (1, 3)  # inclusive range
    jittered_per_gt: int = 4
    background_per_image: int = 52
    canvas: tuple[float, float] = (500.0, 375.0)
    gt_size: tuple[float, float] = (40.0, 160.0)
    jitter: float = 0.4
    seed: int = 0

    def validate(self) -> None:
        lo, hi = self.gts_per_image
        if min(self.n_images, lo, hi, self.jittered_per_gt, self.background_per_image) < 0:
            raise ValueError("counts must be non-negative")
        if lo > hi:
            raise ValueError("gts_per_image range is empty")
        if self.n_classes < 1:
            raise ValueError("n_classes must be >= 1")
        if self.jitter < 0:
            raise ValueError("jitter must be non-negative")
        smin, smax = self.gt_size
        if not 0 < smin <= smax:
            raise ValueError("gt_size must satisfy 0 < min <= max")
        if min(self.canvas) < smax:
            raise ValueError(f"canvas {self.canvas} is too small for boxes up to {smax} pixels")


def _random_boxes(rng: np.random.Generator, n: int, cfg: SynthConfig) -> np.ndarray:
    w = rng.uniform(*cfg.gt_size, size=n)
    h = rng.uniform(*cfg.gt_size, size=n)
    x = rng.uniform(0.0, 1.0, size=n) * (cfg.canvas[0] - w)
    y = rng.uniform(0.0, 1.0, size=n) * (cfg.canvas[1] - h)
    return np.stack([x, y, x + w, y + h], axis=1)


def _jittered(rng: np.random.Generator, gt: np.ndarray, n: int, jitter: float) -> np.ndarray:
    size = np.array([gt[2] - gt[0], gt[3] - gt[1]] * 2)
    out = np.empty((n, 4))
    for k in range(n):
        for _ in range(1000):
            box = gt + rng.uniform(-jitter, jitter, size=4) * size
            if box[2] > box[0] and box[3] > box[1]:
                break
        else:
            raise ValueError("jitter too large to produce valid boxes")
        out[k] = box
    return out


def generate(cfg: SynthConfig = SynthConfig()) -> Dataset:
    """Deterministic synthetic dataset for ``cfg``."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    width = len(str(max(cfg.n_images - 1, 0)))
    images = []
    for i in range(cfg.n_images):
        n_gt = int(rng.integers(cfg.gts_per_image[0], cfg.gts_per_image[1] + 1))
        gt_boxes = _random_boxes(rng, n_gt, cfg)
        gt_classes = rng.integers(0, cfg.n_classes, size=n_gt)
        parts = [_jittered(rng, g, cfg.jittered_per_gt, cfg.jitter) for g in gt_boxes]
        parts.append(_random_boxes(rng, cfg.background_per_image, cfg))
        boxes = np.concatenate(parts) if parts else np.zeros((0, 4))
        boxes = boxes[rng.permutation(len(boxes))]
        wwidth = len(str(max(len(boxes) - 1, 0)))
        images.append(
            ImageRecord(
                f"img{i:0{width}d}",
                tuple(f"w{j:0{wwidth}d}" for j in range(len(boxes))),
                boxes,
                gt_boxes,
                gt_classes,
            )
        )
    return Dataset(tuple(images), cfg.n_classes)


def foreground_fraction(d: Dataset, threshold: float = 0.5) -> float:
    if d.n_windows == 0:
        return 0.0
    return float(d.foreground_mask(threshold).mean())


_GT_BOX = [0.0, 0.0, 10.0, 10.0]
_FAR_BOX = [100.0, 100.0, 110.0, 110.0]


def from_labels(labels: str, scores: Sequence[float] | None = None, missed: int = 0) -> tuple[Dataset, ScoreTable]:
    """Single-class fixture realising a ranked TP/FP label sequence.

    ``labels`` is a string over ``T`` and ``F`` in ranked order. Every detection
    sits alone in its own image, a ``T`` on top of that image's ground truth and
    an ``F`` far from everything. ``missed`` extra images hold a ground truth and
    no proposal. Scores default to evenly spaced values in (0, 1).
    """
    n = len(labels)
    if set(labels) - {"T", "F"}:
        raise ValueError("labels must use only 'T' and 'F'")
    if scores is None:
        scores = [(n - i) / (n + 1) for i in range(n)]
    if len(scores) != n:
        raise ValueError("one score per label required")
    images = []
    for i, lab in enumerate(labels):
        tp = lab == "T"
        images.append(
            ImageRecord(
                f"d{i:04d}",
                ("w0",),
                np.array([_GT_BOX if tp else _FAR_BOX]),
                np.array([_GT_BOX]) if tp else np.zeros((0, 4)),
                np.array([0]) if tp else np.zeros(0, dtype=np.int64),
            )
        )
    for k in range(missed):
        images.append(ImageRecord(f"m{k:04d}", (), np.zeros((0, 4)), np.array([_GT_BOX]), np.array([0])))
    return Dataset(tuple(images), 1), ScoreTable(np.asarray(scores, dtype=np.float64).reshape(-1, 1))


def random_instance(
    rng: np.random.Generator,
    max_windows: int = 12,
    max_gts: int = 4,
    n_classes: int = 1,
    max_images: int = 3,
    tie_prob: float = 0.2,
) -> tuple[Dataset, ScoreTable]:
    """Small random instance on a 100 x 100 canvas, for oracle comparisons.

    About half the windows are jittered ground-truth copies. With probability
    ``tie_prob`` scores are drawn from a coarse grid so that ties occur.
    """
    n_images = int(rng.integers(1, max_images + 1))
    n_windows = int(rng.integers(1, max_windows + 1))
    n_gts = int(rng.integers(0, max_gts + 1))
    small = SynthConfig(canvas=(100.0, 100.0), gt_size=(15.0, 50.0))
    gt_img = rng.integers(0, n_images, size=n_gts)
    gt_boxes = _random_boxes(rng, n_gts, small)
    gt_cls = rng.integers(0, n_classes, size=n_gts)
    win_img = rng.integers(0, n_images, size=n_windows)
    win_boxes = _random_boxes(rng, n_windows, small)
    for k in range(n_windows):
        own = np.flatnonzero(gt_img == win_img[k])
        if len(own) and rng.random() < 0.6:
            win_boxes[k] = _jittered(rng, gt_boxes[rng.choice(own)], 1, 0.3)[0]
    images = []
    for i in range(n_images):
        ws = np.flatnonzero(win_img == i)
        gs = np.flatnonzero(gt_img == i)
        images.append(
            ImageRecord(f"i{i}", tuple(f"w{j:02d}" for j in range(len(ws))), win_boxes[ws], gt_boxes[gs], gt_cls[gs])
        )
    d = Dataset(tuple(images), n_classes)
    if rng.random() < tie_prob:
        scores = rng.integers(0, 5, size=(d.n_windows, n_classes)) / 4.0
    else:
        scores = rng.uniform(-1.0, 1.0, size=(d.n_windows, n_classes))
    return d, ScoreTable(scores)
