"""Ground-truth matching, precision/recall curves, AP (VOC2007 / VOC2012) and mAP.

Matching follows the literal rule: each detection is mapped to its
most-overlapping ground truth of the class in the same image (if the IoU exceeds
``match_iou``), and per ground truth only the highest-ranked mapped detection is
a true positive. AP is computed in exact rational arithmetic and converted to
float once, so every caller sees bit-identical values.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Hashable, Optional, Sequence

import numpy as np

from .core import BoundingBox, Dataset, GroundTruthObject, ScoreTable, iou, iou_matrix
from .nms import NmsConfig, class_order, dataset_nms

__all__ = [
    "APVariant",
    "EvalConfig",
    "UndefinedAPError",
    "DetectionLabel",
    "PRCurve",
    "match_detections",
    "build_pr_curve",
    "interpolate",
    "average_precision",
    "ap_from_tp_ranks",
    "mean_ap",
    "mean_over_valid",
    "evaluate_class",
    "best_gt",
    "ClassEvaluation",
    "evaluate_dataset",
    "write_pr_csv",
]


class APVariant(str, enum.Enum):
    VOC2007_11POINT = "voc2007"
    VOC2012_AREA = "voc2012"


class UndefinedAPError(ValueError):
    """AP requested for a class without any ground-truth instance."""


@dataclass(frozen=True)
class EvalConfig:
    match_iou: float = 0.5
    ap_variant: APVariant = APVariant.VOC2012_AREA

    def __post_init__(self):
        if not 0.0 < self.match_iou < 1.0:
            raise ValueError(f"match_iou must lie in (0, 1), got {self.match_iou}")
        object.__setattr__(self, "ap_variant", APVariant(self.ap_variant))


@dataclass(frozen=True)
class DetectionLabel:
    window_id: Hashable
    score: float
    kind: str  # "TP" or "FP"
    matched_gt: Optional[int] = None

    @property
    def is_tp(self) -> bool:
        return self.kind == "TP"


@dataclass
class PRCurve:
    recall: np.ndarray
    precision: np.ndarray
    n_gt: int
    is_tp: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    scores: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self) -> int:
        return len(self.recall)

    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.recall.tolist(), self.precision.tolist()))


def match_detections(
    dets: Sequence[tuple[Hashable, Hashable, BoundingBox, float]],
    gts: Sequence[GroundTruthObject],
    cfg: EvalConfig = EvalConfig(),
) -> list[DetectionLabel]:
    """Label ``(image_id, window_id, box, score)`` detections of one class.

    ``dets`` must already be in decreasing-score order; ``matched_gt`` indexes ``gts``.
    """
    scores = [float(d[3]) for d in dets]
    if any(b > a for a, b in zip(scores, scores[1:])):
        raise ValueError("detections must be sorted by decreasing score")
    claimed = set()
    labels = []
    for image_id, window_id, box, score in dets:
        best, best_iou = None, cfg.match_iou
        for k, g in enumerate(gts):
            if g.image_id != image_id:
                continue
            o = iou(box, g.box)
            if o > best_iou:
                best, best_iou = k, o
        if best is not None and best not in claimed:
            claimed.add(best)
            labels.append(DetectionLabel((image_id, window_id), float(score), "TP", best))
        else:
            labels.append(DetectionLabel((image_id, window_id), float(score), "FP", best))
    return labels


def build_pr_curve(labels: Sequence[DetectionLabel], n_gt: int) -> PRCurve:
    if n_gt <= 0:
        raise UndefinedAPError("AP is undefined without ground-truth instances")
    is_tp = np.array([lab.is_tp for lab in labels], dtype=bool)
    tp = np.cumsum(is_tp)
    rank = np.arange(1, len(is_tp) + 1)
    return PRCurve(
        recall=tp / n_gt,
        precision=tp / np.maximum(rank, 1) if len(rank) else np.zeros(0),
        n_gt=n_gt,
        is_tp=is_tp,
        scores=np.array([lab.score for lab in labels], dtype=np.float64),
    )


def interpolate(pr: PRCurve) -> PRCurve:
    """Replace each precision by the maximum precision at the same or any later point."""
    prec = np.maximum.accumulate(pr.precision[::-1])[::-1] if len(pr) else pr.precision.copy()
    return PRCurve(pr.recall.copy(), prec, pr.n_gt, pr.is_tp.copy(), pr.scores.copy())


def ap_from_tp_ranks(tp_ranks: Sequence[int], n_gt: int, variant: APVariant) -> float:
    """AP from the 1-based ranks of the true positives, in exact arithmetic.

    The interpolated precision at each recall level is the largest ``k / rank_k``
    over that and later true positives; VOC2012 sums those levels, VOC2007
    samples them at recall 0, 0.1, ..., 1.
    """
    if n_gt <= 0:
        raise UndefinedAPError("AP is undefined without ground-truth instances")
    m = len(tp_ranks)
    envelope = [Fraction(0)] * m
    best = Fraction(0)
    for k in range(m - 1, -1, -1):
        p = Fraction(k + 1, int(tp_ranks[k]))
        if p > best:
            best = p
        envelope[k] = best
    if APVariant(variant) is APVariant.VOC2012_AREA:
        total = sum(envelope, Fraction(0)) / n_gt
    else:
        total = Fraction(0)
        for i in range(11):
            k = max(1, -(-i * n_gt // 10))  # smallest k with k / n_gt >= i / 10
            if k <= m:
                total += envelope[k - 1]
        total /= 11
    return float(total)


def average_precision(pr: PRCurve, cfg: EvalConfig = EvalConfig()) -> float:
    """AP of a (raw or interpolated) curve; interpolation happens internally."""
    if pr.n_gt <= 0:
        raise UndefinedAPError("AP is undefined without ground-truth instances")
    if len(pr.is_tp) == len(pr):
        ranks = np.flatnonzero(pr.is_tp) + 1
    else:
        ranks = np.flatnonzero(np.diff(np.concatenate([[0.0], pr.recall])) > 0) + 1
    return ap_from_tp_ranks(ranks.tolist(), pr.n_gt, cfg.ap_variant)


# dataset-backed evaluation ----------------------------------------------------


def best_gt(d: Dataset, c: int, match_iou: float) -> np.ndarray:
    """Per window, the global index of its most-overlapping class-``c`` ground truth, or -1."""
    key = ("best_gt", int(c), float(match_iou))
    if key not in d._cache:
        out = np.full(d.n_windows, -1, dtype=np.int64)
        for i, im in enumerate(d.images):
            gsel = np.flatnonzero(im.gt_classes == c)
            if len(gsel) == 0 or len(im.boxes) == 0:
                continue
            ov = iou_matrix(im.boxes, im.gt_boxes[gsel])
            arg = np.argmax(ov, axis=1)
            hit = ov[np.arange(len(arg)), arg] > match_iou
            out[d.offsets[i]:d.offsets[i + 1]] = np.where(hit, d.gt_offsets[i] + gsel[arg], -1)
        d._cache[key] = out
    return d._cache[key]


@dataclass
class ClassEvaluation:
    """Forward pass for one class: NMS outcome, labeled detections and AP."""

    class_id: int
    n_gt: int
    suppressor: np.ndarray  # per window, -1 when retained
    detections: np.ndarray  # retained window indices in decreasing-score order
    is_tp: np.ndarray
    matched_gt: np.ndarray  # per detection, global gt index or -1
    ap: float  # nan when n_gt == 0

    def pr_curve(self, scores: np.ndarray) -> PRCurve:
        tp = np.cumsum(self.is_tp)
        rank = np.arange(1, len(tp) + 1)
        return PRCurve(tp / self.n_gt, tp / rank, self.n_gt, self.is_tp.copy(), scores[self.detections])


def evaluate_class(
    d: Dataset, scores: np.ndarray, c: int, nms_cfg: NmsConfig, eval_cfg: EvalConfig
) -> ClassEvaluation:
    scores = np.asarray(scores, dtype=np.float64)
    sup = dataset_nms(d, scores, nms_cfg)
    order = class_order(scores)
    dets = order[sup[order] == -1]
    mapped = best_gt(d, c, eval_cfg.match_iou)[dets]
    is_tp = np.zeros(len(dets), dtype=bool)
    seen = set()
    for i, g in enumerate(mapped.tolist()):
        if g >= 0 and g not in seen:
            seen.add(g)
            is_tp[i] = True
    n_gt = int(d.gt_counts()[c])
    ap = math.nan
    if n_gt > 0:
        ap = ap_from_tp_ranks((np.flatnonzero(is_tp) + 1).tolist(), n_gt, eval_cfg.ap_variant)
    return ClassEvaluation(c, n_gt, sup, dets, is_tp, mapped, ap)


def evaluate_dataset(
    scores: ScoreTable | np.ndarray, d: Dataset, nms_cfg: NmsConfig = NmsConfig(), eval_cfg: EvalConfig = EvalConfig()
) -> list[ClassEvaluation]:
    values = scores.values if isinstance(scores, ScoreTable) else np.asarray(scores, dtype=np.float64)
    if values.shape != (d.n_windows, d.n_classes):
        raise ValueError(f"score table shape {values.shape} does not match dataset ({d.n_windows}, {d.n_classes})")
    if not np.isfinite(values).all():
        raise ValueError("scores must be finite")
    return [evaluate_class(d, values[:, c], c, nms_cfg, eval_cfg) for c in range(d.n_classes)]


def mean_ap(
    scores: ScoreTable | np.ndarray, d: Dataset, nms_cfg: NmsConfig = NmsConfig(), eval_cfg: EvalConfig = EvalConfig()
) -> tuple[float, list[float]]:
    """mAP over classes with at least one ground truth; per-class AP is nan otherwise."""
    per_class = [ev.ap for ev in evaluate_dataset(scores, d, nms_cfg, eval_cfg)]
    return mean_over_valid(per_class), per_class


def mean_over_valid(per_class: Sequence[float]) -> float:
    """Mean of the per-class APs that are defined (not nan)."""
    valid = [ap for ap in per_class if not math.isnan(ap)]
    if not valid:
        raise UndefinedAPError("no class has any ground-truth instance")
    return sum(valid) / len(valid)


def write_pr_csv(path, pr: PRCurve) -> None:
    interp = interpolate(pr)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rank", "score", "kind", "recall", "precision", "interp_precision"])
        for i in range(len(pr)):
            w.writerow(
                [
                    i + 1,
                    repr(float(pr.scores[i])) if len(pr.scores) else "",
                    "TP" if pr.is_tp[i] else "FP",
                    repr(float(pr.recall[i])),
                    repr(float(pr.precision[i])),
                    repr(float(interp.precision[i])),
                ]
            )
