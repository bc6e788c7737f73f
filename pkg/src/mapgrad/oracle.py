"""Brute-force reference implementations.

The oracle functions share nothing with the fast path beyond the data model:
NMS, matching and AP are written out again in the most literal form, and step
locations are found by probing the whole pipeline at every score midpoint.
Only meant for small instances. :func:`gradcheck` and :func:`reference_map`
are the two places that deliberately call into the fast path.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from .core import Dataset, ScoreTable
from .evaluation import APVariant, EvalConfig, UndefinedAPError, best_gt, evaluate_class, mean_ap
from .nms import NmsConfig
from .pseudograd import EstimatorConfig, EstimatorKind, estimate
from .steps import nms_aware_steps

__all__ = [
    "OracleStepResult",
    "oracle_ap",
    "oracle_pipeline_ap",
    "oracle_steps",
    "oracle_class_steps",
    "chain_free_mask",
    "prune_to_chain_free",
    "reference_scores",
    "reference_map",
    "GradcheckEntry",
    "GradcheckReport",
    "gradcheck",
]


def _box_iou(a, b) -> float:
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def oracle_ap(dets: Sequence[tuple], gts: Sequence[tuple], cfg: EvalConfig = EvalConfig()) -> float:
    """AP of ``(image_id, tie_key, box, score)`` detections against ``(image_id, box)`` ground truths.

    Detections are ranked by decreasing score, then increasing ``tie_key``.
    """
    if len(gts) == 0:
        raise UndefinedAPError("no ground truth")
    ranked = sorted(dets, key=lambda d: (-d[3], d[1]))
    taken = [False] * len(gts)
    tp = []
    for image_id, _, box, _ in ranked:
        best, best_o = -1, -1.0
        for k, (g_img, g_box) in enumerate(gts):
            if g_img == image_id:
                o = _box_iou(box, g_box)
                if o > best_o:
                    best, best_o = k, o
        if best >= 0 and best_o > cfg.match_iou and not taken[best]:
            taken[best] = True
            tp.append(1)
        else:
            tp.append(0)

    n_gt = len(gts)
    rec, prec = [], []
    hits = 0
    for i, t in enumerate(tp):
        hits += t
        rec.append(Fraction(hits, n_gt))
        prec.append(Fraction(hits, i + 1))

    if APVariant(cfg.ap_variant) is APVariant.VOC2007_11POINT:
        total = Fraction(0)
        for i in range(11):
            t = Fraction(i, 10)
            above = [p for r, p in zip(rec, prec) if r >= t]
            total += max(above) if above else Fraction(0)
        return float(total / 11)

    mrec = [Fraction(0)] + rec + [Fraction(1)]
    mpre = [Fraction(0)] + prec + [Fraction(0)]
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    area = Fraction(0)
    for i in range(len(mrec) - 1):
        if mrec[i + 1] != mrec[i]:
            area += (mrec[i + 1] - mrec[i]) * mpre[i + 1]
    return float(area)


class _Instance:
    """Per-class view of a dataset with cached pairwise IoUs."""

    def __init__(self, d: Dataset, c: int):
        self.c = c
        self.boxes = d.boxes.tolist()
        self.image = d.window_image.tolist()
        self.by_image: dict[int, list[int]] = {}
        for w, img in enumerate(self.image):
            self.by_image.setdefault(img, []).append(w)
        self.overlap = {}
        for img, ws in self.by_image.items():
            for a in ws:
                for b in ws:
                    if a < b:
                        o = _box_iou(self.boxes[a], self.boxes[b])
                        self.overlap[(a, b)] = self.overlap[(b, a)] = o
        self.gts = [
            (int(img), box)
            for img, cls, box in zip(d.gt_image.tolist(), d.gt_classes.tolist(), d.gt_boxes.tolist())
            if cls == c
        ]

    def retained(self, scores, nms_thr: float) -> list[int]:
        kept = []
        for ws in self.by_image.values():
            marked = {}
            for w in sorted(ws, key=lambda w: (-scores[w], w)):
                if w in marked:
                    continue
                marked[w] = True
                kept.append(w)
                for v in ws:
                    if v not in marked and self.overlap[(w, v)] > nms_thr:
                        marked[v] = False
        return kept

    def ap(self, scores, nms_cfg: NmsConfig, eval_cfg: EvalConfig) -> float:
        dets = [(self.image[w], w, self.boxes[w], scores[w]) for w in self.retained(scores, nms_cfg.overlap_threshold)]
        return oracle_ap(dets, self.gts, eval_cfg)


def oracle_pipeline_ap(
    scores_c: np.ndarray, d: Dataset, c: int, nms_cfg: NmsConfig = NmsConfig(), eval_cfg: EvalConfig = EvalConfig()
) -> float:
    """Class AP through literal NMS, matching and PR-area computation."""
    return _Instance(d, c).ap(list(map(float, scores_c)), nms_cfg, eval_cfg)


@dataclass(frozen=True)
class OracleStepResult:
    window: int
    class_id: int
    score: float
    current_ap: float
    left: Optional[tuple[float, float]]  # (step location, AP below it)
    right: Optional[tuple[float, float]]  # (step location, AP above it)

    @property
    def delta_plus(self) -> Optional[float]:
        return None if self.right is None else self.right[0] - self.score

    @property
    def delta_minus(self) -> Optional[float]:
        return None if self.left is None else self.score - self.left[0]


def oracle_steps(
    window: int,
    c: int,
    scores: ScoreTable | np.ndarray,
    d: Dataset,
    nms_cfg: NmsConfig = NmsConfig(),
    eval_cfg: EvalConfig = EvalConfig(),
    _instance: _Instance | None = None,
) -> OracleStepResult:
    """Nearest AP change on each side of one window's score, by probing the full pipeline."""
    values = scores.values if isinstance(scores, ScoreTable) else np.asarray(scores)
    col = [float(v) for v in values[:, c]]
    inst = _instance or _Instance(d, c)
    s = col[window]
    cur = inst.ap(col, nms_cfg, eval_cfg)
    others = sorted({v for i, v in enumerate(col) if i != window})

    def probe(x: float) -> float:
        trial = list(col)
        trial[window] = x
        return inst.ap(trial, nms_cfg, eval_cfg)

    def scan(levels: list[float], outward: float) -> Optional[tuple[float, float]]:
        for k, v in enumerate(levels):
            x = (v + levels[k + 1]) / 2 if k + 1 < len(levels) else v + outward
            ap = probe(x)
            if ap != cur:
                return v, ap
        return None

    right = scan([v for v in others if v >= s], 1.0)
    left = scan([v for v in reversed(others) if v <= s], -1.0)
    return OracleStepResult(window, c, s, cur, left, right)


def oracle_class_steps(
    c: int, scores: ScoreTable | np.ndarray, d: Dataset, nms_cfg: NmsConfig = NmsConfig(), eval_cfg: EvalConfig = EvalConfig()
) -> list[OracleStepResult]:
    inst = _Instance(d, c)
    return [oracle_steps(w, c, scores, d, nms_cfg, eval_cfg, inst) for w in range(d.n_windows)]


def _mapped_gt(d: Dataset, w: int, c: int, match_iou: float) -> int:
    img = int(d.window_image[w])
    box = d.boxes[w].tolist()
    best, best_o = -1, -1.0
    for k in range(int(d.gt_offsets[img]), int(d.gt_offsets[img + 1])):
        if d.gt_classes[k] == c:
            o = _box_iou(box, d.gt_boxes[k].tolist())
            if o > best_o:
                best, best_o = k, o
    return best if best_o > match_iou else -1


def chain_free_mask(d: Dataset, nms_cfg: NmsConfig = NmsConfig(), eval_cfg: EvalConfig = EvalConfig()) -> np.ndarray:
    """Windows free of multi-window NMS interactions.

    A window qualifies when it overlaps (above the NMS threshold) at most one
    other window, that partner overlaps nothing else, and both map to the same
    ground truth for every class. For such windows the fast step search is exact.
    """
    boxes = d.boxes.tolist()
    image = d.window_image.tolist()
    partners: list[list[int]] = [[] for _ in boxes]
    for a in range(len(boxes)):
        for b in range(a + 1, len(boxes)):
            if image[a] == image[b] and _box_iou(boxes[a], boxes[b]) > nms_cfg.overlap_threshold:
                partners[a].append(b)
                partners[b].append(a)
    ok = np.ones(len(boxes), dtype=bool)
    for a, ps in enumerate(partners):
        if len(ps) > 1:
            ok[a] = False
        elif len(ps) == 1:
            b = ps[0]
            if len(partners[b]) > 1 or any(
                _mapped_gt(d, a, c, eval_cfg.match_iou) != _mapped_gt(d, b, c, eval_cfg.match_iou)
                for c in range(d.n_classes)
            ):
                ok[a] = False
    return ok


def prune_to_chain_free(
    d: Dataset, scores: ScoreTable, nms_cfg: NmsConfig = NmsConfig(), eval_cfg: EvalConfig = EvalConfig()
) -> tuple[Dataset, ScoreTable]:
    """Drop windows one at a time until every remaining window is chain-free."""
    keep = np.ones(d.n_windows, dtype=bool)
    while True:
        sub = d.subset(range(len(d.images)), keep)
        bad = np.flatnonzero(~chain_free_mask(sub, nms_cfg, eval_cfg))
        if len(bad) == 0:
            return sub, ScoreTable(scores.values[keep])
        keep[np.flatnonzero(keep)[bad[0]]] = False


def reference_scores(d: Dataset) -> ScoreTable:
    """A hand-built good score table: each ground truth's best proposal scores high.

    Best proposals are ranked by IoU with their ground truth (higher IoU, higher
    score); every other window gets score 0.
    """
    values = np.zeros((d.n_windows, d.n_classes))
    for c in range(d.n_classes):
        picks = []
        for i, im in enumerate(d.images):
            if len(im.boxes) == 0:
                continue
            for g_box, cls in zip(im.gt_boxes.tolist(), im.gt_classes.tolist()):
                if cls != c:
                    continue
                ious = [_box_iou(b, g_box) for b in im.boxes.tolist()]
                j = int(np.argmax(ious))
                picks.append((ious[j], int(d.offsets[i]) + j))
        picks.sort(key=lambda t: (-t[0], t[1]))
        for rank, (_, w) in enumerate(picks):
            values[w, c] = max(values[w, c], 1.0 + len(picks) - rank)
    return ScoreTable(values)


def reference_map(d: Dataset, nms_cfg: NmsConfig = NmsConfig(), eval_cfg: EvalConfig = EvalConfig()) -> float:
    """mAP of :func:`reference_scores` through the full pipeline."""
    if np.any(d.gt_counts() == 0):
        raise UndefinedAPError("reference mAP needs at least one ground truth per class")
    return mean_ap(reference_scores(d), d, nms_cfg, eval_cfg)[0]


Step = Optional[tuple[float, float]]


@dataclass(frozen=True)
class GradcheckEntry:
    window: int
    class_id: int
    chain_free: bool
    fast_left: Step
    fast_right: Step
    oracle_left: Step
    oracle_right: Step
    fast_grad: tuple[float, float]  # (SDE, MEE) of the class AP
    oracle_grad: tuple[float, float]
    ok: bool


@dataclass
class GradcheckReport:
    entries: list[GradcheckEntry]
    tolerance: float

    @property
    def mismatches(self) -> list[GradcheckEntry]:
        """Disagreements on chain-free windows, where the fast path must be exact."""
        return [e for e in self.entries if not e.ok and e.chain_free]

    @property
    def chain_disagreements(self) -> list[GradcheckEntry]:
        """Disagreements explained by ignored NMS chains."""
        return [e for e in self.entries if not e.ok and not e.chain_free]

    @property
    def passed(self) -> bool:
        return not self.mismatches


def _close(a: float, b: float, tol: float) -> bool:
    # relative for large values: floored tie distances amplify last-bit AP noise
    return abs(a - b) <= tol * max(1.0, abs(a), abs(b))


def _same_step(a: Step, b: Step, tol: float) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return _close(a[0], b[0], tol) and _close(a[1], b[1], tol)


def _both_estimates(left: Step, mid: float, right: Step, x: float, cfg: EstimatorConfig) -> tuple[float, float]:
    dm, fl = (x - left[0], left[1]) if left else (np.nan, np.nan)
    dp, fr = (right[0] - x, right[1]) if right else (np.nan, np.nan)
    out = []
    for kind in (EstimatorKind.SDE, EstimatorKind.MEE):
        c = EstimatorConfig(kind, cfg.flat_region_delta_min, cfg.min_delta)
        out.append(float(estimate(dm, fl, mid, dp, fr, c)))
    return out[0], out[1]


def gradcheck(
    d: Dataset,
    scores: ScoreTable | np.ndarray,
    nms_cfg: NmsConfig = NmsConfig(),
    eval_cfg: EvalConfig = EvalConfig(),
    estimator_cfg: EstimatorConfig = EstimatorConfig(),
    tol: float = 1e-9,
) -> GradcheckReport:
    """Compare fast-path steps and AP pseudo-derivatives with the oracle for every window and class."""
    values = scores.values if isinstance(scores, ScoreTable) else np.asarray(scores, dtype=np.float64)
    free = chain_free_mask(d, nms_cfg, eval_cfg)
    entries = []
    for c in range(d.n_classes):
        if d.gt_counts()[c] == 0:
            continue
        col = values[:, c]
        ev = evaluate_class(d, col, c, nms_cfg, eval_cfg)
        st = nms_aware_steps(ev, col, best_gt(d, c, eval_cfg.match_iou), eval_cfg.ap_variant)
        inst = _Instance(d, c)
        for k, w in enumerate(st.windows.tolist()):
            x = float(col[w])
            fr = None if np.isnan(st.delta_plus[k]) else (x + float(st.delta_plus[k]), float(st.ap_plus[k]))
            fl = None if np.isnan(st.delta_minus[k]) else (x - float(st.delta_minus[k]), float(st.ap_minus[k]))
            o = oracle_steps(w, c, values, d, nms_cfg, eval_cfg, inst)
            fg = _both_estimates(fl, st.current_ap, fr, x, estimator_cfg)
            og = _both_estimates(o.left, o.current_ap, o.right, x, estimator_cfg)
            ok = (
                _same_step(fl, o.left, tol)
                and _same_step(fr, o.right, tol)
                and all(_close(a, b, tol) for a, b in zip(fg, og))
            )
            entries.append(GradcheckEntry(w, c, bool(free[w]), fl, fr, o.left, o.right, fg, og, ok))
    return GradcheckReport(entries, tol)
