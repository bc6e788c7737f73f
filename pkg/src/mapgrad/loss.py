"""The training loss and its pseudogradient with respect to every window score.

``L = -log(mAP + eps) + lambda * sum |s|^4`` where mAP averages the per-class
APs after NMS over the classes that have ground truth in the batch. The AP
part of the gradient comes from the pseudo partial derivatives of each class's
AP, read off the nearest steps found by :mod:`mapgrad.steps`.
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import Dataset, ScoreTable
from .evaluation import ClassEvaluation, EvalConfig, best_gt, evaluate_class, mean_over_valid
from .nms import NmsConfig, overlap_masks
from .pseudograd import EstimatorConfig, estimate
from .steps import ScoreSteps, nms_aware_steps

__all__ = [
    "LossConfig",
    "GradientField",
    "LossResult",
    "compute_loss",
    "loss_and_gradient",
    "clip_gradient",
    "class_ap_gradient",
    "thread_count",
]


@dataclass(frozen=True)
class LossConfig:
    epsilon_log: float = 0.01
    lambda_reg: float = 1e-4
    clip_threshold: float = 1.0  # math.inf disables clipping
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    nms_cfg: NmsConfig = field(default_factory=NmsConfig)
    eval_cfg: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if not self.epsilon_log > 0:
            raise ValueError("epsilon_log must be positive")
        if not self.lambda_reg >= 0:
            raise ValueError("lambda_reg must be non-negative")
        if not self.clip_threshold > 0:
            raise ValueError("clip_threshold must be positive")


@dataclass
class GradientField:
    """Loss gradient for every (window, class) score, aligned with a score table."""

    values: np.ndarray
    steps: list[Optional[ScoreSteps]] = field(default_factory=list)

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def write_csv(self, path, d: Dataset, scores: ScoreTable | np.ndarray) -> None:
        """Dump one row per (window, class); missing steps are left blank."""
        values = scores.values if isinstance(scores, ScoreTable) else np.asarray(scores)
        n, k = self.values.shape
        cols = {}
        for c, st in enumerate(self.steps):
            if st is None:
                continue
            block = np.full((n, 4), np.nan)
            block[st.windows] = np.stack([st.delta_plus, st.ap_plus, st.delta_minus, st.ap_minus], axis=1)
            cols[c] = block

        def cell(v: float) -> str:
            return "" if math.isnan(v) else repr(float(v))

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["image", "window", "class", "score", "delta_plus", "ap_plus", "delta_minus", "ap_minus", "grad"])
            for i in range(n):
                image, window = d.window_key(i)
                for c in range(k):
                    steps = cols[c][i] if c in cols else [math.nan] * 4
                    w.writerow([image, window, c, repr(float(values[i, c])), *map(cell, steps), repr(float(self.values[i, c]))])


@dataclass
class LossResult:
    loss: float
    map: float
    per_class_ap: list[float]
    grad: GradientField
    ap_grad: np.ndarray  # pseudo partial derivatives of each class AP
    clipped_fraction: float


def thread_count(n_tasks: int) -> int:
    """Worker count from ``MAPGRAD_THREADS`` (0 or unset: one per CPU), capped by ``n_tasks``."""
    raw = os.environ.get("MAPGRAD_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"MAPGRAD_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise ValueError("MAPGRAD_THREADS must be >= 0")
    if n == 0:
        n = os.cpu_count() or 1
    return max(1, min(n, n_tasks))


def class_ap_gradient(
    d: Dataset, scores_c: np.ndarray, c: int, cfg: LossConfig
) -> tuple[ClassEvaluation, Optional[ScoreSteps], np.ndarray]:
    """Forward pass and pseudo partial derivatives of one class's AP."""
    ev = evaluate_class(d, scores_c, c, cfg.nms_cfg, cfg.eval_cfg)
    grad = np.zeros(len(scores_c))
    if ev.n_gt == 0:
        return ev, None, grad
    st = nms_aware_steps(ev, scores_c, best_gt(d, c, cfg.eval_cfg.match_iou), cfg.eval_cfg.ap_variant)
    grad[st.windows] = estimate(st.delta_minus, st.ap_minus, st.current_ap, st.delta_plus, st.ap_plus, cfg.estimator)
    return ev, st, grad


def clip_gradient(grad: GradientField | np.ndarray, threshold: float) -> GradientField | np.ndarray:
    """Clamp every element to ``[-threshold, threshold]``."""
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    if isinstance(grad, GradientField):
        return GradientField(np.clip(grad.values, -threshold, threshold), grad.steps)
    return np.clip(np.asarray(grad, dtype=np.float64), -threshold, threshold)


def compute_loss(scores: ScoreTable | np.ndarray, batch: Dataset, cfg: LossConfig = LossConfig()) -> LossResult:
    values = scores.values if isinstance(scores, ScoreTable) else np.asarray(scores, dtype=np.float64)
    if values.shape != (batch.n_windows, batch.n_classes):
        raise ValueError(f"score table shape {values.shape} does not match batch ({batch.n_windows}, {batch.n_classes})")
    if not np.isfinite(values).all():
        raise ValueError("scores must be finite")

    overlap_masks(batch, cfg.nms_cfg.overlap_threshold)  # warm the shared cache before threading
    k = batch.n_classes
    work = lambda c: class_ap_gradient(batch, values[:, c], c, cfg)  # noqa: E731
    workers = thread_count(k)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(work, range(k)))
    else:
        results = [work(c) for c in range(k)]

    per_class = [ev.ap for ev, _, _ in results]
    m = mean_over_valid(per_class)
    n_valid = sum(not math.isnan(ap) for ap in per_class)
    ap_grad = np.stack([g for _, _, g in results], axis=1) if k else np.zeros_like(values)

    with np.errstate(over="ignore", invalid="ignore"):
        # diverging runs must report inf, not raise
        reg = cfg.lambda_reg * float(np.sum(values**4))
        total = -ap_grad / (n_valid * (m + cfg.epsilon_log)) + 4.0 * cfg.lambda_reg * values**3
    loss = -math.log(m + cfg.epsilon_log) + reg
    clipped = float(np.mean(np.abs(total) > cfg.clip_threshold)) if total.size else 0.0
    if math.isfinite(cfg.clip_threshold):
        total = np.clip(total, -cfg.clip_threshold, cfg.clip_threshold)
    grad = GradientField(total, [st for _, st, _ in results])
    return LossResult(loss, m, per_class, grad, ap_grad, clipped)


def loss_and_gradient(
    scores: ScoreTable | np.ndarray, batch: Dataset, cfg: LossConfig = LossConfig()
) -> tuple[float, GradientField, float]:
    """``(loss, gradient, mAP)`` for a score table over ``batch``."""
    r = compute_loss(scores, batch, cfg)
    return r.loss, r.grad, r.map
