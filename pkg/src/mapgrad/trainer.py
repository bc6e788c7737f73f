"""SGD with momentum over a free score table.

Each iteration samples a minibatch of images, subsamples their windows so that
foreground windows make up about ``fg_fraction`` of the batch, and takes one
momentum step along the clipped loss gradient of that batch.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .core import Dataset, ScoreTable
from .evaluation import UndefinedAPError, mean_ap
from .loss import GradientField, LossConfig, compute_loss

__all__ = ["TrainConfig", "TrainHistory", "Minibatch", "sample_minibatch", "sgd_step", "train"]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    iterations: int = 500
    minibatch_images: int = 8
    fg_fraction: float = 0.05
    loss_cfg: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    eval_every: int = 25
    init_scale: float = 0.01
    # runs stop once any score magnitude exceeds this
    divergence_limit: float = 1e6

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if not 0 <= self.fg_fraction <= 1:
            raise ValueError("fg_fraction must lie in [0, 1]")
        if self.iterations < 0 or self.minibatch_images < 1 or self.eval_every < 1:
            raise ValueError("iterations must be >= 0, minibatch_images and eval_every >= 1")
        if self.init_scale < 0:
            raise ValueError("init_scale must be non-negative")


@dataclass
class TrainHistory:
    iteration: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    batch_map: list[float] = field(default_factory=list)
    full_map: list[float] = field(default_factory=list)  # nan when not sampled
    grad_norm: list[float] = field(default_factory=list)
    clipped_fraction: list[float] = field(default_factory=list)
    max_abs_score: list[float] = field(default_factory=list)
    initial_map: float = math.nan
    diverged_at: int | None = None

    def __len__(self) -> int:
        return len(self.iteration)

    @property
    def final_map(self) -> float:
        sampled = [v for v in self.full_map if not math.isnan(v)]
        return sampled[-1] if sampled else self.initial_map

    def healthy(self, limit: float = 1e6) -> bool:
        """False once the loss went infinite or any score magnitude exceeded ``limit``.

        A nan loss marks a skipped batch without ground truth and does not count.
        """
        if self.diverged_at is not None:
            return False
        return not any(math.isinf(v) for v in self.loss) and all(v <= limit for v in self.max_abs_score)

    def write_csv(self, path) -> None:
        def cell(v: float) -> str:
            return "" if math.isnan(v) else repr(float(v))

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "loss", "batch_map", "full_map", "grad_norm", "clipped_fraction"])
            for row in zip(self.iteration, self.loss, self.batch_map, self.full_map, self.grad_norm, self.clipped_fraction):
                w.writerow([row[0], *map(cell, row[1:])])


@dataclass
class Minibatch:
    dataset: Dataset
    windows: np.ndarray  # dense indices into the full dataset, in batch order
    n_foreground: int

    @property
    def fg_fraction(self) -> float:
        return self.n_foreground / len(self.windows) if len(self.windows) else 0.0


def _foreground(d: Dataset) -> np.ndarray:
    if "fg_mask" not in d._cache:
        d._cache["fg_mask"] = d.foreground_mask(0.5)
    return d._cache["fg_mask"]


def sample_minibatch(d: Dataset, cfg: TrainConfig, rng: np.random.Generator) -> tuple[Minibatch, np.random.Generator]:
    """Draw images without replacement, then thin windows toward ``cfg.fg_fraction``.

    All ground truths of the chosen images are kept. Whichever of foreground
    or background is in short supply is kept whole and the other is subsampled.
    """
    if not d.images:
        raise ValueError("cannot sample from an empty dataset")
    n_img = min(cfg.minibatch_images, len(d.images))
    images = np.sort(rng.choice(len(d.images), size=n_img, replace=False))
    fg_all = _foreground(d)
    pool = np.concatenate([np.arange(d.offsets[i], d.offsets[i + 1]) for i in images]).astype(np.int64)
    fg = pool[fg_all[pool]]
    bg = pool[~fg_all[pool]]
    f = cfg.fg_fraction
    n_f, n_b = len(fg), len(bg)
    if f >= 1.0:
        keep_f, keep_b = n_f, 0
    elif f <= 0.0:
        keep_f, keep_b = 0, n_b
    elif n_f + n_b and n_f / (n_f + n_b) >= f:
        keep_b = n_b
        keep_f = min(n_f, int(round(f * n_b / (1.0 - f))))
    else:
        keep_f = n_f
        keep_b = min(n_b, int(round(n_f * (1.0 - f) / f)))
    chosen = np.concatenate(
        [rng.choice(fg, size=keep_f, replace=False), rng.choice(bg, size=keep_b, replace=False)]
    ).astype(np.int64)
    mask = np.zeros(d.n_windows, dtype=bool)
    mask[chosen] = True
    windows = pool[mask[pool]]
    return Minibatch(d.subset(images, mask), windows, int(keep_f)), rng


def _grad_array(grad, shape) -> np.ndarray:
    if grad is None:
        return np.zeros(shape)
    if isinstance(grad, GradientField):
        return grad.values
    if isinstance(grad, Mapping):
        out = np.zeros(shape)
        for (w, c), g in grad.items():
            out[w, c] = g
        return out
    return np.asarray(grad, dtype=np.float64)


def sgd_step(params, grad, velocity, lr: float, mu: float):
    """One momentum step: ``v' = mu * v - lr * g`` then ``s' = s + v'``.

    ``grad`` may be an array, a :class:`GradientField` or a mapping from
    ``(window, class)`` to value; missing entries count as zero.
    """
    table = isinstance(params, ScoreTable)
    s = params.values if table else np.asarray(params, dtype=np.float64)
    g = _grad_array(grad, s.shape)
    v = np.zeros_like(s) if velocity is None else np.asarray(velocity, dtype=np.float64)
    if g.shape != s.shape or v.shape != s.shape:
        raise ValueError("params, grad and velocity shapes differ")
    with np.errstate(over="ignore", invalid="ignore"):
        v_new = mu * v - lr * g
        s_new = s + v_new
    return (ScoreTable(s_new) if table else s_new), v_new


def train(d: Dataset, cfg: TrainConfig = TrainConfig(), init: ScoreTable | None = None) -> tuple[ScoreTable, TrainHistory]:
    rng = np.random.default_rng(cfg.seed)
    if init is None:
        params = rng.uniform(-cfg.init_scale, cfg.init_scale, size=(d.n_windows, d.n_classes))
    else:
        params = init.values.copy()
    velocity = np.zeros_like(params)
    hist = TrainHistory()
    lc = cfg.loss_cfg

    def full_map(p: np.ndarray) -> float:
        return mean_ap(p, d, lc.nms_cfg, lc.eval_cfg)[0]

    hist.initial_map = full_map(params)
    for it in range(cfg.iterations):
        batch, rng = sample_minibatch(d, cfg, rng)
        try:
            res = compute_loss(params[batch.windows], batch.dataset, lc)
        except UndefinedAPError:
            # no ground truth in this batch: nothing to learn from it
            loss, bmap, gnorm, clipped = math.nan, math.nan, 0.0, 0.0
            grad = None
        else:
            loss, bmap, gnorm, clipped = res.loss, res.map, res.grad.norm(), res.clipped_fraction
            grad = np.zeros_like(params)
            grad[batch.windows] = res.grad.values
        params, velocity = sgd_step(params, grad, velocity, cfg.learning_rate, cfg.momentum)
        peak = float(np.max(np.abs(params))) if params.size else 0.0
        finite = math.isfinite(peak)
        sample = finite and peak <= cfg.divergence_limit and ((it + 1) % cfg.eval_every == 0 or it + 1 == cfg.iterations)
        hist.iteration.append(it)
        hist.loss.append(loss)
        hist.batch_map.append(bmap)
        hist.full_map.append(full_map(params) if sample else math.nan)
        hist.grad_norm.append(gnorm)
        hist.clipped_fraction.append(clipped)
        hist.max_abs_score.append(peak if finite else math.inf)
        if not finite or peak > cfg.divergence_limit or (not math.isnan(loss) and not math.isfinite(loss)):
            hist.diverged_at = it
            break
    return ScoreTable(params), hist
