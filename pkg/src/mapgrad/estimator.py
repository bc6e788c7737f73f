"""scikit-learn style wrapper around the score-table trainer.

The learned parameters are one score per (window, class) of the dataset seen
by :meth:`MapScoreOptimizer.fit`, so ``predict`` and ``score`` only accept that
same dataset (or one with identical windows).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .core import Dataset
from .evaluation import APVariant, EvalConfig, mean_ap
from .loss import LossConfig
from .nms import NmsConfig
from .pseudograd import EstimatorConfig, EstimatorKind
from .trainer import TrainConfig, train
from .validation import check_dataset

__all__ = ["MapScoreOptimizer"]


class MapScoreOptimizer(BaseEstimator):
    """Fit window scores that maximise mAP after NMS by pseudogradient SGD.

    Parameters mirror :class:`TrainConfig` and :class:`LossConfig`; after
    ``fit`` the estimator exposes ``scores_``, ``history_`` and ``n_classes_``.
    """

    def __init__(
        self,
        estimator: str = "mee",
        learning_rate: float = 0.05,
        momentum: float = 0.9,
        iterations: int = 500,
        minibatch_images: int = 8,
        fg_fraction: float = 0.05,
        epsilon_log: float = 0.01,
        lambda_reg: float = 1e-4,
        clip_threshold: float = 1.0,
        flat_region_delta_min: float = 0.05,
        nms_threshold: float = 0.3,
        match_iou: float = 0.5,
        ap_variant: str = "voc2012",
        eval_every: int = 25,
        random_state: int = 0,
    ):
        self.estimator = estimator
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.iterations = iterations
        self.minibatch_images = minibatch_images
        self.fg_fraction = fg_fraction
        self.epsilon_log = epsilon_log
        self.lambda_reg = lambda_reg
        self.clip_threshold = clip_threshold
        self.flat_region_delta_min = flat_region_delta_min
        self.nms_threshold = nms_threshold
        self.match_iou = match_iou
        self.ap_variant = ap_variant
        self.eval_every = eval_every
        self.random_state = random_state

    def _loss_config(self) -> LossConfig:
        return LossConfig(
            epsilon_log=self.epsilon_log,
            lambda_reg=self.lambda_reg,
            clip_threshold=self.clip_threshold,
            estimator=EstimatorConfig(EstimatorKind(self.estimator), self.flat_region_delta_min),
            nms_cfg=NmsConfig(self.nms_threshold),
            eval_cfg=EvalConfig(self.match_iou, APVariant(self.ap_variant)),
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            iterations=self.iterations,
            minibatch_images=self.minibatch_images,
            fg_fraction=self.fg_fraction,
            loss_cfg=self._loss_config(),
            seed=self.random_state,
            eval_every=self.eval_every,
        )

    def fit(self, X: Dataset, y=None) -> "MapScoreOptimizer":
        d = check_dataset(X)
        self.scores_, self.history_ = train(d, self.train_config())
        self.n_classes_ = d.n_classes
        self.window_keys_ = [d.window_key(i) for i in range(d.n_windows)]
        return self

    def _check_same_windows(self, X: Dataset) -> Dataset:
        check_is_fitted(self, "scores_")
        d = check_dataset(X)
        if d.n_classes != self.n_classes_ or [d.window_key(i) for i in range(d.n_windows)] != self.window_keys_:
            raise ValueError("scores were fitted on a dataset with different windows")
        return d

    def predict(self, X: Dataset) -> np.ndarray:
        """The fitted ``(n_windows, n_classes)`` score array."""
        self._check_same_windows(X)
        return self.scores_.values.copy()

    def score(self, X: Dataset, y=None) -> float:
        """mAP of the fitted scores on ``X``."""
        d = self._check_same_windows(X)
        cfg = self._loss_config()
        return mean_ap(self.scores_, d, cfg.nms_cfg, cfg.eval_cfg)[0]
