"""Training loss for mean average precision after non-maximum suppression.

VOC-style evaluation, pseudo partial derivatives of piecewise-constant
functions, an NMS-aware step search that yields a pseudogradient of mAP with
respect to every window score, and a small SGD trainer over score tables.
"""

from .core import BoundingBox, Dataset, GroundTruthObject, ImageRecord, ProposalWindow, ScoreTable, iou, validate_dataset
from .estimator import MapScoreOptimizer
from .evaluation import (
    APVariant,
    EvalConfig,
    PRCurve,
    UndefinedAPError,
    average_precision,
    build_pr_curve,
    interpolate,
    match_detections,
    mean_ap,
)
from .loss import GradientField, LossConfig, clip_gradient, compute_loss, loss_and_gradient
from .nms import NmsConfig, NmsOutcome, run_nms
from .pseudograd import EstimatorConfig, EstimatorKind, StepProfile, mee, sde
from .steps import ScoreSteps, ap_delta, find_steps, nms_aware_steps
from .synth import SynthConfig, generate
from .trainer import TrainConfig, TrainHistory, sample_minibatch, sgd_step, train

__version__ = "0.1.0"

__all__ = [
    "APVariant",
    "BoundingBox",
    "Dataset",
    "EstimatorConfig",
    "EstimatorKind",
    "EvalConfig",
    "GradientField",
    "GroundTruthObject",
    "ImageRecord",
    "LossConfig",
    "MapScoreOptimizer",
    "NmsConfig",
    "NmsOutcome",
    "PRCurve",
    "ProposalWindow",
    "ScoreSteps",
    "ScoreTable",
    "StepProfile",
    "SynthConfig",
    "TrainConfig",
    "TrainHistory",
    "UndefinedAPError",
    "ap_delta",
    "average_precision",
    "build_pr_curve",
    "clip_gradient",
    "compute_loss",
    "find_steps",
    "generate",
    "interpolate",
    "iou",
    "loss_and_gradient",
    "match_detections",
    "mean_ap",
    "mee",
    "nms_aware_steps",
    "run_nms",
    "sample_minibatch",
    "sde",
    "sgd_step",
    "train",
    "validate_dataset",
]
