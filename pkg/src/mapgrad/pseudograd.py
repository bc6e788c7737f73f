"""Pseudo partial derivatives of piecewise-constant functions of one variable.

Both estimators read a local :class:`StepProfile`: the value on the plateau
containing ``x`` and, on each side, the position of the nearest step and the
plateau value just past it.

* SDE, the symmetric difference estimator: the mean of the right slope
  ``(f_right - mid) / (x_R - x)`` and the left slope ``(mid - f_left) / (x - x_L)``.
  A missing side contributes a slope of 0.
* MEE, the mean envelope estimator: the mean slope of the local upper and lower
  piecewise-linear envelopes over the plateau, ``(f_right - f_left) / (2 (x_R - x_L))``.
  When only one step exists it falls back to SDE with every distance bounded
  below by ``flat_region_delta_min``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

__all__ = [
    "EstimatorKind",
    "EstimatorConfig",
    "StepProfile",
    "sde",
    "mee",
    "estimate",
    "sde_array",
    "mee_array",
    "envelope_slopes",
]


class EstimatorKind(str, enum.Enum):
    SDE = "sde"
    MEE = "mee"


@dataclass(frozen=True)
class EstimatorConfig:
    kind: EstimatorKind = EstimatorKind.MEE
    flat_region_delta_min: float = 0.05
    # guards against zero distances when scores tie
    min_delta: float = 1e-9

    def __post_init__(self):
        object.__setattr__(self, "kind", EstimatorKind(self.kind))
        if not self.flat_region_delta_min > 0:
            raise ValueError("flat_region_delta_min must be positive")
        if not self.min_delta > 0:
            raise ValueError("min_delta must be positive")


@dataclass(frozen=True)
class StepProfile:
    x: float
    mid_value: float
    left_step: Optional[tuple[float, float]] = None  # (x_L, f_left)
    right_step: Optional[tuple[float, float]] = None  # (x_R, f_right)

    def __post_init__(self):
        if self.left_step is not None:
            if not self.left_step[0] < self.x:
                raise ValueError("left step must lie below x")
            if self.left_step[1] == self.mid_value:
                raise ValueError("left step must change the value")
        if self.right_step is not None:
            if not self.right_step[0] > self.x:
                raise ValueError("right step must lie above x")
            if self.right_step[1] == self.mid_value:
                raise ValueError("right step must change the value")

    def arrays(self):
        """Distances and values in the vectorised layout (nan marks a missing side)."""
        dm, fl = (self.x - self.left_step[0], self.left_step[1]) if self.left_step else (math.nan, math.nan)
        dp, fr = (self.right_step[0] - self.x, self.right_step[1]) if self.right_step else (math.nan, math.nan)
        return tuple(np.array([v], dtype=np.float64) for v in (dm, fl, self.mid_value, dp, fr))


def sde_array(delta_minus, f_left, mid, delta_plus, f_right, min_delta: float = 1e-9) -> np.ndarray:
    """Vectorised SDE; ``nan`` distances mark missing steps."""
    delta_minus, f_left, mid, delta_plus, f_right = np.broadcast_arrays(
        *(np.asarray(a, dtype=np.float64) for a in (delta_minus, f_left, mid, delta_plus, f_right))
    )
    has_l = ~np.isnan(delta_minus)
    has_r = ~np.isnan(delta_plus)
    right = np.where(has_r, (f_right - mid) / np.maximum(np.where(has_r, delta_plus, 1.0), min_delta), 0.0)
    left = np.where(has_l, (mid - f_left) / np.maximum(np.where(has_l, delta_minus, 1.0), min_delta), 0.0)
    return 0.5 * (right + left)


def mee_array(delta_minus, f_left, mid, delta_plus, f_right, flat_region_delta_min: float, min_delta: float = 1e-9):
    """Vectorised MEE with the one-sided SDE fallback."""
    delta_minus, f_left, mid, delta_plus, f_right = np.broadcast_arrays(
        *(np.asarray(a, dtype=np.float64) for a in (delta_minus, f_left, mid, delta_plus, f_right))
    )
    has_l = ~np.isnan(delta_minus)
    has_r = ~np.isnan(delta_plus)
    both = has_l & has_r
    width = np.maximum(np.where(both, delta_plus + delta_minus, 1.0), min_delta)
    envelope = np.where(both, (f_right - f_left) / (2.0 * width), 0.0)
    floor = max(flat_region_delta_min, min_delta)
    fallback = sde_array(
        np.where(has_l, np.maximum(delta_minus, floor), np.nan),
        f_left,
        mid,
        np.where(has_r, np.maximum(delta_plus, floor), np.nan),
        f_right,
        min_delta,
    )
    return np.where(both, envelope, fallback)


def envelope_slopes(p: StepProfile) -> tuple[float, float]:
    """Slopes of the local upper and lower envelopes across the plateau (both steps required)."""
    if p.left_step is None or p.right_step is None:
        raise ValueError("envelope slopes need a step on each side")
    (xl, fl), (xr, fr) = p.left_step, p.right_step
    width = xr - xl
    upper = (max(p.mid_value, fr) - max(fl, p.mid_value)) / width
    lower = (min(p.mid_value, fr) - min(fl, p.mid_value)) / width
    return upper, lower


def sde(p: StepProfile, cfg: EstimatorConfig = EstimatorConfig()) -> float:
    return float(sde_array(*p.arrays(), min_delta=cfg.min_delta)[0])


def mee(p: StepProfile, cfg: EstimatorConfig = EstimatorConfig()) -> float:
    if p.left_step is not None and p.right_step is not None:
        (xl, fl), (xr, fr) = p.left_step, p.right_step
        return (fr - fl) / (2.0 * max(xr - xl, cfg.min_delta))
    return float(mee_array(*p.arrays(), flat_region_delta_min=cfg.flat_region_delta_min, min_delta=cfg.min_delta)[0])


def estimate(delta_minus, f_left, mid, delta_plus, f_right, cfg: EstimatorConfig) -> np.ndarray:
    """Apply the configured estimator to arrays of step profiles."""
    if cfg.kind is EstimatorKind.SDE:
        return sde_array(delta_minus, f_left, mid, delta_plus, f_right, cfg.min_delta)
    return mee_array(delta_minus, f_left, mid, delta_plus, f_right, cfg.flat_region_delta_min, cfg.min_delta)
