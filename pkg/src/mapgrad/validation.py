"""Input checks shared by the estimator wrapper and the CLI."""

from __future__ import annotations

import numpy as np

from .core import Dataset, ScoreTable, validate_dataset

__all__ = ["check_dataset", "check_score_table"]


def check_dataset(d) -> Dataset:
    """Return ``d`` if it is a valid :class:`Dataset`, else raise ``ValueError``."""
    if not isinstance(d, Dataset):
        raise TypeError(f"expected a Dataset, got {type(d).__name__}")
    problems = validate_dataset(d)
    if problems:
        more = f" (+{len(problems) - 5} more)" if len(problems) > 5 else ""
        raise ValueError("invalid dataset: " + "; ".join(problems[:5]) + more)
    return d


def check_score_table(scores, d: Dataset) -> np.ndarray:
    """Scores as a finite ``(n_windows, n_classes)`` float array."""
    values = scores.values if isinstance(scores, ScoreTable) else np.asarray(scores, dtype=np.float64)
    if values.shape != (d.n_windows, d.n_classes):
        raise ValueError(f"score table has shape {values.shape}, expected {(d.n_windows, d.n_classes)}")
    if not np.isfinite(values).all():
        raise ValueError("scores must be finite")
    return values
