"""Evaluation statistics in the reporting formats used for few-shot results."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class TaskMetric:
    task_id: str
    value: float
    n_query: int


def r_squared(pred, actual) -> float:
    """Squared Pearson correlation.

    Note this rewards perfect anti-correlation with 1.0, as squared
    correlation does. Returns 0.0 when either vector has zero variance.
    """
    pred = np.asarray(pred, dtype=np.float64).ravel()
    actual = np.asarray(actual, dtype=np.float64).ravel()
    if pred.shape != actual.shape:
        raise ValueError(f"length mismatch: {pred.size} vs {actual.size}")
    if pred.size < 2:
        raise ValueError("need at least two points")
    dp = pred - pred.mean()
    da = actual - actual.mean()
    sp, sa = np.dot(dp, dp), np.dot(da, da)
    if sp == 0.0 or sa == 0.0:
        return 0.0
    r = np.dot(dp, da) / np.sqrt(sp * sa)
    return float(min(1.0, r * r))


def summarize_r2(per_task: Sequence[TaskMetric | float]) -> tuple[float, float, int]:
    """(mean, lower median, number of tasks with R^2 strictly above 0.3)."""
    vals = [m.value if isinstance(m, TaskMetric) else float(m) for m in per_task]
    if not vals:
        raise ValueError("no task metrics to summarize")
    ordered = sorted(vals)
    median = ordered[(len(ordered) - 1) // 2]
    return float(np.mean(vals)), float(median), sum(v > 0.3 for v in vals)


def mean_ci95(values) -> tuple[float, float]:
    """Mean and normal-approximation 95% half-width ``1.96 * sd / sqrt(n)`` (sample sd)."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size < 2:
        raise ValueError("need at least two values for a confidence interval")
    return float(v.mean()), float(1.96 * v.std(ddof=1) / np.sqrt(v.size))


def accuracy(logits, onehot) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == np.argmax(onehot, axis=1)))


def mse(pred, target) -> float:
    d = np.asarray(pred) - np.asarray(target)
    return float(np.mean(d * d))
