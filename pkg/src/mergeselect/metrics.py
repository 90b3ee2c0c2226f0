"""Baseline-relative merge metrics and macro-averaging.

Utilities here are log-likelihoods and therefore negative, so the relative
deltas divide by the magnitude of the baseline.  For positive baselines this
is the usual ``100 * (score - s) / s``; for negative ones it keeps the sign
meaning "better than the baseline" instead of flipping it.
"""

from __future__ import annotations

from typing import Iterable, Mapping

import numpy as np


class MetricError(ValueError):
    pass


def delta_expert(score: float, s_expert: float) -> float:
    if s_expert == 0:
        raise MetricError("zero expert baseline")
    return 100.0 * ((score - s_expert) / abs(s_expert))


def delta_aux(score: float, s_aux: float) -> float:
    if s_aux == 0:
        raise MetricError("zero auxiliary baseline")
    return 100.0 * ((score - s_aux) / abs(s_aux))


def gap_closed(score: float, s_expert: float, s_aux: float) -> float:
    """0 at the auxiliary baseline, 100 at the expert; unbounded either side."""
    if s_expert == s_aux:
        raise MetricError("degenerate gap: expert and auxiliary baselines coincide")
    # divide first so score == s_expert gives exactly 100
    return 100.0 * ((score - s_aux) / (s_expert - s_aux))


def macro_average(per_task: Mapping[str, Iterable[float]]) -> float:
    """Unweighted mean over tasks of each task's mean."""
    if not per_task:
        raise MetricError("no tasks to average")
    means = []
    for task, values in per_task.items():
        v = np.asarray(list(values), dtype=np.float64)
        if v.size == 0:
            raise MetricError(f"task {task!r} has no values")
        means.append(v.mean())
    return float(np.mean(means))
