"""Feature-outcome analyses over executed merge cases.

A case is one merge configuration with its similarity features and the
executed utility of every operator.  The winner of a case is the operator
with the highest utility, exact ties going to the earlier operator.
"""

from __future__ import annotations

import dataclasses
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .operators import OPERATOR_ORDER, OpKind
from .selector import argmax_first


class AnalysisError(ValueError):
    pass


@dataclasses.dataclass(frozen=True, eq=False)
class CaseOutcome:
    case_id: str
    k: int
    features: Mapping[str, float]
    utilities: np.ndarray  # one per operator, OPERATOR_ORDER

    @property
    def winner(self) -> OpKind:
        return OPERATOR_ORDER[argmax_first(self.utilities)]


def pearson(x: Sequence[float], y: Sequence[float]) -> float | None:
    """Pearson coefficient, ``None`` when either series is constant."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.size < 2:
        raise AnalysisError("series must have equal length >= 2")
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt(dx @ dx), np.sqrt(dy @ dy)
    if sx == 0 or sy == 0:
        return None
    return float(np.clip((dx @ dy) / (sx * sy), -1.0, 1.0))


def spearman(x: Sequence[float], y: Sequence[float]) -> float | None:
    """Pearson coefficient of average ranks."""
    return pearson(rankdata(x), rankdata(y))


def correlations(outcomes: Sequence[CaseOutcome], feature_names: Sequence[str] | None = None) -> list[dict]:
    """Pearson and Spearman coefficient per (feature, operator, k) cell."""
    if not outcomes:
        raise AnalysisError("no outcomes")
    names = list(feature_names or outcomes[0].features)
    cells = []
    for k in sorted({o.k for o in outcomes}):
        group = [o for o in outcomes if o.k == k]
        for name in names:
            x = [o.features[name] for o in group]
            for i, op in enumerate(OPERATOR_ORDER):
                y = [o.utilities[i] for o in group]
                if len(group) < 3:
                    p = s = None
                else:
                    p, s = pearson(x, y), spearman(x, y)
                cells.append({"feature": name, "operator": op.value, "k": k, "n": len(group), "pearson": p, "spearman": s})
    return cells


def _feature_ranks(outcomes: Sequence[CaseOutcome], feature: str) -> list[int]:
    """Case indices sorted by feature value, ties broken by case id."""
    return sorted(range(len(outcomes)), key=lambda i: (outcomes[i].features[feature], outcomes[i].case_id))


def tail_effect(outcomes: Sequence[CaseOutcome], feature: str, operator: OpKind | str) -> float:
    """P(win | feature in top quintile) - P(win | feature in bottom quintile)."""
    if len(outcomes) < 5:
        raise AnalysisError("tail effect needs at least 5 cases")
    op = OpKind(operator)
    order = _feature_ranks(outcomes, feature)
    q = len(order) // 5
    bottom, top = order[:q], order[-q:]
    p_top = np.mean([outcomes[i].winner is op for i in top])
    p_bottom = np.mean([outcomes[i].winner is op for i in bottom])
    return float(p_top - p_bottom)


def percentile_bin_trends(outcomes: Sequence[CaseOutcome], feature: str, bins: int = 5) -> list[dict]:
    """Per-operator win frequency inside equal-mass percentile bins of ``feature``.

    Percentiles are taken within each merge setting ``k`` so settings with
    different raw scales share one axis.
    """
    if bins < 1:
        raise AnalysisError("bins must be positive")
    if len(outcomes) < 3 * bins:
        raise AnalysisError(f"need at least {3 * bins} cases for {bins} bins")
    pct = np.empty(len(outcomes))
    for k in {o.k for o in outcomes}:
        idx = [i for i, o in enumerate(outcomes) if o.k == k]
        sub = [outcomes[i] for i in idx]
        order = _feature_ranks(sub, feature)
        for rank, j in enumerate(order):
            pct[idx[j]] = (rank + 0.5) / len(order)
    # equal mass: split the global percentile ranking into near-equal chunks
    ranked = sorted(range(len(outcomes)), key=lambda i: (pct[i], outcomes[i].case_id))
    out = []
    for b, chunk in enumerate(np.array_split(np.array(ranked), bins)):
        wins = np.zeros(len(OPERATOR_ORDER))
        for i in chunk:
            wins[outcomes[i].winner.index] += 1
        out.append(
            {
                "bin": b,
                "lo": float(pct[chunk[0]]),
                "hi": float(pct[chunk[-1]]),
                "n": int(len(chunk)),
                **{f"p_win_{op.value}": float(w / len(chunk)) for op, w in zip(OPERATOR_ORDER, wins)},
            }
        )
    return out
