"""Multiway plan scoring without executing merges.

An intermediate merge is represented by a :class:`MixtureProxy`, the weighted
set of raw checkpoints it was folded from.  Its similarity to the next
checkpoint is estimated from the pairwise table:

* KL: ``sum_ij w_i v_j KL(P_i || Q_j)``, an upper bound by joint convexity;
* l2: ``sum_ij w_i v_j ||theta_i - theta_j||``, a triangle-inequality bound
  for linear intermediates;
* cosine: ``sum_ij w_i v_j cos(u_i, u_j)`` clipped to [-1, 1], a heuristic.

Intermediate norms use the weighted mean of component norms.  That one is a
plain proxy with no bound behind it and is listed in
:data:`PROXY_ONLY_FEATURES`.
"""

from __future__ import annotations

import dataclasses
import itertools
import json
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .catalog import rng_for
from .features import CHANNELS, SimilarityTable, build_feature_vector, raw_from_parts
from .operators import OPERATOR_ORDER, DEFAULT_ALPHA, DEFAULT_TAU, MergeOperator, MergePlan
from .selector import SelectorModel, argmax_first

MAX_EXHAUSTIVE_K = 4
PROXY_ONLY_FEATURES = ("norm_a",)
_PLAN_STREAM = 201

_COSINE_FIELDS = {"weight": "weight_cos", "attention": "attn_cos_mean", "activation": "act_cos_mean"}


class PlanError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class MixtureProxy:
    """Weighted components ``((id, w), ...)`` standing in for a merge."""

    components: tuple[tuple[str, float], ...]

    def __post_init__(self) -> None:
        comps = tuple((str(i), float(w)) for i, w in self.components)
        object.__setattr__(self, "components", comps)
        if not comps:
            raise PlanError("empty mixture")
        ids = [i for i, _ in comps]
        if len(set(ids)) != len(ids):
            raise PlanError("duplicate component in mixture")
        weights = np.array([w for _, w in comps])
        if np.any(weights < 0):
            raise PlanError("mixture weights must be nonnegative")
        if abs(weights.sum() - 1.0) > 1e-9:
            raise PlanError(f"mixture weights sum to {weights.sum()}, not 1")

    @classmethod
    def singleton(cls, mid: str) -> "MixtureProxy":
        return cls(((mid, 1.0),))

    @property
    def ids(self) -> list[str]:
        return [i for i, _ in self.components]

    @property
    def weights(self) -> np.ndarray:
        return np.array([w for _, w in self.components])

    def fold(self, mid: str, alpha: float = DEFAULT_ALPHA) -> "MixtureProxy":
        """Mixture of ``o(self, mid; alpha)``: prior weights scale by ``1 - alpha``."""
        if mid in self.ids:
            raise PlanError(f"{mid!r} already in the mixture")
        return MixtureProxy(tuple((i, (1.0 - alpha) * w) for i, w in self.components) + ((mid, alpha),))


def mixture_bound(w: Sequence[float], v: Sequence[float], pairwise: np.ndarray) -> float:
    """``sum_ij w_i v_j M_ij`` for a component-pair matrix ``M``."""
    return float(np.asarray(w) @ np.asarray(pairwise, dtype=np.float64) @ np.asarray(v))


def _pairwise(left: MixtureProxy, right: MixtureProxy, table: SimilarityTable, task: str, field: str) -> np.ndarray:
    out = np.empty((len(left.components), len(right.components)))
    for i, a in enumerate(left.ids):
        for j, b in enumerate(right.ids):
            out[i, j] = table.get(a, b, task).raw[field]
    return out


def propagate_kl(left: MixtureProxy, right: MixtureProxy, table: SimilarityTable, task: str) -> float:
    return mixture_bound(left.weights, right.weights, _pairwise(left, right, table, task, "kl_mean"))


def propagate_l2(left: MixtureProxy, right: MixtureProxy, table: SimilarityTable, task: str) -> float:
    return mixture_bound(left.weights, right.weights, _pairwise(left, right, table, task, "weight_l2"))


def propagate_cosine(
    left: MixtureProxy, right: MixtureProxy, table: SimilarityTable, task: str, channel: str = "weight"
) -> float:
    try:
        field = _COSINE_FIELDS[channel]
    except KeyError:
        raise PlanError(f"unknown cosine channel {channel!r}; expected one of {sorted(_COSINE_FIELDS)}") from None
    value = mixture_bound(left.weights, right.weights, _pairwise(left, right, table, task, field))
    return float(np.clip(value, -1.0, 1.0))


def intermediate_raw(prefix: MixtureProxy, next_id: str, table: SimilarityTable, task: str):
    """Named raw features of (prefix, next) with every channel propagated.

    Sequence channels are propagated element-wise (per prompt, layer or head)
    before summarising, so a singleton prefix reproduces the exact pair entry.
    """
    entries = [table.get(mid, next_id, task) for mid in prefix.ids]
    weights = prefix.weights
    seqs = {}
    for channel in CHANNELS:
        acc = 0.0
        for w, pf in zip(weights, entries):
            acc = acc + w * pf.sequences[channel]
        seqs[channel] = np.clip(acc, -1.0, 1.0) if channel != "kl" else acc
    scalars = {
        "weight_cos": float(np.clip(sum(w * pf.raw["weight_cos"] for w, pf in zip(weights, entries)), -1.0, 1.0)),
        "weight_l2": float(sum(w * pf.raw["weight_l2"] for w, pf in zip(weights, entries))),
        "norm_a": float(sum(w * pf.raw["norm_a"] for w, pf in zip(weights, entries))),
        "norm_b": entries[0].raw["norm_b"],
    }
    return raw_from_parts(seqs, scalars)


def intermediate_features(
    prefix: MixtureProxy, next_id: str, table: SimilarityTable, task: str, task_encoding: bool = True
) -> np.ndarray:
    raw = intermediate_raw(prefix, next_id, table, task)
    return build_feature_vector(raw, table.encoding(task) if task_encoding else None)


def enumerate_plans(
    model_ids: Iterable[str],
    mode: str = "exhaustive",
    max_candidates: int = 24,
    seed: int = 0,
    max_exhaustive_k: int = MAX_EXHAUSTIVE_K,
) -> list[tuple[str, ...]]:
    """Candidate orders (operators are chosen later, per step)."""
    ids = sorted(model_ids)
    k = len(ids)
    if len(set(ids)) != k:
        raise PlanError("duplicate model id")
    if k < 2:
        raise PlanError("need at least two models")
    if mode == "exhaustive":
        if k > max_exhaustive_k:
            raise PlanError(f"k={k} exceeds the exhaustive limit {max_exhaustive_k}; use sampled mode")
        return list(itertools.permutations(ids))
    if mode != "sampled":
        raise PlanError(f"unknown mode {mode!r}")
    if max_candidates < 1:
        raise PlanError("max_candidates must be positive")
    total = math.factorial(k)
    rng = rng_for(seed, _PLAN_STREAM, k)
    if max_candidates >= total:
        orders = list(itertools.permutations(ids))
        return [orders[i] for i in rng.permutation(total)]
    seen: dict[tuple[str, ...], None] = {}
    while len(seen) < max_candidates:
        order = tuple(ids[i] for i in rng.permutation(k))
        seen.setdefault(order, None)
    return list(seen)


@dataclasses.dataclass(frozen=True, eq=False)
class PlanScore:
    plan: MergePlan
    predicted_utility: float
    per_step_features: tuple[np.ndarray, ...]
    per_step_operator_utilities: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        n = self.plan.k - 1
        if len(self.per_step_features) != n or len(self.per_step_operator_utilities) != n:
            raise PlanError("per-step records must have one entry per fold step")

    @property
    def order(self) -> tuple[str, ...]:
        return self.plan.model_ids

    def to_dict(self) -> dict:
        return {
            "order": list(self.order),
            "per_step_ops": [op.kind.value for op in self.plan.operators],
            "per_step_utilities": [[float(u) for u in step] for step in self.per_step_operator_utilities],
            "predicted_utility": self.predicted_utility,
        }


def _step_predictions(order, table, selector, task, task_encoding):
    prefix = MixtureProxy.singleton(order[0])
    feats, utils = [], []
    for mid in order[1:]:
        x = intermediate_features(prefix, mid, table, task, task_encoding)
        feats.append(x)
        utils.append(np.asarray(selector.predict(x), dtype=np.float64))
        prefix = prefix.fold(mid)
    return feats, utils


def _aggregate(selected: Sequence[float], aggregate: str) -> float:
    if aggregate == "final":
        return float(selected[-1])
    if aggregate == "mean":
        return float(np.mean(selected))
    raise PlanError(f"unknown aggregate {aggregate!r}")


def score_plan(
    order: Sequence[str],
    table: SimilarityTable,
    selector: SelectorModel,
    task: str,
    aggregate: str = "final",
    task_encoding: bool = True,
    tau: float = DEFAULT_TAU,
) -> PlanScore:
    """Greedy per-step operator choice along a fixed order."""
    if selector is None:
        raise PlanError("untrained selector")
    order = tuple(order)
    feats, utils = _step_predictions(order, table, selector, task, task_encoding)
    choice = [argmax_first(u) for u in utils]
    ops = tuple(MergeOperator.default(OPERATOR_ORDER[c], tau) for c in choice)
    selected = [u[c] for u, c in zip(utils, choice)]
    plan = MergePlan(order, ops, task)
    return PlanScore(plan, _aggregate(selected, aggregate), tuple(feats), tuple(utils))


def score_plan_joint(
    order: Sequence[str],
    table: SimilarityTable,
    selector: SelectorModel,
    task: str,
    aggregate: str = "final",
    task_encoding: bool = True,
    tau: float = DEFAULT_TAU,
) -> list[PlanScore]:
    """Experimental: score every operator sequence for ``order`` jointly.

    Propagated features do not depend on earlier operators, so this differs
    from the greedy path only through tie handling and the aggregate.
    """
    order = tuple(order)
    feats, utils = _step_predictions(order, table, selector, task, task_encoding)
    out = []
    for combo in itertools.product(range(len(OPERATOR_ORDER)), repeat=len(order) - 1):
        ops = tuple(MergeOperator.default(OPERATOR_ORDER[c], tau) for c in combo)
        selected = [u[c] for u, c in zip(utils, combo)]
        out.append(PlanScore(MergePlan(order, ops, task), _aggregate(selected, aggregate), tuple(feats), tuple(utils)))
    return out


def rank_plans(
    model_ids: Iterable[str],
    table: SimilarityTable,
    selector: SelectorModel,
    task: str,
    mode: str = "exhaustive",
    max_candidates: int = 24,
    seed: int = 0,
    aggregate: str = "final",
    joint: bool = False,
    task_encoding: bool = True,
    tau: float = DEFAULT_TAU,
) -> list[PlanScore]:
    """All candidate plans, best first; ties by lexicographic id sequence."""
    orders = enumerate_plans(model_ids, mode, max_candidates, seed)
    if not orders:
        raise PlanError("empty candidate list")
    scores: list[PlanScore] = []
    for order in orders:
        if joint:
            scores.extend(score_plan_joint(order, table, selector, task, aggregate, task_encoding, tau))
        else:
            scores.append(score_plan(order, table, selector, task, aggregate, task_encoding, tau))
    scores.sort(key=lambda s: (-s.predicted_utility, s.order, tuple(op.kind.index for op in s.plan.operators)))
    return scores


def select_plan(
    model_ids: Iterable[str],
    table: SimilarityTable,
    selector: SelectorModel,
    task: str,
    mode: str = "exhaustive",
    max_candidates: int = 24,
    seed: int = 0,
    **kwargs,
) -> MergePlan:
    return rank_plans(model_ids, table, selector, task, mode, max_candidates, seed, **kwargs)[0].plan


def write_scored_plans(scores: Sequence[PlanScore], path: str | Path) -> None:
    """JSONL dump, one candidate per line, best first."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ordered = sorted(scores, key=lambda s: (-s.predicted_utility, s.order))
    with path.open("w") as fh:
        for s in ordered:
            fh.write(json.dumps(s.to_dict(), sort_keys=True) + "\n")
