"""Offline, multiway and online evaluation campaigns plus report bundles."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import itertools
import json
import logging
from collections import OrderedDict
from pathlib import Path
from typing import Sequence

import numpy as np

from . import analysis
from .bandit import BanditConfig, BanditLog, BanditState, ContextEncoder, RewardOracle, run_online, warm_start
from .catalog import Catalog, CatalogConfig, rng_for
from .features import SimilarityTable, build_similarity_table
from .metrics import delta_aux, delta_expert, gap_closed, macro_average
from .model import evaluate_utility
from .operators import DEFAULT_TAU, OPERATOR_ORDER, MergeOperator, MergePlan, OpKind, execute_plan
from .planning import intermediate_raw, MixtureProxy, rank_plans
from .selector import (
    ClassifierReport,
    PairwiseDataset,
    SelectorHyperparams,
    SelectorModel,
    argmax_first,
    build_pairwise_dataset,
    confusion_report,
    train_selector,
)

log = logging.getLogger(__name__)

FIXED_METHODS = tuple(f"fixed-{op.value}" for op in OPERATOR_ORDER)
_MULTIWAY_STREAM = 401


@dataclasses.dataclass(frozen=True)
class CampaignConfig:
    n_train_pairs: int = 240
    n_test_pairs: int = 60
    val_fraction: float = 0.2
    tau: float = DEFAULT_TAU
    task_encoding: bool = True
    orientation: str = "aux_first"
    off_task_fraction: float = 0.5
    n_multiway: int = 20
    seed: int = 0
    hyperparams: SelectorHyperparams = SelectorHyperparams()
    bandit: BanditConfig = BanditConfig()

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return d


@dataclasses.dataclass(frozen=True)
class MergeOutcome:
    plan: MergePlan
    method: str
    score: float
    s_expert: float
    s_aux: float

    @property
    def task(self) -> str:
        return self.plan.task_id

    @property
    def gap_closed(self) -> float:
        return gap_closed(self.score, self.s_expert, self.s_aux)

    @property
    def delta_expert(self) -> float:
        return delta_expert(self.score, self.s_expert)

    @property
    def delta_aux(self) -> float:
        return delta_aux(self.score, self.s_aux)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "task_id": self.task,
            "plan": self.plan.to_dict(),
            "score": self.score,
            "s_expert": self.s_expert,
            "s_aux": self.s_aux,
            "gap_closed": self.gap_closed,
            "delta_expert": self.delta_expert,
            "delta_aux": self.delta_aux,
        }


@dataclasses.dataclass
class ReportBundle:
    name: str
    outcomes: list[MergeOutcome] = dataclasses.field(default_factory=list)
    confusion: dict[str, ClassifierReport] = dataclasses.field(default_factory=dict)
    correlations: list[dict] = dataclasses.field(default_factory=list)
    tail_effects: list[dict] = dataclasses.field(default_factory=list)
    bin_trends: list[dict] = dataclasses.field(default_factory=list)
    regret_traces: dict[str, BanditLog] = dataclasses.field(default_factory=dict)
    extra: dict = dataclasses.field(default_factory=dict)

    @property
    def methods(self) -> list[str]:
        return list(OrderedDict.fromkeys(o.method for o in self.outcomes))

    def per_task(self, method: str, metric: str = "gap_closed") -> "OrderedDict[str, float]":
        groups: OrderedDict[str, list[float]] = OrderedDict()
        for o in self.outcomes:
            if o.method == method:
                groups.setdefault(o.task, []).append(getattr(o, metric))
        return OrderedDict((t, float(np.mean(v))) for t, v in sorted(groups.items()))

    def macro(self, method: str, metric: str = "gap_closed") -> float:
        groups: dict[str, list[float]] = {}
        for o in self.outcomes:
            if o.method == method:
                groups.setdefault(o.task, []).append(getattr(o, metric))
        return macro_average(groups)

    def summary(self) -> dict:
        out = {}
        for m in self.methods:
            out[m] = {
                metric: {"macro": self.macro(m, metric), "per_task": self.per_task(m, metric)}
                for metric in ("gap_closed", "delta_expert", "delta_aux", "score")
            }
        return out

    def write(self, out_dir: str | Path) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "summary.json").write_text(json.dumps(self.summary(), indent=2) + "\n")
        with (out / "outcomes.jsonl").open("w") as fh:
            for o in self.outcomes:
                fh.write(json.dumps(o.to_dict(), sort_keys=True) + "\n")
        if self.outcomes:
            with (out / "outcomes.csv").open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["method", "task_id", "model_ids", "operators", "score", "s_expert", "s_aux", "gap_closed", "delta_expert", "delta_aux"])
                for o in self.outcomes:
                    w.writerow(
                        [o.method, o.task, ";".join(o.plan.model_ids), ";".join(op.kind.value for op in o.plan.operators)]
                        + [repr(v) for v in (o.score, o.s_expert, o.s_aux, o.gap_closed, o.delta_expert, o.delta_aux)]
                    )
        if self.confusion:
            (out / "confusion.json").write_text(json.dumps({k: v.to_dict() for k, v in self.confusion.items()}, indent=2) + "\n")
        for name, rows in (("correlations", self.correlations), ("tail_effects", self.tail_effects), ("bin_trends", self.bin_trends)):
            if rows:
                _write_rows(out / f"{name}.csv", rows)
        for policy, blog in self.regret_traces.items():
            blog.write_jsonl(out / f"bandit_{policy}.jsonl")
            blog.write_regret_csv(out / f"regret_{policy}.csv")
        if self.extra:
            (out / "extra.json").write_text(json.dumps(self.extra, indent=2, default=_json_default) + "\n")
        return out


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o))


def _write_rows(path: Path, rows: Sequence[dict]) -> None:
    keys = list(OrderedDict.fromkeys(k for r in rows for k in r))
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in keys})


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# offline (pairwise) campaign


@dataclasses.dataclass
class OfflineArtifacts:
    table: SimilarityTable
    dataset: PairwiseDataset
    selector: SelectorModel
    report: ReportBundle


def _pair_case(row, catalog: Catalog, orientation: str) -> tuple[str, str]:
    """(expert-side id, auxiliary id) of a dataset row."""
    if catalog.task_of(row.id_a) == row.task_id:
        return row.id_a, row.id_b
    return row.id_b, row.id_a


def run_offline_campaign(
    catalog: Catalog, config: CampaignConfig = CampaignConfig(), table: SimilarityTable | None = None
) -> OfflineArtifacts:
    """Pairwise train/test protocol: held-out expert-auxiliary pairs, fixed operators vs the learned selector."""
    table = table or build_similarity_table(catalog)
    dataset = build_pairwise_dataset(
        catalog,
        table,
        config.n_train_pairs,
        config.seed,
        n_test=config.n_test_pairs,
        val_fraction=config.val_fraction,
        tau=config.tau,
        orientation=config.orientation,
        task_encoding=config.task_encoding,
        off_task_fraction=config.off_task_fraction,
    )
    selector = train_selector(dataset, config.hyperparams)
    report = ReportBundle("offline")
    test = dataset.split("test")
    true_idx, pred_idx, cases = [], [], []
    for row in test:
        exp_id, aux_id = _pair_case(row, catalog, config.orientation)
        s_e, s_a = catalog.utility(exp_id, row.task_id), catalog.utility(aux_id, row.task_id)
        for op, u in zip(OPERATOR_ORDER, row.utilities):
            plan = MergePlan((row.id_a, row.id_b), (MergeOperator.default(op, config.tau),), row.task_id)
            report.outcomes.append(MergeOutcome(plan, f"fixed-{op.value}", float(u), s_e, s_a))
        pred = argmax_first(selector.predict(row.features))
        plan = MergePlan((row.id_a, row.id_b), (MergeOperator.default(OPERATOR_ORDER[pred], config.tau),), row.task_id)
        report.outcomes.append(MergeOutcome(plan, "simmerge", float(row.utilities[pred]), s_e, s_a))
        true_idx.append(argmax_first(row.utilities))
        pred_idx.append(pred)
        raw = table.get(row.id_a, row.id_b, row.task_id).raw
        cases.append(analysis.CaseOutcome(f"{row.id_a}|{row.id_b}@{row.task_id}", 2, dict(raw), row.utilities))
    report.confusion["simmerge"] = confusion_report(true_idx, pred_idx)
    _attach_analyses(report, cases)
    report.extra["label_balance"] = dataset.label_balance()
    report.extra["test_label_balance"] = dataset.label_balance(("test",))
    return OfflineArtifacts(table, dataset, selector, report)


def _attach_analyses(report: ReportBundle, cases: Sequence[analysis.CaseOutcome]) -> None:
    if len(cases) >= 3:
        report.correlations.extend(analysis.correlations(cases))
    names = list(cases[0].features) if cases else []
    if len(cases) >= 5:
        for name in names:
            for op in OPERATOR_ORDER:
                report.tail_effects.append(
                    {"feature": name, "operator": op.value, "k": cases[0].k, "delta_p_win": analysis.tail_effect(cases, name, op)}
                )
    if len(cases) >= 15:
        for name in names:
            for row in analysis.percentile_bin_trends(cases, name, 5):
                report.bin_trends.append({"feature": name, "k": cases[0].k, **row})


def tau_sweep(
    catalog: Catalog, dataset: PairwiseDataset, taus: Sequence[float] = (0.01, 0.05, 0.1, 0.2, 0.5), split: str = "val"
) -> list[tuple[float, float]]:
    """Mean TIES utility on ``split`` pairs for each trim fraction, best first."""
    rows = dataset.split(split)
    if not rows:
        raise ValueError(f"split {split!r} is empty")
    out = []
    for tau in taus:
        op = MergeOperator.default(OpKind.TIES, tau)
        vals = [evaluate_utility(execute_plan(MergePlan((r.id_a, r.id_b), (op,), r.task_id), catalog), catalog.eval_sets[r.task_id]) for r in rows]
        out.append((float(tau), float(np.mean(vals))))
    return sorted(out, key=lambda r: -r[1])


# ---------------------------------------------------------------------------
# multiway campaign


def multiway_instances(catalog: Catalog, k: int, n: int, seed: int) -> list[tuple[tuple[str, ...], str]]:
    """``n`` configurations: one task expert plus ``k - 1`` auxiliaries from distinct other tasks."""
    if k < 2:
        raise ValueError("k must be >= 2")
    if k > len(catalog.tasks):
        raise ValueError(f"k={k} needs {k} tasks, catalog has {len(catalog.tasks)}")
    rng = rng_for(seed, _MULTIWAY_STREAM, k)
    out, seen = [], set()
    tasks = catalog.tasks
    budget = 100 * max(n, 1)
    while len(out) < n and budget:
        budget -= 1
        task = tasks[int(rng.integers(len(tasks)))]
        others = [t for t in tasks if t != task]
        aux_tasks = [others[i] for i in rng.choice(len(others), size=k - 1, replace=False)]
        auxs = [catalog.members_of(t)[int(rng.integers(len(catalog.members_of(t))))] for t in aux_tasks]
        ids = (catalog.expert(task), *auxs)
        key = (frozenset(ids), task)
        if key in seen:
            continue
        seen.add(key)
        out.append((ids, task))
    if len(out) < n:
        raise ValueError(f"only {len(out)} distinct {k}-way configurations available")
    return out


def _baselines(catalog: Catalog, ids: Sequence[str], task: str) -> tuple[float, float]:
    expert = catalog.expert(task)
    auxs = [m for m in ids if m != expert]
    return catalog.utility(expert, task), float(np.mean([catalog.utility(m, task) for m in auxs]))


class PlanEvaluator:
    """Memoised execute-and-evaluate of plans on one catalog."""

    def __init__(self, catalog: Catalog):
        self.catalog = catalog
        self._cache: dict[tuple, float] = {}
        self.executions = 0

    def __call__(self, plan: MergePlan) -> float:
        key = (plan.model_ids, plan.task_id, tuple((op.kind.value, op.alpha, op.tau) for op in plan.operators))
        if key not in self._cache:
            merged = execute_plan(plan, self.catalog)
            self._cache[key] = evaluate_utility(merged, self.catalog.eval_sets[plan.task_id])
            self.executions += 1
        return self._cache[key]


def run_multiway_campaign(
    catalog: Catalog,
    k: int,
    config: CampaignConfig = CampaignConfig(),
    selector: SelectorModel | None = None,
    table: SimilarityTable | None = None,
    instances: Sequence[tuple[tuple[str, ...], str]] | None = None,
    evaluator: PlanEvaluator | None = None,
) -> ReportBundle:
    """Fixed operators (random order), selector plans, and the selector's operators on the random order."""
    if len(catalog.tasks) < k:
        raise ValueError(f"k={k} needs at least {k} tasks")
    if selector is None or table is None:
        arts = run_offline_campaign(catalog, config, table)
        selector, table = arts.selector, arts.table
    instances = list(instances) if instances is not None else multiway_instances(catalog, k, config.n_multiway, config.seed)
    evaluator = evaluator or PlanEvaluator(catalog)
    rng = rng_for(config.seed, _MULTIWAY_STREAM, k, 1)
    report = ReportBundle(f"multiway_k{k}")
    cases = []
    for ids, task in instances:
        s_e, s_a = _baselines(catalog, ids, task)
        random_order = tuple(ids[i] for i in rng.permutation(len(ids)))
        for op in OPERATOR_ORDER:
            plan = MergePlan.uniform(random_order, op, task, config.tau)
            report.outcomes.append(MergeOutcome(plan, f"fixed-{op.value}", evaluator(plan), s_e, s_a))
        best = rank_plans(ids, table, selector, task, task_encoding=config.task_encoding, tau=config.tau)[0]
        report.outcomes.append(MergeOutcome(best.plan, "simmerge", evaluator(best.plan), s_e, s_a))
        shuffled = MergePlan(random_order, best.plan.operators, task)
        report.outcomes.append(MergeOutcome(shuffled, "random-order", evaluator(shuffled), s_e, s_a))
        fixed_scores = [o.score for o in report.outcomes[-5:-2]]
        raw = intermediate_raw(MixtureProxy.singleton(random_order[0]), random_order[1], table, task)
        cases.append(analysis.CaseOutcome("|".join(random_order) + "@" + task, k, dict(raw), np.array(fixed_scores)))
    _attach_analyses(report, cases)
    return report


@dataclasses.dataclass
class PlanOracleResult:
    instance: tuple[tuple[str, ...], str]
    selected: MergePlan
    selected_utility: float
    percentile: float  # fraction of plans strictly better than the selected one
    all_utilities: np.ndarray
    random_order_utility: float
    s_expert: float
    s_aux: float


def plan_oracle_check(
    catalog: Catalog,
    table: SimilarityTable,
    selector: SelectorModel,
    instances: Sequence[tuple[tuple[str, ...], str]],
    config: CampaignConfig = CampaignConfig(),
    evaluator: PlanEvaluator | None = None,
) -> list[PlanOracleResult]:
    """Brute-force every (order, operator sequence) plan and locate the selector's pick."""
    evaluator = evaluator or PlanEvaluator(catalog)
    rng = rng_for(config.seed, _MULTIWAY_STREAM, 99)
    out = []
    for ids, task in instances:
        plans = [
            MergePlan(order, tuple(MergeOperator.default(OPERATOR_ORDER[c], config.tau) for c in combo), task)
            for order in itertools.permutations(sorted(ids))
            for combo in itertools.product(range(len(OPERATOR_ORDER)), repeat=len(ids) - 1)
        ]
        utils = np.array([evaluator(p) for p in plans])
        chosen = rank_plans(ids, table, selector, task, task_encoding=config.task_encoding, tau=config.tau)[0].plan
        u = evaluator(chosen)
        random_order = tuple(ids[i] for i in rng.permutation(len(ids)))
        u_rand = evaluator(MergePlan(random_order, chosen.operators, task))
        s_e, s_a = _baselines(catalog, ids, task)
        out.append(PlanOracleResult((tuple(ids), task), chosen, u, float(np.mean(utils > u)), utils, u_rand, s_e, s_a))
    return out


# ---------------------------------------------------------------------------
# online campaign


def run_bandit_campaign(
    catalog: Catalog,
    shift_task: str,
    policies: Sequence[str] = ("lints", "linucb", "uniform", "oracle"),
    rounds: int = 60,
    seed: int = 0,
    config: CampaignConfig = CampaignConfig(),
    table: SimilarityTable | None = None,
    k: int = 2,
) -> ReportBundle:
    """Warm start on logged tasks, then run each policy on merges involving the shift task."""
    if shift_task not in catalog.tasks:
        raise ValueError(f"unknown shift task {shift_task!r}")
    table = table or build_similarity_table(catalog)
    logged = [t for t in catalog.tasks if t != shift_task]
    dataset = build_pairwise_dataset(
        catalog,
        table,
        config.n_train_pairs,
        config.seed,
        n_test=0,
        val_fraction=config.val_fraction,
        tau=config.tau,
        orientation=config.orientation,
        tasks=logged,
        task_encoding=config.task_encoding,
        off_task_fraction=config.off_task_fraction,
    )
    encoder, posts, offset = warm_start(ContextEncoder(config.hyperparams), None, dataset, config.bandit)
    oracle = RewardOracle(catalog, config.tau)
    report = ReportBundle("bandit")
    for policy in policies:
        state = BanditState(encoder, list(posts), offset, config.bandit)
        report.regret_traces[policy] = run_online(
            catalog, table, policy, rounds, shift_task, seed, state, oracle, k=k, task_encoding=config.task_encoding
        )
    report.extra["final_regret"] = {p: blog.final_regret for p, blog in report.regret_traces.items()}
    report.extra["warm_start_rows"] = len(dataset.rows)
    return report
