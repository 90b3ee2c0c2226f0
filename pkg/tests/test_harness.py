import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mergeselect.analysis import (
    AnalysisError,
    CaseOutcome,
    correlations,
    pearson,
    percentile_bin_trends,
    spearman,
    tail_effect,
)
from mergeselect.harness import (
    FIXED_METHODS,
    CampaignConfig,
    plan_oracle_check,
    multiway_instances,
    run_bandit_campaign,
    run_multiway_campaign,
    run_offline_campaign,
    tau_sweep,
)
from mergeselect.metrics import MetricError, delta_aux, delta_expert, gap_closed, macro_average
from mergeselect.operators import OPERATOR_ORDER, OpKind
from mergeselect.selector import SelectorHyperparams, argmax_first

HP = SelectorHyperparams(hidden=16, max_epochs=200, min_epochs=30)
CFG = CampaignConfig(n_train_pairs=20, n_test_pairs=6, off_task_fraction=0.25, n_multiway=3, hyperparams=HP)
baselines = st.floats(-50, 50, allow_nan=False).filter(lambda v: abs(v) > 1e-3)


@pytest.fixture(scope="module")
def offline(small_catalog, small_table):
    return run_offline_campaign(small_catalog, CFG, small_table)


# -- metrics ------------------------------------------------------------------------


@settings(max_examples=200, deadline=None)
@given(baselines, baselines)
def test_metric_anchors(s_e, s_a):
    assert delta_expert(s_e, s_e) == 0 and delta_aux(s_a, s_a) == 0
    if s_e != s_a:
        assert gap_closed(s_a, s_e, s_a) == 0
        assert gap_closed(s_e, s_e, s_a) == 100


def test_metric_examples():
    assert delta_expert(5.0, 10.0) == -50.0
    assert delta_aux(15.0, 10.0) == 50.0
    assert gap_closed(12.0, 10.0, 5.0) > 100
    assert gap_closed(4.0, 10.0, 5.0) < 0
    # negative (log-likelihood) baselines keep "higher is better"
    assert delta_expert(-1.0, -2.0) == 50.0


def test_metric_errors():
    with pytest.raises(MetricError):
        delta_expert(1.0, 0.0)
    with pytest.raises(MetricError):
        delta_aux(1.0, 0.0)
    with pytest.raises(MetricError):
        gap_closed(1.0, 2.0, 2.0)
    with pytest.raises(MetricError):
        macro_average({})


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.floats(-10, 10), min_size=1, max_size=5), min_size=1, max_size=6), st.randoms())
def test_macro_permutation_invariant(groups, rnd):
    per_task = {f"t{i}": g for i, g in enumerate(groups)}
    items = list(per_task.items())
    rnd.shuffle(items)
    assert macro_average(dict(items)) == pytest.approx(macro_average(per_task), abs=1e-12)
    assert macro_average({"a": [1.0, 3.0], "b": [10.0]}) == 6.0


# -- correlations ---------------------------------------------------------------------


def test_correlation_trivial_cases():
    assert abs(pearson([1, 2, 3], [2, 4, 6]) - 1.0) < 1e-12
    assert abs(spearman([1, 2, 3], [2, 4, 6]) - 1.0) < 1e-12
    x = np.arange(-2.0, 3.0)
    assert abs(spearman(x, x**3) - 1.0) < 1e-12
    assert pearson(x, x**3) < 1.0
    assert pearson([1, 1, 1], [1, 2, 3]) is None and spearman([1, 2, 3], [4, 4, 4]) is None
    with pytest.raises(AnalysisError):
        pearson([1, 2], [1, 2, 3])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(-1000, 1000), st.integers(-1000, 1000)), min_size=3, max_size=30))
def test_correlation_bounds_and_monotone_invariance(pairs):
    x, y = np.array(pairs, dtype=float).T
    for f in (pearson, spearman):
        v = f(x, y)
        assert v is None or -1.0 <= v <= 1.0
    s = spearman(x, y)
    t = spearman(np.exp(x / 1e3), 2 * y + 1)
    assert (s is None and t is None) or s == pytest.approx(t, abs=1e-9)


def test_correlations_cells():
    cases = [CaseOutcome(f"c{i}", 2, {"f": float(i)}, np.array([i, -i, 0.0])) for i in range(4)]
    cells = correlations(cases)
    assert len(cells) == 3
    assert cells[0]["pearson"] == pytest.approx(1.0) and cells[1]["spearman"] == pytest.approx(-1.0)
    assert cells[2]["pearson"] is None


# -- tail effect and bins ------------------------------------------------------------


def planted_cases(n=40, rule=lambda v: v > 0.5):
    rng = np.random.default_rng(0)
    out = []
    for i in range(n):
        v = float(rng.random())
        u = np.array([1.0, 0.0, 0.0]) if rule(v) else np.array([0.0, 1.0, 0.0])
        out.append(CaseOutcome(f"c{i:03d}", 2, {"f": v}, u))
    return out


def test_tail_effect_extremes():
    cases = planted_cases()
    assert tail_effect(cases, "f", OpKind.LINEAR) == 1.0
    assert tail_effect(cases, "f", OpKind.SLERP) == -1.0
    assert tail_effect(cases, "f", OpKind.TIES) == 0.0
    with pytest.raises(AnalysisError):
        tail_effect(cases[:4], "f", OpKind.LINEAR)


def test_tail_effect_symmetric():
    # Linear wins in both tails, Slerp in the middle
    cases = planted_cases(50, rule=lambda v: v < 0.2 or v > 0.8)
    assert abs(tail_effect(cases, "f", OpKind.LINEAR)) <= 0.25


def test_bin_trends():
    cases = planted_cases(40)
    rows = percentile_bin_trends(cases, "f", 4)
    assert [r["n"] for r in rows] == [10, 10, 10, 10]
    for r in rows:
        assert sum(r[f"p_win_{op.value}"] for op in OPERATOR_ORDER) == pytest.approx(1.0)
    lin = [r["p_win_Linear"] for r in rows]
    assert lin[0] < 0.5 and lin[-1] == 1.0 and lin[0] == 0.0
    assert all(a <= b for a, b in zip(lin, lin[1:]))
    counts = [r["n"] for r in percentile_bin_trends(planted_cases(37), "f", 5)]
    assert max(counts) - min(counts) <= 1
    with pytest.raises(AnalysisError):
        percentile_bin_trends(cases[:10], "f", 5)


def test_tie_goes_to_first_operator():
    assert CaseOutcome("c", 2, {}, np.array([0.5, 0.5, 0.1])).winner is OpKind.LINEAR


# -- campaigns ---------------------------------------------------------------------------


def test_offline_report_shape(offline):
    rep = offline.report
    assert rep.methods == [*FIXED_METHODS, "simmerge"]
    assert len(rep.outcomes) == CFG.n_test_pairs * 4
    assert rep.confusion["simmerge"].n == CFG.n_test_pairs
    assert sum(rep.extra["label_balance"].values()) == CFG.n_train_pairs


def test_simmerge_score_is_executed_score(offline):
    rows = offline.dataset.split("test")
    sim = [o for o in offline.report.outcomes if o.method == "simmerge"]
    for row, o in zip(rows, sim):
        i = OPERATOR_ORDER.index(o.plan.operators[0].kind)
        assert o.score == row.utilities[i]
        assert i == argmax_first(offline.selector.predict(row.features))


def test_baselines_follow_roles(small_catalog, offline):
    for o in offline.report.outcomes:
        expert = small_catalog.expert(o.task)
        assert expert in o.plan.model_ids
        assert o.s_expert == small_catalog.utility(expert, o.task)


def test_offline_deterministic(small_catalog, small_table, offline):
    again = run_offline_campaign(small_catalog, CFG, small_table)
    assert again.selector.equals(offline.selector)
    assert [o.to_dict() for o in again.report.outcomes] == [o.to_dict() for o in offline.report.outcomes]


def test_report_write(tmp_path, offline):
    out = offline.report.write(tmp_path / "rep")
    for name in ("summary.json", "outcomes.jsonl", "outcomes.csv", "confusion.json", "correlations.csv", "tail_effects.csv"):
        assert (out / name).exists()
    assert len((out / "outcomes.jsonl").read_text().splitlines()) == len(offline.report.outcomes)


def test_multiway_campaign(small_catalog, offline):
    rep = run_multiway_campaign(small_catalog, 3, CFG, offline.selector, offline.table)
    assert rep.methods == [*FIXED_METHODS, "simmerge", "random-order"]
    assert len(rep.outcomes) == 3 * 5
    for o in rep.outcomes:
        assert len(o.plan.model_ids) == 3
        auxs = [m for m in o.plan.model_ids if m != small_catalog.expert(o.task)]
        assert o.s_aux == pytest.approx(np.mean([small_catalog.utility(m, o.task) for m in auxs]))
    sim = [o for o in rep.outcomes if o.method == "simmerge"]
    rnd = [o for o in rep.outcomes if o.method == "random-order"]
    assert all(a.plan.operators == b.plan.operators for a, b in zip(sim, rnd))
    with pytest.raises(ValueError):
        run_multiway_campaign(small_catalog, 4, CFG, offline.selector, offline.table)


def test_multiway_instances(small_catalog):
    inst = multiway_instances(small_catalog, 3, 4, seed=0)
    assert len(inst) == 4 and len(set(inst)) == 4
    for ids, task in inst:
        assert ids[0] == small_catalog.expert(task)
        assert len({small_catalog.task_of(m) for m in ids}) == 3
    assert inst == multiway_instances(small_catalog, 3, 4, seed=0)


def test_plan_oracle_check(small_catalog, offline):
    inst = multiway_instances(small_catalog, 3, 1, seed=1)
    (res,) = plan_oracle_check(small_catalog, offline.table, offline.selector, inst, CFG)
    assert res.all_utilities.shape == (54,)
    assert res.selected_utility in res.all_utilities
    assert res.percentile == np.mean(res.all_utilities > res.selected_utility)


def test_tau_sweep(small_catalog, offline):
    res = tau_sweep(small_catalog, offline.dataset, (0.05, 0.5))
    assert sorted(t for t, _ in res) == [0.05, 0.5] and res[0][1] >= res[1][1]


def test_bandit_campaign(small_catalog, small_table):
    cfg = dataclasses.replace(CFG, n_train_pairs=10, off_task_fraction=0.0)
    rep = run_bandit_campaign(small_catalog, "t2", rounds=6, seed=0, config=cfg, table=small_table)
    assert set(rep.regret_traces) == {"lints", "linucb", "uniform", "oracle"}
    assert rep.extra["final_regret"]["oracle"] == 0
    assert all(len(b.rounds) == 6 for b in rep.regret_traces.values())
    with pytest.raises(ValueError):
        run_bandit_campaign(small_catalog, "zz", config=cfg, table=small_table)
