from collections import OrderedDict

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mergeselect.catalog import generate_catalog
from mergeselect.checkpoint import ArchConfig, Checkpoint
from mergeselect.features import (
    FEATURE_NAMES,
    N_FEATURES,
    FeatureError,
    ProbeOutputs,
    TaskEncoding,
    activation_cosine_features,
    attention_cosine_features,
    build_feature_vector,
    build_similarity_table,
    fresh_pair_features,
    kl_features,
    load_feature_csv,
    summarize,
    weight_metrics,
    weight_metrics_vec,
)
from mergeselect.model import forward_many

from conftest import random_checkpoint

ARCH = ArchConfig()
PROMPTS = [list(range(i, i + 10)) for i in range(4)]


def outputs(ck, prompts=PROMPTS):
    return ProbeOutputs.from_traces(forward_many(ck, prompts))


def test_layout():
    assert N_FEATURES == 19
    assert FEATURE_NAMES[:5] == ("kl_mean", "kl_median", "kl_q25", "kl_q75", "kl_q90")
    assert FEATURE_NAMES[-4:] == ("weight_cos", "weight_l2", "norm_a", "norm_b")


def test_summarize():
    s = summarize(np.arange(1.0, 6.0))
    assert np.allclose(s, [3.0, 3.0, 2.0, 4.0, 4.6])
    with pytest.raises(FeatureError):
        summarize(np.array([]))


# -- KL channel -----------------------------------------------------------------


def test_kl_identical_zero():
    o = outputs(random_checkpoint(ARCH, 0))
    assert np.array_equal(kl_features(o, o), np.zeros(5))


def test_kl_closed_form_ln2():
    eps = 1e-9
    a = ProbeOutputs(np.log(np.array([[[1 - eps, eps]]])), np.ones((1, 1, 1)), np.ones((1, 1, 1, 1)), ("p",))
    b = ProbeOutputs(np.log(np.array([[[0.5, 0.5]]])), np.ones((1, 1, 1)), np.ones((1, 1, 1, 1)), ("p",))
    assert kl_features(a, b)[0] == pytest.approx(np.log(2), abs=1e-6)


def test_kl_asymmetric_on_catalog(small_catalog, small_table):
    a, b = small_catalog.ids[0], small_catalog.ids[5]
    kab = small_table.get(a, b, "t0").raw["kl_mean"]
    kba = small_table.get(b, a, "t0").raw["kl_mean"]
    assert abs(kab - kba) > 1e-6


def test_prompt_mismatch():
    ck = random_checkpoint(ARCH, 1)
    with pytest.raises(FeatureError):
        kl_features(outputs(ck), outputs(ck, PROMPTS[:2]))


# -- cosine channels ------------------------------------------------------------


def test_activation_cosine_identical_and_negated():
    o = outputs(random_checkpoint(ARCH, 2))
    assert np.allclose(activation_cosine_features(o, o), 1.0)
    neg = ProbeOutputs(o.logp, -o.hidden, o.attention, o.prompt_ids)
    assert np.allclose(activation_cosine_features(o, neg), -1.0)


def test_attention_cosine_identical_and_nonnegative():
    a, b = outputs(random_checkpoint(ARCH, 3)), outputs(random_checkpoint(ARCH, 4))
    assert np.allclose(attention_cosine_features(a, a), 1.0)
    s = attention_cosine_features(a, b)
    assert np.all(s >= 0) and np.all(s <= 1)


def test_zero_hidden_state_error():
    o = outputs(random_checkpoint(ARCH, 5))
    zero = ProbeOutputs(o.logp, np.zeros_like(o.hidden), o.attention, o.prompt_ids)
    with pytest.raises(FeatureError):
        activation_cosine_features(o, zero)


def test_unembedding_scale_leaves_attention_unchanged():
    ck = random_checkpoint(ARCH, 6)
    t = OrderedDict(ck.tensors)
    t["unembed"] = t["unembed"] * 3.0
    scaled = Checkpoint(ARCH, t)
    other = random_checkpoint(ARCH, 7)
    oa, oscaled, ob = outputs(ck), outputs(scaled), outputs(other)
    assert np.array_equal(attention_cosine_features(oa, ob), attention_cosine_features(oscaled, ob))
    assert not np.allclose(kl_features(oa, ob), kl_features(oscaled, ob))


# -- weight scalars -------------------------------------------------------------


def test_weight_metrics_closed_forms():
    m = weight_metrics_vec(np.array([3.0, 4.0]), np.array([6.0, 8.0]))
    assert m == pytest.approx({"weight_cos": 1.0, "weight_l2": 5.0, "norm_a": 5.0, "norm_b": 10.0})
    m = weight_metrics_vec(np.array([1.0, 0.0]), np.array([0.0, 1.0]))
    assert m["weight_cos"] == pytest.approx(0.0) and m["weight_l2"] == pytest.approx(np.sqrt(2))
    ck = random_checkpoint(ARCH, 8)
    m = weight_metrics(ck, ck)
    assert m["weight_cos"] == pytest.approx(1.0) and m["weight_l2"] == 0 and m["norm_a"] == m["norm_b"]


def test_weight_metrics_arch_mismatch():
    with pytest.raises(FeatureError):
        weight_metrics(random_checkpoint(ARCH, 0), random_checkpoint(ArchConfig(d_model=8), 0))


# -- feature vector and encoding ----------------------------------------------------


def test_feature_vector_dims(small_table):
    pf = next(iter(small_table.entries.values()))
    assert build_feature_vector(pf.raw).shape == (19,)
    enc = TaskEncoding.one_hot("t1", ["t0", "t1", "t2", "t3"])
    x = build_feature_vector(pf.raw, enc)
    assert x.shape == (23,) and list(x[19:]) == [0, 1, 0, 0]
    assert np.array_equal(build_feature_vector(pf.raw, enc), x)


def test_feature_vector_missing_field(small_table):
    raw = dict(next(iter(small_table.entries.values())).raw)
    raw.pop("kl_q90")
    with pytest.raises(FeatureError):
        build_feature_vector(raw)


def test_task_encoding_one_hot():
    with pytest.raises(FeatureError):
        TaskEncoding("t", (1.0, 1.0))
    with pytest.raises(FeatureError):
        TaskEncoding.one_hot("zz", ["t0"])


# -- similarity table --------------------------------------------------------------


def test_table_counts():
    cat = generate_catalog(n_tasks=2, experts_per_task=3, probe_size=3, eval_size=4, seed=2)
    ids = cat.ids[:5]
    table = build_similarity_table(cat, ids=ids)
    assert table.forward_passes == 10 and len(table.probe_cache) == 10
    assert len(table.entries) == 5 * 4 * 2


def test_table_diagonal(small_catalog, small_table):
    mid = small_catalog.ids[2]
    raw = small_table.get(mid, mid, "t1").raw
    assert all(raw[f"kl_{s}"] == 0 for s in ("mean", "median", "q25", "q75", "q90"))
    assert raw["act_cos_mean"] == pytest.approx(1.0) and raw["attn_cos_mean"] == pytest.approx(1.0)
    assert raw["weight_l2"] == 0


def test_table_rebuild_identical(small_catalog):
    assert build_similarity_table(small_catalog).equals(build_similarity_table(small_catalog))


def test_table_missing_entry(small_table):
    with pytest.raises(FeatureError):
        small_table.get("nope", "ckpt_t0_0", "t0")


def test_csv_round_trip(tmp_path, small_table):
    small_table.to_csv(tmp_path / "f.csv")
    back = load_feature_csv(tmp_path / "f.csv")
    assert back.equals(small_table)
    assert (tmp_path / "f.header.json").exists()


def _check_invariants(table):
    for (a, b, t), pf in table.entries.items():
        r = pf.raw
        for ch in ("act_cos", "attn_cos"):
            for s in ("mean", "median", "q25", "q75", "q90"):
                assert -1.0 <= r[f"{ch}_{s}"] <= 1.0
        for s in ("mean", "median", "q25", "q75", "q90"):
            assert r[f"kl_{s}"] >= 0 and r[f"attn_cos_{s}"] >= 0
        for ch in ("kl", "act_cos", "attn_cos"):
            assert r[f"{ch}_q25"] <= r[f"{ch}_median"] <= r[f"{ch}_q75"] <= r[f"{ch}_q90"]
        assert r["norm_a"] >= 0 and r["norm_b"] >= 0 and r["weight_l2"] >= 0
        sw = table.get(b, a, t).raw
        for name in ("weight_cos", "weight_l2", *(f"{c}_{s}" for c in ("act_cos", "attn_cos") for s in ("mean", "median", "q25", "q75", "q90"))):
            assert sw[name] == pytest.approx(r[name], abs=1e-12)
        assert sw["norm_a"] == r["norm_b"]


def test_invariants_small(small_table):
    _check_invariants(small_table)


@settings(max_examples=5, deadline=None)
@given(st.integers(0, 1000))
def test_invariants_random_catalogs(seed):
    cat = generate_catalog(n_tasks=2, experts_per_task=2, probe_size=4, eval_size=4, seed=seed)
    _check_invariants(build_similarity_table(cat))


def test_cache_equals_fresh(small_catalog, small_table):
    for a, b in ((small_catalog.ids[0], small_catalog.ids[4]), (small_catalog.ids[7], small_catalog.ids[1])):
        fresh = fresh_pair_features(small_catalog.get(a), small_catalog.get(b), "t2", small_catalog)
        cached = small_table.get(a, b, "t2")
        assert list(fresh.raw.values()) == list(cached.raw.values())
