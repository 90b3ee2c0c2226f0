import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from mergeselect.checkpoint import ArchConfig
from mergeselect.operators import (
    MergeError,
    MergeOperator,
    MergePlan,
    OpKind,
    apply_operator,
    execute_plan,
    fold,
    linear_fold_weights,
    linear_vec,
    merge_linear,
    merge_slerp,
    merge_ties,
    slerp_vec,
    ties_vec,
)

from conftest import random_checkpoint

ARCH = ArchConfig()
finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)
vec = arrays(np.float64, st.integers(2, 12), elements=finite)


def ties_oracle(x: float, y: float, alpha: float, tau: float) -> float:
    """Coordinate rule written out branch by branch."""
    if x * y > 0 and max(abs(x), abs(y)) >= tau:
        return alpha * x + (1 - alpha) * y
    if x * y <= 0:
        if abs(x) >= abs(y) and abs(x) >= tau:
            return x
        if abs(y) > abs(x) and abs(y) >= tau:
            return y
    return 0.0


# -- operator type ------------------------------------------------------------


def test_operator_validation():
    with pytest.raises(MergeError):
        MergeOperator(OpKind.LINEAR, 1.5)
    with pytest.raises(MergeError):
        MergeOperator(OpKind.TIES, 0.5, -0.1)
    with pytest.raises(MergeError):
        MergeOperator(OpKind.SLERP, 0.5, 0.05)
    assert MergeOperator(OpKind.TIES).tau == 0.05
    assert MergeOperator.from_dict(MergeOperator(OpKind.TIES, 0.3, 0.2).to_dict()) == MergeOperator(OpKind.TIES, 0.3, 0.2)


def test_plan_validation():
    op = MergeOperator.default("Linear")
    with pytest.raises(MergeError):
        MergePlan(("a",), (), "t")
    with pytest.raises(MergeError):
        MergePlan(("a", "a"), (op,), "t")
    with pytest.raises(MergeError):
        MergePlan(("a", "b", "c"), (op,), "t")
    plan = MergePlan(("a", "b", "c"), (op, MergeOperator.default("Ties")), "t")
    assert MergePlan.from_dict(plan.to_dict()) == plan
    assert set(plan.to_dict()) == {"task_id", "model_ids", "operators"}


# -- Linear -------------------------------------------------------------------


def test_linear_examples():
    a, b = np.array([1.0, 2.0]), np.array([3.0, 4.0])
    assert np.array_equal(linear_vec(a, b, 0.5), [2, 3])
    assert np.array_equal(linear_vec(a, b, 0.0), a)
    assert np.array_equal(linear_vec(a, b, 0.25), [1.5, 2.5])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 1))
def test_linear_properties(seed, alpha):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=20), rng.normal(size=20)
    out = linear_vec(x, y, alpha)
    assert np.all(out <= np.maximum(x, y) + 1e-12) and np.all(out >= np.minimum(x, y) - 1e-12)
    assert np.allclose(out, linear_vec(y, x, 1 - alpha), atol=1e-12)


def test_linear_checkpoint_endpoints():
    a, b = random_checkpoint(ARCH, 1), random_checkpoint(ARCH, 2)
    assert merge_linear(a, b, 0.0).equals(a)
    assert merge_linear(a, b, 1.0).equals(b)


# -- SLERP ----------------------------------------------------------------------


def test_slerp_examples():
    assert np.allclose(slerp_vec(np.array([2.0, 0]), np.array([0, 4.0]), 0.0), [3, 0])
    assert np.allclose(slerp_vec(np.array([1.0, 0]), np.array([0, 2.0]), 0.5), [1.06066, 1.06066], atol=1e-5)
    assert np.allclose(slerp_vec(np.array([1.0, 0]), np.array([0, 2.0]), 0.5), [1.5 / np.sqrt(2)] * 2, atol=1e-12)
    for alpha in (0.0, 0.3, 1.0):
        assert np.allclose(slerp_vec(np.array([1.0, 1]), np.array([1.0, 1]), alpha), [1, 1])


def test_slerp_zero_norm_error():
    with pytest.raises(MergeError):
        slerp_vec(np.zeros(3), np.ones(3), 0.5)


def test_slerp_antipodal_fallback():
    x = np.array([1.0, 2.0])
    # linear fallback at alpha=0.5 cancels exactly; the documented result is zero
    assert np.array_equal(slerp_vec(x, -x, 0.5), [0.0, 0.0])
    out = slerp_vec(x, -2 * x, 0.25)
    assert np.isclose(np.linalg.norm(out), 1.5 * np.linalg.norm(x))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 1))
def test_slerp_norm_and_span(seed, alpha):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=16) * rng.uniform(0.1, 3), rng.normal(size=16) * rng.uniform(0.1, 3)
    out = slerp_vec(x, y, alpha)
    assert abs(np.linalg.norm(out) - 0.5 * (np.linalg.norm(x) + np.linalg.norm(y))) < 1e-5
    basis, _ = np.linalg.qr(np.stack([x, y], 1))
    resid = out - basis @ (basis.T @ out)
    assert np.linalg.norm(resid) < 1e-5


def test_slerp_per_tensor_norm():
    a, b = random_checkpoint(ARCH, 3), random_checkpoint(ARCH, 4, scale=1.5)
    m = merge_slerp(a, b, 0.5)
    for name in a.tensors:
        want = 0.5 * (np.linalg.norm(a[name].astype(np.float64)) + np.linalg.norm(b[name].astype(np.float64)))
        assert abs(np.linalg.norm(m[name].astype(np.float64)) - want) < 1e-5 * max(1.0, want)


def test_slerp_identical_checkpoints():
    a = random_checkpoint(ARCH, 5)
    assert np.allclose(apply_operator(MergeOperator.default("Slerp"), a, a).flatten(), a.flatten(), atol=1e-6)


# -- TIES ---------------------------------------------------------------------


def test_ties_examples():
    assert ties_vec(np.array([0.4]), np.array([0.2]), 0.5, 0.1)[0] == pytest.approx(0.3)
    assert ties_vec(np.array([-0.5]), np.array([0.3]), 0.5, 0.1)[0] == -0.5
    assert ties_vec(np.array([0.05]), np.array([0.08]), 0.5, 0.1)[0] == 0.0


def test_ties_brute_force_coordinates():
    rng = np.random.default_rng(0)
    x = rng.normal(0, 0.1, 10_000)
    y = rng.normal(0, 0.1, 10_000)
    x[:200] = 0.0  # exercise zero-sign branches
    y[100:300] = -x[100:300]
    for alpha, tau in ((0.5, 0.05), (0.3, 0.0), (0.8, 0.12)):
        got = ties_vec(x, y, alpha, tau)
        want = np.array([ties_oracle(a, b, alpha, tau) for a, b in zip(x, y)])
        assert np.array_equal(got, want)


@settings(max_examples=60, deadline=None)
@given(vec, st.floats(0, 1), st.floats(0, 1))
def test_ties_output_is_a_branch(x, alpha, tau):
    y = np.roll(x, 1) * 0.7
    out = ties_vec(x, y, alpha, tau)
    blend = alpha * x + (1 - alpha) * y
    ok = (out == blend) | (out == x) | (out == y) | (out == 0)
    assert np.all(ok)


@settings(max_examples=40, deadline=None)
@given(vec, st.floats(0, 1), st.floats(0, 2))
def test_ties_idempotent_above_threshold(x, alpha, tau):
    out = ties_vec(x, x, alpha, tau)
    keep = np.abs(x) >= tau
    assert np.allclose(out[keep], x[keep], atol=1e-12)


def test_ties_tau_zero_never_prunes_aligned():
    rng = np.random.default_rng(1)
    x, y = np.abs(rng.normal(size=100)) + 1e-9, np.abs(rng.normal(size=100)) + 1e-9
    assert np.allclose(ties_vec(x, y, 0.5, 0.0), 0.5 * (x + y))


def test_ties_alpha_orientation():
    # alpha weights the first argument here, unlike Linear
    x, y = np.array([1.0]), np.array([3.0])
    assert ties_vec(x, y, 0.25, 0.0)[0] == pytest.approx(0.25 * 1 + 0.75 * 3)
    assert linear_vec(x, y, 0.25)[0] == pytest.approx(0.75 * 1 + 0.25 * 3)


# -- dispatch and shapes -----------------------------------------------------------


@pytest.mark.parametrize("kind", ["Linear", "Slerp", "Ties"])
def test_operators_preserve_arch(kind):
    a, b = random_checkpoint(ARCH, 6), random_checkpoint(ARCH, 7)
    m = apply_operator(MergeOperator.default(kind), a, b)
    assert m.arch == a.arch and all(m[n].shape == a[n].shape for n in a.tensors)
    assert np.all(np.isfinite(m.flatten()))


def test_dispatch_matches_direct():
    a, b = random_checkpoint(ARCH, 8), random_checkpoint(ARCH, 9)
    assert apply_operator(MergeOperator(OpKind.LINEAR, 0.5), a, b).equals(merge_linear(a, b, 0.5))
    assert apply_operator(MergeOperator(OpKind.SLERP, 0.3), a, b).equals(merge_slerp(a, b, 0.3))
    assert apply_operator(MergeOperator(OpKind.TIES, 0.5, 0.1), a, b).equals(merge_ties(a, b, 0.5, 0.1))


def test_arch_mismatch():
    a = random_checkpoint(ARCH, 10)
    b = random_checkpoint(ArchConfig(d_model=8), 11)
    with pytest.raises(MergeError):
        merge_linear(a, b)


# -- plans and folds ------------------------------------------------------------


def test_fold_weights():
    assert np.allclose(linear_fold_weights(3), [0.25, 0.25, 0.5])
    assert np.allclose(linear_fold_weights(4), [0.125, 0.125, 0.25, 0.5])
    assert linear_fold_weights(5).sum() == pytest.approx(1.0)


def test_all_linear_fold_algebra():
    cks = [random_checkpoint(ARCH, s) for s in (12, 13, 14)]
    out = fold(cks, [MergeOperator.default("Linear")] * 2)
    want = 0.25 * cks[0].flatten() + 0.25 * cks[1].flatten() + 0.5 * cks[2].flatten()
    assert np.allclose(out.flatten(), want, atol=1e-6)


def test_two_model_plan_is_apply(small_catalog):
    a, b = small_catalog.ids[0], small_catalog.ids[4]
    op = MergeOperator.default("Slerp")
    merged = execute_plan(MergePlan((a, b), (op,), "t0"), small_catalog)
    assert merged.equals(apply_operator(op, small_catalog.get(a), small_catalog.get(b)))


def test_plan_rejects_two_experts_same_task():
    from mergeselect.catalog import MemberInfo, generate_catalog

    cat = generate_catalog(n_tasks=2, experts_per_task=2, probe_size=2, eval_size=4, seed=1)
    other = [m for m in cat.members.values() if m.task == "t0" and not m.is_expert][0]
    # forge a second expert tag on a private catalog to reach the guard
    cat.members[other.id] = MemberInfo(other.id, other.task, other.index, other.strength, True)
    with pytest.raises(MergeError):
        execute_plan(MergePlan.uniform((cat.expert("t0"), other.id), "Linear", "t0"), cat)


def test_unknown_id(small_catalog):
    with pytest.raises(KeyError):
        execute_plan(MergePlan.uniform(("nope", small_catalog.ids[0]), "Linear", "t0"), small_catalog)


def test_slerp_non_associativity_witness():
    found = None
    for seed in range(20):
        a, b, c = (random_checkpoint(ARCH, 100 * seed + i) for i in range(3))
        op = MergeOperator.default("Slerp")
        abc = fold([a, b, c], [op, op]).flatten()
        acb = fold([a, c, b], [op, op]).flatten()
        if np.max(np.abs(abc - acb)) > 1e-3:
            found = seed
            break
    assert found is not None


def test_linear_order_enters_only_through_weights():
    cks = [random_checkpoint(ARCH, s) for s in (20, 21, 22)]
    op = MergeOperator.default("Linear")
    for order in ((0, 1, 2), (1, 0, 2), (2, 1, 0)):
        w = linear_fold_weights(3)
        got = fold([cks[i] for i in order], [op, op]).flatten()
        want = sum(wi * cks[i].flatten() for wi, i in zip(w, order))
        assert np.allclose(got, want, atol=1e-6)
