"""Neural-linear contextual bandit over merge operators.

A selector-shaped network is trained on logged pairwise merges and then
frozen; its hidden layer is the context representation ``z``.  Each operator
keeps a Bayesian ridge posterior ``A = lam I + sum z z^T``, ``b = sum r z``,
``w = A^{-1} b``.  Warm start uses every logged arm (full information);
online rounds update only the arm that was played (partial feedback).
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import itertools
import json
from pathlib import Path
from typing import Sequence

import numpy as np

from .catalog import Catalog, rng_for
from .features import SimilarityTable
from .model import evaluate_utility
from .operators import DEFAULT_TAU, OPERATOR_ORDER, MergeOperator, MergePlan, OpKind, apply_operator, execute_plan
from .planning import MixtureProxy, intermediate_features
from .selector import PairwiseDataset, SelectorHyperparams, SelectorModel, argmax_first, train_regressor

POLICIES = ("lints", "linucb", "uniform", "oracle")
_ONLINE_STREAM = 301
_POLICY_STREAM = 302


class BanditError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class BanditConfig:
    lam: float = 1.0
    sigma2: float = 0.1
    ts_scale: float = float(np.sqrt(0.1))
    ucb_beta: float = 1.0
    tau: float = DEFAULT_TAU

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class ContextEncoder:
    """Hidden layer of a trained selector network, frozen after warm start."""

    def __init__(self, hyperparams: SelectorHyperparams = SelectorHyperparams(), model: SelectorModel | None = None):
        self.hyperparams = hyperparams
        self.model = model
        self.frozen = False

    @property
    def dim(self) -> int:
        if self.model is None:
            raise BanditError("encoder not trained")
        return self.model.hidden_dim

    def fit(self, dataset: PairwiseDataset) -> None:
        if self.frozen:
            raise BanditError("encoder is frozen")
        X, Y = dataset.arrays("train")
        Xv, Yv = dataset.arrays("val")
        if len(X) == 0:
            raise BanditError("empty dataset")
        if len(Xv) == 0:
            Xv, Yv = X, Y
        self.model = train_regressor(X, Y, Xv, Yv, self.hyperparams)

    def freeze(self) -> None:
        if self.model is None:
            raise BanditError("cannot freeze an untrained encoder")
        for p in (self.model.mean, self.model.std, *self.model.params()):
            p.flags.writeable = False
        self.frozen = True

    def encode(self, x: np.ndarray) -> np.ndarray:
        if self.model is None:
            raise BanditError("encoder not trained")
        return self.model.hidden(x)

    def digest(self) -> str:
        return self.model.digest() if self.model is not None else ""


@dataclasses.dataclass(frozen=True, eq=False)
class ArmPosterior:
    arm: OpKind
    A: np.ndarray
    b: np.ndarray
    A_inv: np.ndarray
    mean: np.ndarray
    lam: float = 1.0
    sigma2: float = 0.1

    @classmethod
    def prior(cls, arm: OpKind, d: int, lam: float = 1.0, sigma2: float = 0.1) -> "ArmPosterior":
        if lam <= 0 or sigma2 <= 0:
            raise BanditError("lam and sigma2 must be positive")
        return cls(OpKind(arm), lam * np.eye(d), np.zeros(d), np.eye(d) / lam, np.zeros(d), lam, sigma2)

    @property
    def dim(self) -> int:
        return self.b.shape[0]

    @property
    def covariance(self) -> np.ndarray:
        return self.sigma2 * self.A_inv

    def recomputed_mean(self) -> np.ndarray:
        return np.linalg.solve(self.A, self.b)

    def cholesky(self) -> np.ndarray:
        try:
            return np.linalg.cholesky(self.A)
        except np.linalg.LinAlgError as exc:
            raise BanditError(f"precision of arm {self.arm.value} lost positive definiteness: {exc}") from None

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.A, self.b, self.A_inv, self.mean):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def posterior_update(post: ArmPosterior, z: np.ndarray, r: float) -> ArmPosterior:
    """Rank-one update in O(d^2) via the Sherman-Morrison identity."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (post.dim,):
        raise BanditError(f"context dimension {z.shape} != posterior dimension {post.dim}")
    if not np.isfinite(r) or not np.all(np.isfinite(z)):
        raise BanditError("non-finite context or reward")
    Az = post.A_inv @ z
    denom = 1.0 + float(z @ Az)
    if denom <= 0:
        raise BanditError(f"precision update lost positive definiteness (1 + z'A^-1 z = {denom})")
    A = post.A + np.outer(z, z)
    A_inv = post.A_inv - np.outer(Az, Az) / denom
    b = post.b + r * z
    return dataclasses.replace(post, A=A, b=b, A_inv=A_inv, mean=A_inv @ b)


def _as_rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else rng_for(int(seed), _POLICY_STREAM)


def select_arm_lints(posteriors: Sequence[ArmPosterior], z: np.ndarray, seed=0, scale: float = float(np.sqrt(0.1))) -> OpKind:
    """Thompson draw ``w ~ N(mean, scale^2 A^{-1})`` per arm, then argmax ``w'z``."""
    rng = _as_rng(seed)
    values = []
    for post in posteriors:
        L = post.cholesky()
        eps = rng.standard_normal(post.dim)
        # A = L L^T, so L^{-T} eps has covariance A^{-1}
        w = post.mean + scale * np.linalg.solve(L.T, eps)
        values.append(float(w @ z))
    return posteriors[argmax_first(values)].arm


def select_arm_linucb(posteriors: Sequence[ArmPosterior], z: np.ndarray, beta: float = 1.0) -> OpKind:
    values = [float(p.mean @ z) + beta * float(np.sqrt(max(z @ p.A_inv @ z, 0.0))) for p in posteriors]
    return posteriors[argmax_first(values)].arm


def fresh_posteriors(d: int, config: BanditConfig = BanditConfig()) -> list[ArmPosterior]:
    return [ArmPosterior.prior(op, d, config.lam, config.sigma2) for op in OPERATOR_ORDER]


def warm_start(
    encoder: ContextEncoder,
    posteriors: Sequence[ArmPosterior] | None,
    dataset: PairwiseDataset,
    config: BanditConfig = BanditConfig(),
    reward_offset: float | None = None,
) -> tuple[ContextEncoder, list[ArmPosterior], float]:
    """Fit and freeze the encoder, then feed every logged arm to its posterior.

    Rewards enter the posteriors shifted by ``reward_offset`` (default: the
    encoder's mean training utility) so the intercept-free ridge model does
    not have to absorb the utility level; the shift is common to all arms.
    """
    rows = [r for r in dataset.rows if r.split in ("train", "val")]
    if not rows:
        raise BanditError("empty dataset")
    if encoder.model is None:
        encoder.fit(dataset)
    encoder.freeze()
    offset = encoder.model.y_mean if reward_offset is None else float(reward_offset)
    posts = list(posteriors) if posteriors is not None else fresh_posteriors(encoder.dim, config)
    for row in rows:
        z = encoder.encode(row.features)
        for i in range(len(posts)):
            posts[i] = posterior_update(posts[i], z, float(row.utilities[i]) - offset)
    return encoder, posts, offset


# ---------------------------------------------------------------------------
# online loop


@dataclasses.dataclass
class BanditLog:
    policy: str
    rounds: list[dict] = dataclasses.field(default_factory=list)

    @property
    def regrets(self) -> np.ndarray:
        return np.array([r["regret"] for r in self.rounds])

    @property
    def cumulative_regret(self) -> np.ndarray:
        return np.cumsum(self.regrets) if self.rounds else np.zeros(0)

    @property
    def final_regret(self) -> float:
        c = self.cumulative_regret
        return float(c[-1]) if c.size else 0.0

    def write_jsonl(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w") as fh:
            for r in self.rounds:
                fh.write(json.dumps(r, sort_keys=True) + "\n")

    def write_regret_csv(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["round", "policy", "regret", "cumulative_regret"])
            for r, c in zip(self.rounds, self.cumulative_regret):
                w.writerow([r["round"], self.policy, repr(r["regret"]), repr(float(c))])


@dataclasses.dataclass
class BanditState:
    encoder: ContextEncoder
    posteriors: list[ArmPosterior]
    reward_offset: float
    config: BanditConfig = dataclasses.field(default_factory=BanditConfig)

    def copy(self) -> "BanditState":
        return BanditState(self.encoder, list(self.posteriors), self.reward_offset, self.config)


class RewardOracle:
    """Executes and scores merges; memoised so every policy sees the same numbers."""

    def __init__(self, catalog: Catalog, tau: float = DEFAULT_TAU):
        self.catalog = catalog
        self.tau = tau
        self._cache: dict[tuple, float] = {}
        self.executions = 0

    def pair(self, a: str, b: str, task: str) -> np.ndarray:
        out = np.empty(len(OPERATOR_ORDER))
        for i, kind in enumerate(OPERATOR_ORDER):
            key = (a, b, task, (kind.value,))
            if key not in self._cache:
                merged = apply_operator(MergeOperator.default(kind, self.tau), self.catalog.get(a), self.catalog.get(b))
                self._cache[key] = evaluate_utility(merged, self.catalog.eval_sets[task])
                self.executions += 1
            out[i] = self._cache[key]
        return out

    def plan(self, plan: MergePlan) -> float:
        key = (plan.model_ids, plan.task_id, tuple(op.kind.value for op in plan.operators))
        if key not in self._cache:
            self._cache[key] = evaluate_utility(execute_plan(plan, self.catalog), self.catalog.eval_sets[plan.task_id])
            self.executions += 1
        return self._cache[key]


def shift_instances(catalog: Catalog, shift_task: str, k: int = 2) -> list[tuple[tuple[str, ...], str]]:
    """Merge instances involving checkpoints of the held-out task, scored on that task.

    Each instance is (order, task) with the shifted checkpoint last; for
    ``k > 2`` the auxiliaries come from distinct other tasks.
    """
    if shift_task not in catalog.tasks:
        raise BanditError(f"shift task {shift_task!r} not in catalog")
    others = [t for t in catalog.tasks if t != shift_task]
    if k - 1 > len(others):
        raise BanditError(f"k={k} needs {k - 1} auxiliary tasks, only {len(others)} available")
    out = []
    for m in catalog.members_of(shift_task):
        if k == 2:
            for aux in catalog.auxiliaries(shift_task):
                out.append(((aux, m), shift_task))
        else:
            for tasks in itertools.combinations(others, k - 1):
                for auxs in itertools.product(*(catalog.members_of(t) for t in tasks)):
                    out.append((tuple(auxs) + (m,), shift_task))
    return out


def run_online(
    catalog: Catalog,
    table: SimilarityTable,
    policy: str,
    rounds: int,
    shift_task: str,
    seed: int,
    state: BanditState,
    oracle: RewardOracle | None = None,
    k: int = 2,
    instances: Sequence[tuple[tuple[str, ...], str]] | None = None,
    task_encoding: bool = True,
    on_round=None,
) -> BanditLog:
    """Sequential rounds on shifted merge instances; mutates ``state.posteriors``.

    The instance sequence depends only on ``seed`` so that every policy faces
    the same merges.  For ``k > 2`` each step of a fixed-order plan is a
    decision and the final utility is credited to every step's arm.
    """
    if policy not in POLICIES:
        raise BanditError(f"unknown policy {policy!r}; expected one of {POLICIES}")
    if rounds < 0:
        raise BanditError("rounds must be nonnegative")
    if not state.encoder.frozen:
        raise BanditError("warm-start the bandit before running online")
    oracle = oracle or RewardOracle(catalog, state.config.tau)
    pool = list(instances) if instances is not None else shift_instances(catalog, shift_task, k)
    if not pool:
        raise BanditError("no merge instances for the shift task")
    inst_rng = rng_for(seed, _ONLINE_STREAM)
    picks = inst_rng.integers(0, len(pool), size=rounds)
    pol_rng = rng_for(seed, _POLICY_STREAM, POLICIES.index(policy))
    cfg = state.config
    log = BanditLog(policy)
    for rnd, pick in enumerate(picks):
        order, task = pool[int(pick)]
        contexts = _step_contexts(order, table, task, state.encoder, task_encoding)
        if len(order) == 2:
            arm_rewards = oracle.pair(order[0], order[1], task)
            combos = [(i,) for i in range(len(OPERATOR_ORDER))]
        else:
            combos = list(itertools.product(range(len(OPERATOR_ORDER)), repeat=len(order) - 1))
            arm_rewards = np.array([oracle.plan(_plan(order, c, task, cfg.tau)) for c in combos])
        best = float(arm_rewards.max())
        if policy == "oracle":
            choice = combos[argmax_first(arm_rewards)]
        elif policy == "uniform":
            choice = tuple(int(pol_rng.integers(len(OPERATOR_ORDER))) for _ in contexts)
        elif policy == "lints":
            choice = tuple(
                select_arm_lints(state.posteriors, z, pol_rng, cfg.ts_scale).index for z in contexts
            )
        else:
            choice = tuple(select_arm_linucb(state.posteriors, z, cfg.ucb_beta).index for z in contexts)
        reward = float(arm_rewards[combos.index(choice)])
        if policy in ("lints", "linucb"):
            for z, arm in zip(contexts, choice):
                state.posteriors[arm] = posterior_update(state.posteriors[arm], z, reward - state.reward_offset)
                state.posteriors[arm].cholesky()
        record = {
            "round": rnd,
            "context_id": "|".join(order) + "@" + task,
            "chosen_arm": [OPERATOR_ORDER[c].value for c in choice] if len(choice) > 1 else OPERATOR_ORDER[choice[0]].value,
            "reward": reward,
            "oracle_reward": best,
            "regret": max(best - reward, 0.0),
        }
        if len(order) == 2:
            record["arm_rewards"] = {op.value: float(u) for op, u in zip(OPERATOR_ORDER, arm_rewards)}
        log.rounds.append(record)
        if on_round is not None:
            on_round(rnd, state)
    return log


def _plan(order, combo, task, tau) -> MergePlan:
    return MergePlan(tuple(order), tuple(MergeOperator.default(OPERATOR_ORDER[c], tau) for c in combo), task)


def _step_contexts(order, table, task, encoder, task_encoding) -> list[np.ndarray]:
    prefix = MixtureProxy.singleton(order[0])
    out = []
    for mid in order[1:]:
        out.append(encoder.encode(intermediate_features(prefix, mid, table, task, task_encoding)))
        prefix = prefix.fold(mid)
    return out
