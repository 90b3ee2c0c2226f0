"""Utility predictor over merge operators.

A two-layer ReLU network maps a standardised feature vector to one predicted
utility per operator.  Training regresses on all operators' observed
utilities (full information) with mean squared error, mini-batch Adam and
early stopping on validation argmax accuracy.  Backpropagation is written out
by hand and is checked against finite differences in the tests.
"""

from __future__ import annotations

import dataclasses
import itertools
import json
import logging
import warnings
from collections import Counter
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .catalog import Catalog, rng_for
from .features import SimilarityTable
from .model import evaluate_utility
from .operators import OPERATOR_ORDER, MergeOperator, OpKind, apply_operator, DEFAULT_TAU

log = logging.getLogger(__name__)

N_OPS = len(OPERATOR_ORDER)
_DATASET_STREAM = 101
_TRAIN_STREAM = 102
SPLITS = ("train", "val", "test")


class SelectorError(ValueError):
    pass


# ---------------------------------------------------------------------------
# dataset


@dataclasses.dataclass(frozen=True, eq=False)
class PairRow:
    id_a: str
    id_b: str
    task_id: str
    features: np.ndarray
    utilities: np.ndarray
    split: str
    u_a: float = float("nan")
    u_b: float = float("nan")

    @property
    def best_op(self) -> OpKind:
        return OPERATOR_ORDER[argmax_first(self.utilities)]

    @property
    def pair_key(self) -> tuple[str, str, str]:
        return (self.id_a, self.id_b, self.task_id)


@dataclasses.dataclass(eq=False)
class PairwiseDataset:
    rows: list[PairRow]
    task_encoding: bool = True

    def split(self, name: str) -> list[PairRow]:
        return [r for r in self.rows if r.split == name]

    def arrays(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        rows = self.split(name)
        if not rows:
            return np.zeros((0, 0)), np.zeros((0, N_OPS))
        return np.stack([r.features for r in rows]), np.stack([r.utilities for r in rows])

    def label_balance(self, splits: Sequence[str] = ("train", "val")) -> dict[str, int]:
        counts = Counter(r.best_op.value for r in self.rows if r.split in splits)
        return {op.value: counts.get(op.value, 0) for op in OPERATOR_ORDER}

    def check_split_hygiene(self) -> None:
        seen: dict[frozenset, str] = {}
        for r in self.rows:
            key = frozenset((r.id_a, r.id_b))
            if seen.setdefault(key, r.split) != r.split:
                raise SelectorError(f"pair {sorted(key)} appears in splits {seen[key]!r} and {r.split!r}")

    def pairs(self, splits: Iterable[str] = SPLITS) -> set[frozenset]:
        splits = set(splits)
        return {frozenset((r.id_a, r.id_b)) for r in self.rows if r.split in splits}


def merge_utilities(catalog: Catalog, id_a: str, id_b: str, task: str, tau: float = DEFAULT_TAU) -> np.ndarray:
    """Execute every operator at alpha = 0.5 on (a, b) and score on ``task``."""
    a, b = catalog.get(id_a), catalog.get(id_b)
    out = np.empty(N_OPS)
    for i, kind in enumerate(OPERATOR_ORDER):
        merged = apply_operator(MergeOperator.default(kind, tau), a, b)
        out[i] = evaluate_utility(merged, catalog.eval_sets[task])
    return out


def _orient(on_task: str, aux: str, orientation: str, rng: np.random.Generator) -> tuple[str, str]:
    if orientation == "aux_first":
        return aux, on_task
    if orientation == "expert_first":
        return on_task, aux
    if orientation == "random":
        return (aux, on_task) if rng.random() < 0.5 else (on_task, aux)
    raise SelectorError(f"unknown orientation {orientation!r}")


def candidate_pairs(catalog: Catalog, designated: bool, tasks: Sequence[str] | None = None) -> list[tuple[str, str, str]]:
    """(on-task member, auxiliary, task) triples.

    With ``designated`` the on-task side is the task's designated expert;
    otherwise it is any other member fine-tuned on the task.
    """
    out = []
    for task in tasks or catalog.tasks:
        expert = catalog.expert(task)
        sides = [expert] if designated else [m for m in catalog.members_of(task) if m != expert]
        for m in sides:
            for aux in catalog.auxiliaries(task):
                if tasks is None or catalog.task_of(aux) in tasks:
                    out.append((m, aux, task))
    return out


def off_task_pairs(catalog: Catalog, tasks: Sequence[str] | None = None) -> list[tuple[str, str, str]]:
    """(member, member, task) triples where neither member belongs to ``task``.

    Only non-designated members are used, so these never coincide with a
    held-out expert pair.
    """
    out = []
    tasks = list(tasks or catalog.tasks)
    for task in tasks:
        others = [t for t in tasks if t != task]
        for t1, t2 in itertools.combinations(others, 2):
            for a in catalog.members_of(t1):
                for b in catalog.members_of(t2):
                    if not catalog.info(a).is_expert and not catalog.info(b).is_expert:
                        out.append((a, b, task))
    return out


def _sample_grouped(pool, n, val_fraction, rng):
    """Draw ``n`` triples, assigning whole unordered-pair groups to one split.

    The same unordered pair can occur under two tasks; keeping the group
    together keeps the splits disjoint at the pair level.
    """
    groups: dict[frozenset, list] = {}
    for c in pool:
        groups.setdefault(frozenset(c[:2]), []).append(c)
    keys = list(groups)
    n_val = int(round(val_fraction * n))
    chosen: list = []
    splits: list[str] = []
    for gi in rng.permutation(len(keys)):
        if len(chosen) == n:
            break
        split = "val" if splits.count("val") < n_val else "train"
        for c in groups[keys[gi]]:
            if len(chosen) < n and (split == "train" or splits.count("val") < n_val):
                chosen.append(c)
                splits.append(split)
    return chosen, splits


def build_pairwise_dataset(
    catalog: Catalog,
    table: SimilarityTable,
    n_pairs: int = 240,
    seed: int = 0,
    n_test: int = 60,
    val_fraction: float = 0.2,
    tau: float = DEFAULT_TAU,
    orientation: str = "aux_first",
    tasks: Sequence[str] | None = None,
    task_encoding: bool = True,
    exclude: Iterable[frozenset] = (),
    off_task_fraction: float = 0.0,
) -> PairwiseDataset:
    """Sample disjoint train/val/test expert-auxiliary pairs and log all operators' utilities.

    Train/val pairs use non-designated task members as the on-task side; the
    held-out test pairs use designated experts, so no training pair can
    reappear in a test or multiway configuration.  ``off_task_fraction`` of
    the train/val rows may instead pair two members from other tasks, which
    shows the regressor what a merge without an on-task parent is worth.
    """
    rng = rng_for(seed, _DATASET_STREAM)
    excluded = set(exclude)
    pool = [c for c in candidate_pairs(catalog, False, tasks) if frozenset(c[:2]) not in excluded]
    test_pool = [c for c in candidate_pairs(catalog, True, tasks) if frozenset(c[:2]) not in excluded]
    if n_pairs > len(pool):
        raise SelectorError(f"requested {n_pairs} training pairs but only {len(pool)} distinct pairs exist")
    if n_test > len(test_pool):
        raise SelectorError(f"requested {n_test} test pairs but only {len(test_pool)} distinct pairs exist")
    chosen_test = [test_pool[i] for i in rng.choice(len(test_pool), size=n_test, replace=False)] if n_test else []
    held_out = {frozenset(c[:2]) for c in chosen_test}
    pool = [c for c in pool if frozenset(c[:2]) not in held_out]
    if n_pairs > len(pool):
        raise SelectorError(f"requested {n_pairs} training pairs but only {len(pool)} remain after holding out test pairs")
    n_off = int(round(off_task_fraction * n_pairs))
    chosen, splits = _sample_grouped(pool, n_pairs - n_off, val_fraction, rng)
    if n_off:
        used = {frozenset(c[:2]) for c in chosen} | held_out | excluded
        off_pool = [c for c in off_task_pairs(catalog, tasks) if frozenset(c[:2]) not in used]
        if n_off > len(off_pool):
            raise SelectorError(f"requested {n_off} off-task pairs but only {len(off_pool)} exist")
        off, off_splits = _sample_grouped(off_pool, n_off, val_fraction, rng)
        chosen += off
        splits += off_splits
    rows = []
    for (on_task, aux, task), split in zip(chosen + chosen_test, splits + ["test"] * len(chosen_test)):
        a, b = _orient(on_task, aux, orientation, rng)
        rows.append(
            PairRow(
                a,
                b,
                task,
                table.vector(a, b, task, task_encoding),
                merge_utilities(catalog, a, b, task, tau),
                split,
                catalog.utility(a, task),
                catalog.utility(b, task),
            )
        )
    ds = PairwiseDataset(rows, task_encoding)
    ds.check_split_hygiene()
    log.info("pairwise dataset: %d rows, label balance %s", len(rows), ds.label_balance())
    return ds


# ---------------------------------------------------------------------------
# model


def argmax_first(values: Sequence[float]) -> int:
    """Argmax with ties resolved toward the lowest index (Linear < Slerp < Ties)."""
    v = np.asarray(values)
    return int(np.flatnonzero(v == v.max())[0])


@dataclasses.dataclass(frozen=True)
class SelectorHyperparams:
    hidden: int = 64
    dropout: float = 0.1
    lr: float = 1e-3
    batch_size: int = 32
    patience: int = 10
    max_epochs: int = 2000
    min_epochs: int = 300
    weight_decay: float = 0.0
    seed: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclasses.dataclass(eq=False)
class SelectorModel:
    """Standardiser plus two affine maps with a ReLU in between."""

    mean: np.ndarray
    std: np.ndarray
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    y_mean: float = 0.0
    y_scale: float = 1.0
    hyperparams: SelectorHyperparams = dataclasses.field(default_factory=SelectorHyperparams)
    metadata: dict = dataclasses.field(default_factory=dict)

    @property
    def input_dim(self) -> int:
        return self.W1.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.W1.shape[1]

    def params(self) -> list[np.ndarray]:
        return [self.W1, self.b1, self.W2, self.b2]

    def _check(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.input_dim:
            raise SelectorError(f"feature dimension {x.shape[-1]} != model input {self.input_dim}")
        return x

    def standardize(self, x: np.ndarray) -> np.ndarray:
        return (self._check(x) - self.mean) / self.std

    def hidden(self, x: np.ndarray) -> np.ndarray:
        """Post-ReLU hidden representation (the bandit's context encoding)."""
        return np.maximum(self.standardize(x) @ self.W1 + self.b1, 0.0)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return (self.hidden(x) @ self.W2 + self.b2) * self.y_scale + self.y_mean

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for p in (self.mean, self.std, *self.params()):
            h.update(np.ascontiguousarray(p).tobytes())
        h.update(repr((self.y_mean, self.y_scale)).encode())
        return h.hexdigest()

    def equals(self, other: "SelectorModel") -> bool:
        return self.digest() == other.digest()


def predict_utilities(model: SelectorModel, x: np.ndarray) -> np.ndarray:
    return model.predict(np.asarray(x, dtype=np.float64))


def predict_operator(model: SelectorModel, x: np.ndarray) -> OpKind:
    return OPERATOR_ORDER[argmax_first(predict_utilities(model, x))]


# ---------------------------------------------------------------------------
# training


def fit_standardizer(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std = np.where(std > 1e-12, std, 1.0)
    return mean, std


def loss_and_grads(
    params: Sequence[np.ndarray], Xs: np.ndarray, Y: np.ndarray, mask: np.ndarray | None = None
) -> tuple[float, list[np.ndarray]]:
    """MSE over all outputs and its gradients for standardised inputs ``Xs``.

    ``mask`` is an optional pre-scaled dropout mask on the hidden layer.
    """
    W1, b1, W2, b2 = params
    n = Xs.shape[0]
    pre = Xs @ W1 + b1
    h = np.maximum(pre, 0.0)
    if mask is not None:
        h = h * mask
    out = h @ W2 + b2
    diff = out - Y
    loss = float(np.mean(diff**2))
    g_out = 2.0 * diff / diff.size
    gW2 = h.T @ g_out
    gb2 = g_out.sum(axis=0)
    g_h = g_out @ W2.T
    if mask is not None:
        g_h = g_h * mask
    g_pre = g_h * (pre > 0)
    gW1 = Xs.T @ g_pre
    gb1 = g_pre.sum(axis=0)
    return loss, [gW1, gb1, gW2, gb2]


class Adam:
    def __init__(self, params: Sequence[np.ndarray], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: Sequence[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def init_model(input_dim: int, hp: SelectorHyperparams, mean=None, std=None, n_out: int = N_OPS) -> SelectorModel:
    rng = rng_for(hp.seed, _TRAIN_STREAM)
    W1 = rng.normal(0.0, np.sqrt(2.0 / input_dim), (input_dim, hp.hidden))
    W2 = rng.normal(0.0, np.sqrt(1.0 / hp.hidden), (hp.hidden, n_out))
    return SelectorModel(
        np.zeros(input_dim) if mean is None else mean,
        np.ones(input_dim) if std is None else std,
        W1,
        np.zeros(hp.hidden),
        W2,
        np.zeros(n_out),
        hyperparams=hp,
    )


def _accuracy(model: SelectorModel, X: np.ndarray, Y: np.ndarray) -> float:
    if len(X) == 0:
        return 0.0
    pred = model.predict(X)
    return float(np.mean([argmax_first(p) == argmax_first(y) for p, y in zip(pred, Y)]))


def _round_f32(model: SelectorModel) -> None:
    for name in ("mean", "std", "W1", "b1", "W2", "b2"):
        setattr(model, name, getattr(model, name).astype(np.float32).astype(np.float64))
    model.y_mean = float(np.float32(model.y_mean))
    model.y_scale = float(np.float32(model.y_scale))


def train_regressor(
    X: np.ndarray,
    Y: np.ndarray,
    Xv: np.ndarray,
    Yv: np.ndarray,
    hp: SelectorHyperparams = SelectorHyperparams(),
    history: list | None = None,
) -> SelectorModel:
    """Fit the two-layer network on (X, Y), early-stopping on (Xv, Yv)."""
    if len(X) == 0 or len(Xv) == 0:
        raise SelectorError("training and validation splits must be nonempty")
    mean, std = fit_standardizer(X)
    model = init_model(X.shape[1], hp, mean, std, Y.shape[1])
    model.y_mean = float(Y.mean())
    spread = float(Y.std())
    model.y_scale = spread if spread > 1e-12 else 1.0
    Xs = (X - mean) / std
    Ys = (Y - model.y_mean) / model.y_scale
    if len({argmax_first(y) for y in Y}) < 2:
        warnings.warn("training labels contain a single operator class", RuntimeWarning, stacklevel=2)

    rng = rng_for(hp.seed, _TRAIN_STREAM, 1)
    params = model.params()
    opt = Adam(params, hp.lr)
    best = (-1.0, np.inf)
    best_params = [p.copy() for p in params]
    stale = 0
    keep = 1.0 - hp.dropout
    for epoch in range(hp.max_epochs):
        order = rng.permutation(len(Xs))
        for start in range(0, len(order), hp.batch_size):
            idx = order[start : start + hp.batch_size]
            mask = None
            if hp.dropout > 0:
                mask = (rng.random((len(idx), hp.hidden)) < keep) / keep
            loss, grads = loss_and_grads(params, Xs[idx], Ys[idx], mask)
            if hp.weight_decay:
                grads[0] = grads[0] + hp.weight_decay * params[0]
                grads[2] = grads[2] + hp.weight_decay * params[2]
            opt.step(params, grads)
            if history is not None:
                history.append(loss)
        val_acc = _accuracy(model, Xv, Yv)
        val_mse = float(np.mean((model.predict(Xv) - Yv) ** 2))
        if val_acc > best[0] or (val_acc == best[0] and val_mse < best[1]):
            best = (val_acc, val_mse)
            best_params = [p.copy() for p in params]
            stale = 0
        else:
            stale += 1
            if stale >= hp.patience and epoch + 1 >= hp.min_epochs:
                break
    model.W1, model.b1, model.W2, model.b2 = best_params
    _round_f32(model)
    return model


def train_selector(
    dataset: PairwiseDataset, hyperparams: SelectorHyperparams = SelectorHyperparams(), tasks: Sequence[str] | None = None
) -> SelectorModel:
    X, Y = dataset.arrays("train")
    Xv, Yv = dataset.arrays("val")
    model = train_regressor(X, Y, Xv, Yv, hyperparams)
    model.metadata = {"task_encoding": dataset.task_encoding, "tasks": list(tasks) if tasks else None}
    return model


def sweep_hyperparams(
    dataset: PairwiseDataset, grid: dict[str, Sequence], base: SelectorHyperparams = SelectorHyperparams()
) -> list[tuple[SelectorHyperparams, float]]:
    """Train one model per point of ``grid`` and score it by validation argmax accuracy.

    Returns (hyperparams, val accuracy) sorted best first; ties keep grid order.
    """
    X, Y = dataset.arrays("train")
    Xv, Yv = dataset.arrays("val")
    names = list(grid)
    results = []
    for values in itertools.product(*(grid[n] for n in names)):
        hp = dataclasses.replace(base, **dict(zip(names, values)))
        model = train_regressor(X, Y, Xv, Yv, hp)
        results.append((hp, _accuracy(model, Xv, Yv)))
    return sorted(results, key=lambda r: -r[1])


# ---------------------------------------------------------------------------
# evaluation


@dataclasses.dataclass
class ClassifierReport:
    confusion: np.ndarray  # rows: true best operator, cols: predicted
    per_class_recall: dict[str, float]
    accuracy: float
    n: int

    def to_dict(self) -> dict:
        return {
            "operators": [op.value for op in OPERATOR_ORDER],
            "confusion": self.confusion.tolist(),
            "per_class_recall": self.per_class_recall,
            "accuracy": self.accuracy,
            "n": self.n,
        }


def confusion_report(true_idx: Sequence[int], pred_idx: Sequence[int]) -> ClassifierReport:
    if len(true_idx) == 0:
        raise SelectorError("empty evaluation split")
    cm = np.zeros((N_OPS, N_OPS), dtype=int)
    for t, p in zip(true_idx, pred_idx):
        cm[t, p] += 1
    recall = {}
    for i, op in enumerate(OPERATOR_ORDER):
        support = cm[i].sum()
        recall[op.value] = float(cm[i, i] / support) if support else float("nan")
    return ClassifierReport(cm, recall, float(np.trace(cm) / cm.sum()), int(cm.sum()))


def evaluate_classifier(model: SelectorModel, rows: Sequence[PairRow]) -> ClassifierReport:
    true_idx = [argmax_first(r.utilities) for r in rows]
    pred_idx = [argmax_first(model.predict(r.features)) for r in rows]
    return confusion_report(true_idx, pred_idx)


# ---------------------------------------------------------------------------
# persistence


def save_model(model: SelectorModel, path: str | Path) -> None:
    path = Path(path)
    for suffix in (".manifest.json", ".bin"):
        if path.name.endswith(suffix):
            path = path.with_name(path.name[: -len(suffix)])
    arrays = {"W1": model.W1, "b1": model.b1, "W2": model.W2, "b2": model.b2}
    index, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        data = arr.astype("<f4").tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(data)
        offset += len(data)
    manifest = {
        "format_version": 1,
        "input_dim": model.input_dim,
        "hidden_dim": model.hidden_dim,
        "output_dim": int(model.W2.shape[1]),
        "operators": [op.value for op in OPERATOR_ORDER],
        "hyperparams": model.hyperparams.to_dict(),
        "standardizer": {"mean": [float(v) for v in model.mean], "std": [float(v) for v in model.std]},
        "target_scale": {"mean": model.y_mean, "scale": model.y_scale},
        "metadata": model.metadata,
        "tensors": index,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.with_name(path.name + ".manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    path.with_name(path.name + ".bin").write_bytes(b"".join(chunks))


def load_model(path: str | Path) -> SelectorModel:
    path = Path(path)
    for suffix in (".manifest.json", ".bin"):
        if path.name.endswith(suffix):
            path = path.with_name(path.name[: -len(suffix)])
    manifest = json.loads(path.with_name(path.name + ".manifest.json").read_text())
    blob = path.with_name(path.name + ".bin").read_bytes()
    arrays = {}
    for entry in manifest["tensors"]:
        count = int(np.prod(entry["shape"]))
        if entry["offset"] + 4 * count > len(blob):
            raise SelectorError("truncated blob")
        arrays[entry["name"]] = (
            np.frombuffer(blob, dtype="<f4", count=count, offset=entry["offset"]).reshape(entry["shape"]).astype(np.float64)
        )
    std = manifest["standardizer"]
    return SelectorModel(
        np.asarray(std["mean"], dtype=np.float64),
        np.asarray(std["std"], dtype=np.float64),
        arrays["W1"],
        arrays["b1"],
        arrays["W2"],
        arrays["b2"],
        float(manifest["target_scale"]["mean"]),
        float(manifest["target_scale"]["scale"]),
        SelectorHyperparams(**manifest["hyperparams"]),
        dict(manifest.get("metadata", {})),
    )
