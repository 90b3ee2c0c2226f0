"""Pre-merge similarity features for ordered checkpoint pairs.

Three probe-based channels (next-token KL, hidden-state cosine, attention
cosine) are each reduced to five summaries; four weight-space scalars follow.
The layout is fixed and documented by :data:`FEATURE_NAMES`:

    kl_{mean,median,q25,q75,q90}
    act_cos_{mean,median,q25,q75,q90}
    attn_cos_{mean,median,q25,q75,q90}
    weight_cos, weight_l2, norm_a, norm_b

A one-hot task code may be appended (``x ⊕ c(t)``).
"""

from __future__ import annotations

import csv
import dataclasses
import json
from collections import OrderedDict
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .catalog import Catalog
from .checkpoint import Checkpoint
from .model import ForwardTrace, forward_many, log_softmax

KL_EPS = 1e-12
SUMMARY_NAMES = ("mean", "median", "q25", "q75", "q90")
CHANNELS = ("kl", "act_cos", "attn_cos")
SCALAR_NAMES = ("weight_cos", "weight_l2", "norm_a", "norm_b")
FEATURE_NAMES: tuple[str, ...] = tuple(f"{c}_{s}" for c in CHANNELS for s in SUMMARY_NAMES) + SCALAR_NAMES
N_FEATURES = len(FEATURE_NAMES)


class FeatureError(ValueError):
    pass


def summarize(values: np.ndarray) -> np.ndarray:
    """(mean, median, q25, q75, q90) with linear-interpolated quantiles."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise FeatureError("cannot summarize an empty sequence")
    q = np.quantile(v, [0.5, 0.25, 0.75, 0.90])
    return np.array([v.mean(), q[0], q[1], q[2], q[3]])


@dataclasses.dataclass(frozen=True, eq=False)
class ProbeOutputs:
    """Stacked traces of one checkpoint over one probe set."""

    logp: np.ndarray  # (P, T, V) stabilised log-probabilities
    hidden: np.ndarray  # (P, L, T*d)
    attention: np.ndarray  # (P, L, H, T*T)
    prompt_ids: tuple[str, ...]

    @classmethod
    def from_traces(cls, traces: Sequence[ForwardTrace]) -> "ProbeOutputs":
        if not traces:
            raise FeatureError("no traces")
        lengths = {t.length for t in traces}
        if len(lengths) != 1:
            raise FeatureError("probe prompts must share one length")
        logits = np.stack([t.logits for t in traces])
        probs = np.exp(log_softmax(logits))
        logp = np.log(np.maximum(probs, KL_EPS))
        P = len(traces)
        hidden = np.stack([t.hidden for t in traces]).reshape(P, traces[0].hidden.shape[0], -1)
        att = np.stack([t.attention for t in traces])
        attention = att.reshape(P, att.shape[1], att.shape[2], -1)
        return cls(logp, hidden, attention, tuple(t.prompt_id for t in traces))

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.logp)


def _as_outputs(x: ProbeOutputs | Sequence[ForwardTrace]) -> ProbeOutputs:
    return x if isinstance(x, ProbeOutputs) else ProbeOutputs.from_traces(x)


def _check_same_prompts(a: ProbeOutputs, b: ProbeOutputs) -> None:
    if a.prompt_ids != b.prompt_ids or a.logp.shape != b.logp.shape:
        raise FeatureError("trace sets cover different prompts")


def kl_per_prompt(a: ProbeOutputs | Sequence[ForwardTrace], b: ProbeOutputs | Sequence[ForwardTrace]) -> np.ndarray:
    """Position-averaged KL(p_a || p_b) for each prompt."""
    a, b = _as_outputs(a), _as_outputs(b)
    _check_same_prompts(a, b)
    pa = np.exp(a.logp)
    kl = np.sum(pa * (a.logp - b.logp), axis=-1)
    return np.maximum(kl, 0.0).mean(axis=-1)


def _cosine_rows(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    nu = np.linalg.norm(u, axis=-1)
    nv = np.linalg.norm(v, axis=-1)
    if np.any(nu == 0) or np.any(nv == 0):
        raise FeatureError("zero vector in cosine similarity")
    return np.clip(np.sum(u * v, axis=-1) / (nu * nv), -1.0, 1.0)


def act_cos_per_layer(a, b) -> np.ndarray:
    """Per-layer cosine of flattened hidden states, averaged over prompts."""
    a, b = _as_outputs(a), _as_outputs(b)
    _check_same_prompts(a, b)
    return _cosine_rows(a.hidden, b.hidden).mean(axis=0)


def attn_cos_values(a, b) -> np.ndarray:
    """Cosine of flattened attention maps for every (prompt, layer, head)."""
    a, b = _as_outputs(a), _as_outputs(b)
    _check_same_prompts(a, b)
    return _cosine_rows(a.attention, b.attention).ravel()


def kl_features(traces_a, traces_b) -> np.ndarray:
    return summarize(kl_per_prompt(traces_a, traces_b))


def activation_cosine_features(traces_a, traces_b) -> np.ndarray:
    return summarize(act_cos_per_layer(traces_a, traces_b))


def attention_cosine_features(traces_a, traces_b) -> np.ndarray:
    return summarize(attn_cos_values(traces_a, traces_b))


def weight_metrics(a: Checkpoint, b: Checkpoint) -> dict[str, float]:
    if a.arch != b.arch:
        raise FeatureError("architecture mismatch")
    return weight_metrics_vec(a.flatten(), b.flatten())


def weight_metrics_vec(ta: np.ndarray, tb: np.ndarray) -> dict[str, float]:
    na, nb = float(np.linalg.norm(ta)), float(np.linalg.norm(tb))
    cos = float(np.clip(np.dot(ta, tb) / (na * nb), -1.0, 1.0)) if na > 0 and nb > 0 else 0.0
    return {"weight_cos": cos, "weight_l2": float(np.linalg.norm(ta - tb)), "norm_a": na, "norm_b": nb}


@dataclasses.dataclass(frozen=True)
class TaskEncoding:
    task_id: str
    code: tuple[float, ...]

    def __post_init__(self) -> None:
        c = np.asarray(self.code)
        if c.ndim != 1 or np.count_nonzero(c == 1.0) != 1 or np.count_nonzero(c) != 1:
            raise FeatureError("task code must be one-hot")

    @classmethod
    def one_hot(cls, task_id: str, tasks: Sequence[str]) -> "TaskEncoding":
        if task_id not in tasks:
            raise FeatureError(f"unknown task {task_id!r}")
        code = tuple(1.0 if t == task_id else 0.0 for t in tasks)
        return cls(task_id, code)


@dataclasses.dataclass(frozen=True, eq=False)
class PairFeatures:
    """Raw summaries for one ordered pair on one task.

    ``sequences`` keeps the per-element values behind each channel (per-prompt
    KL, per-layer activation cosine, per-(prompt, layer, head) attention
    cosine) so intermediate merges can be propagated before summarising.
    """

    pair: tuple[str, str]
    task_id: str
    raw: "OrderedDict[str, float]"
    sequences: Mapping[str, np.ndarray]

    @property
    def x(self) -> np.ndarray:
        return build_feature_vector(self.raw)


def raw_from_parts(sequences: Mapping[str, np.ndarray], scalars: Mapping[str, float]) -> "OrderedDict[str, float]":
    raw: OrderedDict[str, float] = OrderedDict()
    for channel in CHANNELS:
        for name, value in zip(SUMMARY_NAMES, summarize(sequences[channel])):
            raw[f"{channel}_{name}"] = float(value)
    for name in SCALAR_NAMES:
        raw[name] = float(scalars[name])
    return raw


def pair_features(
    id_a: str, id_b: str, task_id: str, out_a: ProbeOutputs, out_b: ProbeOutputs, theta_a: np.ndarray, theta_b: np.ndarray
) -> PairFeatures:
    seqs = {
        "kl": kl_per_prompt(out_a, out_b),
        "act_cos": act_cos_per_layer(out_a, out_b),
        "attn_cos": attn_cos_values(out_a, out_b),
    }
    return PairFeatures((id_a, id_b), task_id, raw_from_parts(seqs, weight_metrics_vec(theta_a, theta_b)), seqs)


def build_feature_vector(raw: Mapping[str, float], encoding: TaskEncoding | None = None) -> np.ndarray:
    missing = [n for n in FEATURE_NAMES if n not in raw]
    if missing:
        raise FeatureError(f"missing feature fields: {missing}")
    x = np.array([raw[n] for n in FEATURE_NAMES], dtype=np.float64)
    if encoding is not None:
        x = np.concatenate([x, np.asarray(encoding.code, dtype=np.float64)])
    return x


def feature_names(tasks: Sequence[str] | None = None) -> list[str]:
    names = list(FEATURE_NAMES)
    if tasks:
        names += [f"task={t}" for t in tasks]
    return names


class SimilarityTable:
    """Cached probe outputs plus ordered-pair features for a catalog."""

    def __init__(self, tasks: Sequence[str]):
        self.tasks = list(tasks)
        self.entries: dict[tuple[str, str, str], PairFeatures] = {}
        self.probe_cache: dict[tuple[str, str], list[ForwardTrace]] = {}
        self._outputs: dict[tuple[str, str], ProbeOutputs] = {}
        self._thetas: dict[str, np.ndarray] = {}
        self.forward_passes = 0

    # -- construction -------------------------------------------------
    def cache_checkpoint(self, ckpt: Checkpoint, catalog: Catalog) -> None:
        self._thetas[ckpt.id] = ckpt.flatten()
        for task in self.tasks:
            key = (ckpt.id, task)
            if key in self.probe_cache:
                continue
            traces = forward_many(ckpt, catalog.probe_sets[task].prompts, prefix=f"{task}:")
            self.forward_passes += 1
            self.probe_cache[key] = traces
            self._outputs[key] = ProbeOutputs.from_traces(traces)

    def compute_pair(self, id_a: str, id_b: str, task: str) -> PairFeatures:
        key = (id_a, id_b, task)
        if key not in self.entries:
            try:
                out_a, out_b = self._outputs[(id_a, task)], self._outputs[(id_b, task)]
            except KeyError:
                raise FeatureError(f"no cached probe outputs for pair {id_a!r}, {id_b!r} on {task!r}") from None
            self.entries[key] = pair_features(id_a, id_b, task, out_a, out_b, self._thetas[id_a], self._thetas[id_b])
        return self.entries[key]

    # -- queries ------------------------------------------------------
    @property
    def ids(self) -> list[str]:
        return list(self._thetas)

    def get(self, id_a: str, id_b: str, task: str) -> PairFeatures:
        key = (id_a, id_b, task)
        if key in self.entries:
            return self.entries[key]
        if (id_a, task) in self._outputs and (id_b, task) in self._outputs:
            return self.compute_pair(id_a, id_b, task)
        raise FeatureError(f"missing table entry {key}")

    def encoding(self, task: str) -> TaskEncoding:
        return TaskEncoding.one_hot(task, self.tasks)

    def vector(self, id_a: str, id_b: str, task: str, task_encoding: bool = True) -> np.ndarray:
        enc = self.encoding(task) if task_encoding else None
        return build_feature_vector(self.get(id_a, id_b, task).raw, enc)

    def norm(self, mid: str) -> float:
        return float(np.linalg.norm(self._thetas[mid]))

    def outputs(self, mid: str, task: str) -> ProbeOutputs:
        return self._outputs[(mid, task)]

    def equals(self, other: "SimilarityTable") -> bool:
        if set(self.entries) != set(other.entries):
            return False
        for key, pf in self.entries.items():
            if list(pf.raw.values()) != list(other.entries[key].raw.values()):
                return False
        return True

    # -- export -------------------------------------------------------
    def to_csv(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id_a", "id_b", "task_id", *FEATURE_NAMES])
            for (a, b, t), pf in sorted(self.entries.items()):
                writer.writerow([a, b, t, *(repr(pf.raw[n]) for n in FEATURE_NAMES)])
        header = {"feature_order": list(FEATURE_NAMES), "tasks": self.tasks, "task_encoding": "one-hot over tasks, appended"}
        path.with_suffix(".header.json").write_text(json.dumps(header, indent=2) + "\n")


def load_feature_csv(path: str | Path) -> SimilarityTable:
    """Read an exported table; entries carry summaries only, no per-element sequences."""
    path = Path(path)
    header_path = path.with_suffix(".header.json")
    if not header_path.exists():
        raise FeatureError(f"missing feature header {header_path}")
    header = json.loads(header_path.read_text())
    if list(header["feature_order"]) != list(FEATURE_NAMES):
        raise FeatureError("feature order in header does not match this version's layout")
    table = SimilarityTable(header["tasks"])
    with path.open(newline="") as fh:
        for row in csv.DictReader(fh):
            raw = OrderedDict((n, float(row[n])) for n in FEATURE_NAMES)
            key = (row["id_a"], row["id_b"], row["task_id"])
            table.entries[key] = PairFeatures(key[:2], key[2], raw, {})
    return table


def build_similarity_table(catalog: Catalog, ids: Iterable[str] | None = None, pairs: bool = True) -> SimilarityTable:
    """Run each checkpoint once per task probe set, then fill all ordered pairs."""
    table = SimilarityTable(catalog.tasks)
    ids = list(ids) if ids is not None else catalog.ids
    for mid in ids:
        table.cache_checkpoint(catalog.get(mid), catalog)
    if pairs:
        for task in catalog.tasks:
            for a in ids:
                for b in ids:
                    if a != b:
                        table.compute_pair(a, b, task)
    return table


def fresh_pair_features(a: Checkpoint, b: Checkpoint, task: str, catalog: Catalog) -> PairFeatures:
    """Pair features from new forward passes, bypassing any cache."""
    prompts = catalog.probe_sets[task].prompts
    out_a = ProbeOutputs.from_traces(forward_many(a, prompts, prefix=f"{task}:"))
    out_b = ProbeOutputs.from_traces(forward_many(b, prompts, prefix=f"{task}:"))
    return pair_features(a.id, b.id, task, out_a, out_b, a.flatten(), b.flatten())
