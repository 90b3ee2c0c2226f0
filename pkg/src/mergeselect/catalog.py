"""Synthetic checkpoint catalogs with a planted-teacher utility oracle.

Every task owns a hidden teacher ``base + D_t``.  Task checkpoints are
``base + s * D_t + noise`` for per-checkpoint strengths ``s``; the best one on
its task's evaluation set is designated the task expert, the rest remain
ordinary members tagged with their task of origin.  Probe prompts (unlabeled)
and evaluation sequences are sampled from the teacher.

Two optional components (off by default) widen the spread of merge outcomes.
A sparse update ``S_t`` (a few large coordinates) is added to the teacher and
inherited by each member with probability ``sparse_prob``; a global rescale
``base * (1 + kappa_t)`` is applied to the teacher and inherited with
probability ``sharpen_prob``.  With them the teacher is
``base * (1 + kappa_t) + D_t + S_t`` and a member is
``base * (1 + c * kappa_t) + s * D_t + b * S_t + noise`` with coins ``b, c``.

Randomness comes from :class:`numpy.random.SeedSequence` keyed by
``(seed, stream, task, member)`` so adding tasks or members does not disturb
existing draws.
"""

from __future__ import annotations

import dataclasses
import json
from collections import OrderedDict
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .checkpoint import ArchConfig, Checkpoint, load_checkpoint, save_checkpoint, tensor_layout
from .model import evaluate_utility, sample_sequences

# stream ids for the keyed generators
_INIT, _TASK_DIR, _MEMBER, _PROBES, _EVAL, _STRENGTH, _SPARSE, _SHARPEN, _COINS = range(9)


def rng_for(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *key]))


@dataclasses.dataclass(frozen=True)
class CatalogConfig:
    task_scale: float = 0.10
    noise_scale: float = 0.03
    strength_min: float = 0.4
    strength_max: float = 1.0
    probe_len: int = 16
    eval_len: int = 16
    embed_std: float = 1.0
    unembed_gain: float = 3.0
    sparse_frac: float = 0.0
    sparse_mag: float = 3.0
    sparse_prob: float = 0.5
    sharpen: float = 0.0
    sharpen_prob: float = 0.5

    @classmethod
    def regimes(cls) -> "CatalogConfig":
        """Preset whose pairs split between Linear, SLERP and TIES winners."""
        return cls(task_scale=0.20, sparse_frac=0.05, sparse_mag=3.0, sharpen=0.8)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "CatalogConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclasses.dataclass(frozen=True)
class ProbeSet:
    task_id: str
    prompts: tuple[tuple[int, ...], ...]

    def __post_init__(self) -> None:
        if not self.prompts:
            raise ValueError(f"probe set for {self.task_id!r} is empty")


@dataclasses.dataclass(frozen=True)
class MemberInfo:
    id: str
    task: str
    index: int
    strength: float
    is_expert: bool


@dataclasses.dataclass(eq=False)
class Catalog:
    base: Checkpoint
    checkpoints: "OrderedDict[str, Checkpoint]"
    members: "OrderedDict[str, MemberInfo]"
    teachers: "OrderedDict[str, Checkpoint]"
    probe_sets: "OrderedDict[str, ProbeSet]"
    eval_sets: "OrderedDict[str, tuple[tuple[int, ...], ...]]"
    seed: int
    config: CatalogConfig = dataclasses.field(default_factory=CatalogConfig)

    def __post_init__(self) -> None:
        for ck in self.checkpoints.values():
            if ck.arch != self.base.arch:
                raise ValueError(f"checkpoint {ck.id!r} does not share the base architecture")
        for task in self.tasks:
            if len(self.experts_of(task)) != 1:
                raise ValueError(f"task {task!r} must have exactly one designated expert")
        if len(self.tasks) < 2:
            raise ValueError("a catalog needs at least two tasks")
        self._utility_cache: dict[tuple[str, str], float] = {}

    @property
    def arch(self) -> ArchConfig:
        return self.base.arch

    @property
    def tasks(self) -> list[str]:
        return list(self.teachers)

    @property
    def ids(self) -> list[str]:
        return list(self.checkpoints)

    def get(self, mid: str) -> Checkpoint:
        if mid == "base":
            return self.base
        try:
            return self.checkpoints[mid]
        except KeyError:
            raise KeyError(f"unknown checkpoint id {mid!r}") from None

    def info(self, mid: str) -> MemberInfo:
        try:
            return self.members[mid]
        except KeyError:
            raise KeyError(f"unknown checkpoint id {mid!r}") from None

    def task_of(self, mid: str) -> str:
        return self.info(mid).task

    def experts_of(self, task: str) -> list[str]:
        return [m.id for m in self.members.values() if m.task == task and m.is_expert]

    def expert(self, task: str) -> str:
        return self.experts_of(task)[0]

    def members_of(self, task: str) -> list[str]:
        return [m.id for m in self.members.values() if m.task == task]

    def auxiliaries(self, task: str) -> list[str]:
        return [m.id for m in self.members.values() if m.task != task]

    def utility(self, mid: str, task: str) -> float:
        """Memoised ground-truth utility of a catalog member on ``task``."""
        key = (mid, task)
        if key not in self._utility_cache:
            self._utility_cache[key] = evaluate_utility(self.get(mid), self.eval_sets[task])
        return self._utility_cache[key]

    def equals(self, other: "Catalog") -> bool:
        if self.ids != other.ids or self.tasks != other.tasks or self.seed != other.seed:
            return False
        if not self.base.equals(other.base):
            return False
        if any(not self.checkpoints[i].equals(other.checkpoints[i]) for i in self.ids):
            return False
        if any(not self.teachers[t].equals(other.teachers[t]) for t in self.tasks):
            return False
        return self.probe_sets == other.probe_sets and self.eval_sets == other.eval_sets and self.members == other.members


def init_base(arch: ArchConfig, rng: np.random.Generator, config: CatalogConfig = CatalogConfig()) -> "OrderedDict[str, np.ndarray]":
    d, ff = arch.d_model, arch.d_ff
    tensors = OrderedDict()
    for name, shape in tensor_layout(arch):
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("norm"):
            tensors[name] = np.ones(shape)
        elif leaf == "embed":
            tensors[name] = rng.normal(0.0, config.embed_std, shape)
        elif leaf == "unembed":
            tensors[name] = rng.normal(0.0, config.unembed_gain / np.sqrt(d), shape)
        elif leaf == "w_out":
            tensors[name] = rng.normal(0.0, 1.0 / np.sqrt(ff), shape)
        else:
            tensors[name] = rng.normal(0.0, 1.0 / np.sqrt(d), shape)
    return tensors


def _relative_direction(base: Mapping[str, np.ndarray], rng: np.random.Generator, scale: float) -> "OrderedDict[str, np.ndarray]":
    """Gaussian direction whose per-tensor norm is ``scale`` times the base tensor norm."""
    out = OrderedDict()
    for name, t in base.items():
        g = rng.standard_normal(t.shape)
        out[name] = g * (scale * np.linalg.norm(t) / np.linalg.norm(g))
    return out


def _sparse_direction(base: Mapping[str, np.ndarray], rng: np.random.Generator, frac: float, mag: float):
    """A few coordinates moved by ``mag`` times the tensor's RMS, random signs."""
    out = OrderedDict()
    for name, t in base.items():
        hit = rng.random(t.shape) < frac
        rms = np.linalg.norm(t) / np.sqrt(t.size)
        sign = rng.choice([-1.0, 1.0], t.shape)
        out[name] = np.where(hit, sign * mag * rms * (0.5 + rng.random(t.shape)), 0.0)
    return out


def generate_catalog(
    arch: ArchConfig = ArchConfig(),
    n_tasks: int = 4,
    experts_per_task: int = 6,
    probe_size: int = 16,
    eval_size: int = 64,
    seed: int = 0,
    config: CatalogConfig | None = None,
) -> Catalog:
    """Build a reproducible catalog of ``n_tasks * experts_per_task`` checkpoints."""
    config = config or CatalogConfig()
    if n_tasks < 2:
        raise ValueError("n_tasks must be >= 2")
    if experts_per_task < 1 or probe_size < 1 or eval_size < 1:
        raise ValueError("experts_per_task, probe_size and eval_size must be positive")
    if max(config.probe_len, config.eval_len) > arch.max_seq_len or min(config.probe_len, config.eval_len) < 2:
        raise ValueError("probe/eval lengths must lie in [2, max_seq_len]")

    base_t = init_base(arch, rng_for(seed, _INIT), config)
    base = Checkpoint(arch, base_t, "base")
    tasks = [f"t{i}" for i in range(n_tasks)]
    teachers: OrderedDict[str, Checkpoint] = OrderedDict()
    probe_sets: OrderedDict[str, ProbeSet] = OrderedDict()
    eval_sets: OrderedDict[str, tuple] = OrderedDict()
    checkpoints: OrderedDict[str, Checkpoint] = OrderedDict()
    members: OrderedDict[str, MemberInfo] = OrderedDict()

    for ti, task in enumerate(tasks):
        direction = _relative_direction(base.tensors, rng_for(seed, _TASK_DIR, ti), config.task_scale)
        if config.sparse_frac > 0:
            sparse = _sparse_direction(base_t, rng_for(seed, _SPARSE, ti), config.sparse_frac, config.sparse_mag)
        else:
            sparse = OrderedDict((n, np.zeros_like(t)) for n, t in base_t.items())
        kappa = config.sharpen * float(rng_for(seed, _SHARPEN, ti).random()) if config.sharpen > 0 else 0.0
        teacher = Checkpoint(
            arch, OrderedDict((n, base_t[n] * (1.0 + kappa) + direction[n] + sparse[n]) for n in base_t), f"teacher_{task}"
        )
        teachers[task] = teacher
        probes = sample_sequences(teacher, probe_size, config.probe_len, rng_for(seed, _PROBES, ti))
        probe_sets[task] = ProbeSet(task, tuple(tuple(int(x) for x in row) for row in probes))
        evals = sample_sequences(teacher, eval_size, config.eval_len, rng_for(seed, _EVAL, ti))
        eval_sets[task] = tuple(tuple(int(x) for x in row) for row in evals)

        task_members = []
        for k in range(experts_per_task):
            srng = rng_for(seed, _STRENGTH, ti, k)
            strength = float(srng.uniform(config.strength_min, config.strength_max))
            noise = _relative_direction(base.tensors, rng_for(seed, _MEMBER, ti, k), config.noise_scale)
            mid = f"ckpt_{task}_{k}"
            coins = rng_for(seed, _COINS, ti, k).random(2)
            b = float(coins[0] < config.sparse_prob)
            c = kappa * float(coins[1] < config.sharpen_prob)
            tensors = OrderedDict(
                (n, base_t[n] * (1.0 + c) + strength * direction[n] + b * sparse[n] + noise[n]) for n in base_t
            )
            checkpoints[mid] = Checkpoint(arch, tensors, mid)
            task_members.append((mid, k, strength))
        utils = [evaluate_utility(checkpoints[mid], eval_sets[task]) for mid, _, _ in task_members]
        best = int(np.argmax(utils))
        for j, (mid, k, strength) in enumerate(task_members):
            members[mid] = MemberInfo(mid, task, k, strength, j == best)

    return Catalog(base, checkpoints, members, teachers, probe_sets, eval_sets, int(seed), config)


def save_catalog(catalog: Catalog, out_dir: str | Path) -> None:
    """Write the directory layout ``base/``, ``ckpt_<task>_<k>/``, ``probes_<task>.json``, ``eval_<task>.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(catalog.base, out / "base" / "model")
    for mid, ck in catalog.checkpoints.items():
        save_checkpoint(ck, out / mid / "model")
    for task, teacher in catalog.teachers.items():
        save_checkpoint(teacher, out / f"teacher_{task}" / "model")
        (out / f"probes_{task}.json").write_text(json.dumps([list(p) for p in catalog.probe_sets[task].prompts]))
        (out / f"eval_{task}.json").write_text(json.dumps([list(s) for s in catalog.eval_sets[task]]))
    meta = {
        "seed": catalog.seed,
        "arch": catalog.arch.to_dict(),
        "config": catalog.config.to_dict(),
        "tasks": catalog.tasks,
        "members": [dataclasses.asdict(m) for m in catalog.members.values()],
    }
    (out / "catalog.json").write_text(json.dumps(meta, indent=2) + "\n")


def load_catalog(path: str | Path) -> Catalog:
    root = Path(path)
    meta_path = root / "catalog.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"{root} is not a catalog directory (missing catalog.json)")
    meta = json.loads(meta_path.read_text())
    base = load_checkpoint(root / "base" / "model")
    members: OrderedDict[str, MemberInfo] = OrderedDict()
    checkpoints: OrderedDict[str, Checkpoint] = OrderedDict()
    for m in meta["members"]:
        info = MemberInfo(**m)
        members[info.id] = info
        checkpoints[info.id] = load_checkpoint(root / info.id / "model")
    teachers: OrderedDict[str, Checkpoint] = OrderedDict()
    probe_sets: OrderedDict[str, ProbeSet] = OrderedDict()
    eval_sets: OrderedDict[str, tuple] = OrderedDict()
    for task in meta["tasks"]:
        teachers[task] = load_checkpoint(root / f"teacher_{task}" / "model")
        prompts = json.loads((root / f"probes_{task}.json").read_text())
        probe_sets[task] = ProbeSet(task, tuple(tuple(p) for p in prompts))
        evals = json.loads((root / f"eval_{task}.json").read_text())
        eval_sets[task] = tuple(tuple(s) for s in evals)
    return Catalog(
        base, checkpoints, members, teachers, probe_sets, eval_sets, int(meta["seed"]), CatalogConfig.from_dict(meta["config"])
    )


def subset_catalog(catalog: Catalog, tasks: Sequence[str]) -> Catalog:
    """Catalog restricted to ``tasks`` (used to hold a task out of logged data)."""
    keep = [m for m in catalog.members.values() if m.task in tasks]
    return Catalog(
        catalog.base,
        OrderedDict((m.id, catalog.checkpoints[m.id]) for m in keep),
        OrderedDict((m.id, m) for m in keep),
        OrderedDict((t, catalog.teachers[t]) for t in tasks),
        OrderedDict((t, catalog.probe_sets[t]) for t in tasks),
        OrderedDict((t, catalog.eval_sets[t]) for t in tasks),
        catalog.seed,
        catalog.config,
    )
