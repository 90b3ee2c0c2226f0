"""Binary merge operators (Linear, SLERP, TIES) and sequential plan execution."""

from __future__ import annotations

import dataclasses
import enum
import json
from collections import OrderedDict
from typing import TYPE_CHECKING, Callable, Mapping, Sequence

import numpy as np

from .checkpoint import Checkpoint

if TYPE_CHECKING:
    from .catalog import Catalog

PARALLEL_EPS = 1e-6
DEFAULT_ALPHA = 0.5
DEFAULT_TAU = 0.05


class MergeError(ValueError):
    pass


class OpKind(str, enum.Enum):
    LINEAR = "Linear"
    SLERP = "Slerp"
    TIES = "Ties"

    @property
    def index(self) -> int:
        return OPERATOR_ORDER.index(self)


# fixed order; also the tie-break order for every argmax over operators
OPERATOR_ORDER: tuple[OpKind, ...] = (OpKind.LINEAR, OpKind.SLERP, OpKind.TIES)


@dataclasses.dataclass(frozen=True)
class MergeOperator:
    kind: OpKind
    alpha: float = DEFAULT_ALPHA
    tau: float | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", OpKind(self.kind))
        if not 0.0 <= self.alpha <= 1.0:
            raise MergeError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.kind is OpKind.TIES:
            if self.tau is None:
                object.__setattr__(self, "tau", DEFAULT_TAU)
            if self.tau < 0:
                raise MergeError(f"tau must be nonnegative, got {self.tau}")
        elif self.tau is not None:
            raise MergeError("tau is only meaningful for Ties")

    def to_dict(self) -> dict:
        d = {"kind": self.kind.value, "alpha": self.alpha}
        if self.tau is not None:
            d["tau"] = self.tau
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "MergeOperator":
        return cls(OpKind(d["kind"]), float(d.get("alpha", DEFAULT_ALPHA)), d.get("tau"))

    @classmethod
    def default(cls, kind: OpKind | str, tau: float = DEFAULT_TAU) -> "MergeOperator":
        kind = OpKind(kind)
        return cls(kind, DEFAULT_ALPHA, tau if kind is OpKind.TIES else None)


def _check_pair(a: Checkpoint, b: Checkpoint) -> None:
    if a.arch != b.arch:
        raise MergeError(f"architecture mismatch between {a.id!r} and {b.id!r}")


def _apply_tensorwise(
    a: Checkpoint, b: Checkpoint, fn: Callable[[np.ndarray, np.ndarray], np.ndarray], new_id: str
) -> Checkpoint:
    _check_pair(a, b)
    out = OrderedDict()
    for name, ta in a.tensors.items():
        x = ta.astype(np.float64)
        y = b.tensors[name].astype(np.float64)
        out[name] = fn(x, y)
    return Checkpoint(a.arch, out, new_id)


def linear_vec(x: np.ndarray, y: np.ndarray, alpha: float) -> np.ndarray:
    return (1.0 - alpha) * x + alpha * y


def slerp_vec(x: np.ndarray, y: np.ndarray, alpha: float) -> np.ndarray:
    """SLERP of two tensors, rescaled to their average norm."""
    nx, ny = float(np.linalg.norm(x)), float(np.linalg.norm(y))
    if nx == 0.0 or ny == 0.0:
        raise MergeError("SLERP undefined for a zero-norm tensor")
    ux, uy = x / nx, y / ny
    cos_phi = float(np.clip(np.dot(ux.ravel(), uy.ravel()), -1.0, 1.0))
    phi = np.arccos(cos_phi)
    sin_phi = np.sin(phi)
    if sin_phi < PARALLEL_EPS:
        # near-parallel or antipodal: the closed form is singular
        unit = (1.0 - alpha) * ux + alpha * uy
    else:
        unit = np.sin((1.0 - alpha) * phi) / sin_phi * ux + np.sin(alpha * phi) / sin_phi * uy
    norm_unit = float(np.linalg.norm(unit))
    target = 0.5 * (nx + ny)
    if norm_unit == 0.0:
        # antipodal inputs at alpha = 0.5 cancel exactly; no direction survives
        return np.zeros_like(x)
    return target * unit / norm_unit


def ties_vec(x: np.ndarray, y: np.ndarray, alpha: float, tau: float) -> np.ndarray:
    """Coordinate-wise sign-consistent rule; note alpha weights ``x`` here."""
    ax, ay = np.abs(x), np.abs(y)
    aligned = (x * y > 0) & (np.maximum(ax, ay) >= tau)
    take_x = (x * y <= 0) & (ax >= ay) & (ax >= tau)
    take_y = (x * y <= 0) & (ay > ax) & (ay >= tau)
    out = np.zeros_like(x)
    out = np.where(aligned, alpha * x + (1.0 - alpha) * y, out)
    out = np.where(take_x, x, out)
    out = np.where(take_y, y, out)
    return out


def merge_linear(a: Checkpoint, b: Checkpoint, alpha: float = DEFAULT_ALPHA, new_id: str | None = None) -> Checkpoint:
    if not 0.0 <= alpha <= 1.0:
        raise MergeError(f"alpha must lie in [0, 1], got {alpha}")
    return _apply_tensorwise(a, b, lambda x, y: linear_vec(x, y, alpha), new_id or f"lin({a.id},{b.id})")


def merge_slerp(a: Checkpoint, b: Checkpoint, alpha: float = DEFAULT_ALPHA, new_id: str | None = None) -> Checkpoint:
    if not 0.0 <= alpha <= 1.0:
        raise MergeError(f"alpha must lie in [0, 1], got {alpha}")
    return _apply_tensorwise(a, b, lambda x, y: slerp_vec(x, y, alpha), new_id or f"slerp({a.id},{b.id})")


def merge_ties(
    a: Checkpoint, b: Checkpoint, alpha: float = DEFAULT_ALPHA, tau: float = DEFAULT_TAU, new_id: str | None = None
) -> Checkpoint:
    if tau < 0:
        raise MergeError(f"tau must be nonnegative, got {tau}")
    if not 0.0 <= alpha <= 1.0:
        raise MergeError(f"alpha must lie in [0, 1], got {alpha}")
    return _apply_tensorwise(a, b, lambda x, y: ties_vec(x, y, alpha, tau), new_id or f"ties({a.id},{b.id})")


def apply_operator(op: MergeOperator, a: Checkpoint, b: Checkpoint, new_id: str | None = None) -> Checkpoint:
    if op.kind is OpKind.LINEAR:
        return merge_linear(a, b, op.alpha, new_id)
    if op.kind is OpKind.SLERP:
        return merge_slerp(a, b, op.alpha, new_id)
    return merge_ties(a, b, op.alpha, op.tau, new_id)


@dataclasses.dataclass(frozen=True)
class MergePlan:
    """Ordered checkpoints plus the operator for each left-fold step."""

    model_ids: tuple[str, ...]
    operators: tuple[MergeOperator, ...]
    task_id: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "model_ids", tuple(self.model_ids))
        object.__setattr__(self, "operators", tuple(self.operators))
        if len(self.model_ids) < 2:
            raise MergeError("a plan needs at least two checkpoints")
        if len(set(self.model_ids)) != len(self.model_ids):
            raise MergeError("duplicate model id in plan")
        if len(self.operators) != len(self.model_ids) - 1:
            raise MergeError("a plan needs exactly len(model_ids) - 1 operators")

    @property
    def k(self) -> int:
        return len(self.model_ids)

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "model_ids": list(self.model_ids),
            "operators": [op.to_dict() for op in self.operators],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> "MergePlan":
        return cls(tuple(d["model_ids"]), tuple(MergeOperator.from_dict(o) for o in d["operators"]), d["task_id"])

    @classmethod
    def uniform(cls, model_ids: Sequence[str], kind: OpKind | str, task_id: str, tau: float = DEFAULT_TAU) -> "MergePlan":
        op = MergeOperator.default(kind, tau)
        return cls(tuple(model_ids), (op,) * (len(model_ids) - 1), task_id)


def fold(checkpoints: Sequence[Checkpoint], operators: Sequence[MergeOperator]) -> Checkpoint:
    """Left fold ``M_j = o_j(M_{j-1}, m_j)`` over already-resolved checkpoints."""
    if len(operators) != len(checkpoints) - 1:
        raise MergeError("operator count must be one less than checkpoint count")
    merged = checkpoints[0]
    for op, nxt in zip(operators, checkpoints[1:]):
        merged = apply_operator(op, merged, nxt)
    return merged


def check_plan_tasks(plan: MergePlan, catalog: "Catalog") -> None:
    """Enforce at most one designated expert per task within a plan."""
    seen: set[str] = set()
    for mid in plan.model_ids:
        info = catalog.info(mid)
        if info.is_expert:
            if info.task in seen:
                raise MergeError(f"plan contains two experts for task {info.task!r}")
            seen.add(info.task)


def execute_plan(plan: MergePlan, catalog: "Catalog") -> Checkpoint:
    ckpts = [catalog.get(mid) for mid in plan.model_ids]
    check_plan_tasks(plan, catalog)
    merged = fold(ckpts, plan.operators)
    return merged.with_id("plan[" + ",".join(plan.model_ids) + "]")


def linear_fold_weights(k: int, alpha: float = DEFAULT_ALPHA) -> np.ndarray:
    """Effective per-model weights of an all-Linear left fold."""
    w = np.zeros(k)
    w[0] = 1.0
    for j in range(1, k):
        w[:j] *= 1.0 - alpha
        w[j] = alpha
    return w
