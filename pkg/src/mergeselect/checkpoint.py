"""Toy-transformer checkpoints and their on-disk format.

A checkpoint is an ordered mapping of named float32 tensors whose names and
shapes are fully determined by an :class:`ArchConfig`.  On disk it is a pair
of files: ``<name>.manifest.json`` (architecture plus a tensor index of
name/shape/byte-offset) and ``<name>.bin`` (little-endian float32, row-major).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from collections import OrderedDict
from pathlib import Path
from typing import Mapping

import numpy as np

FORMAT_VERSION = 1
_DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    """Raised for malformed, inconsistent or non-finite checkpoints."""


@dataclasses.dataclass(frozen=True)
class ArchConfig:
    vocab_size: int = 64
    d_model: int = 16
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 32
    max_seq_len: int = 24

    def __post_init__(self) -> None:
        for field in dataclasses.fields(self):
            value = getattr(self, field.name)
            if not isinstance(value, (int, np.integer)) or value <= 0:
                raise CheckpointError(f"{field.name} must be a positive integer, got {value!r}")
        if self.max_seq_len < 2:
            raise CheckpointError("max_seq_len must be >= 2")
        if self.d_model % self.n_heads:
            raise CheckpointError("d_model must be divisible by n_heads")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "ArchConfig":
        return cls(**{f.name: int(data[f.name]) for f in dataclasses.fields(cls)})


def tensor_layout(arch: ArchConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Return the manifest-ordered ``(name, shape)`` list for ``arch``."""
    d, ff, V = arch.d_model, arch.d_ff, arch.vocab_size
    layout: list[tuple[str, tuple[int, ...]]] = [("embed", (V, d))]
    for i in range(arch.n_layers):
        p = f"layers.{i}."
        layout += [
            (p + "attn_norm", (d,)),
            (p + "wq", (d, d)),
            (p + "wk", (d, d)),
            (p + "wv", (d, d)),
            (p + "wo", (d, d)),
            (p + "mlp_norm", (d,)),
            (p + "w_in", (d, ff)),
            (p + "w_out", (ff, d)),
        ]
    layout += [("final_norm", (d,)), ("unembed", (d, V))]
    return layout


def n_params(arch: ArchConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape in tensor_layout(arch))


@dataclasses.dataclass(frozen=True, eq=False)
class Checkpoint:
    """Immutable set of named parameter tensors for one toy transformer."""

    arch: ArchConfig
    tensors: "OrderedDict[str, np.ndarray]"
    id: str = "ckpt"

    def __post_init__(self) -> None:
        layout = tensor_layout(self.arch)
        if list(self.tensors) != [name for name, _ in layout]:
            raise CheckpointError(f"checkpoint {self.id!r}: tensor names/order do not match arch")
        frozen = OrderedDict()
        for name, shape in layout:
            arr = np.asarray(self.tensors[name])
            if arr.shape != shape:
                raise CheckpointError(
                    f"checkpoint {self.id!r}: tensor {name} has shape {arr.shape}, expected {shape}"
                )
            arr = np.array(arr, dtype=np.float32, order="C", copy=True)
            if not np.all(np.isfinite(arr)):
                raise CheckpointError(f"checkpoint {self.id!r}: tensor {name} has non-finite values")
            arr.setflags(write=False)
            frozen[name] = arr
        object.__setattr__(self, "tensors", frozen)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def flatten(self) -> np.ndarray:
        """Concatenate tensors in manifest order into a float64 vector."""
        return np.concatenate([t.ravel() for t in self.tensors.values()]).astype(np.float64)

    def with_id(self, new_id: str) -> "Checkpoint":
        return Checkpoint(self.arch, self.tensors, new_id)

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, t in self.tensors.items():
            h.update(name.encode())
            h.update(t.astype(_DTYPE).tobytes())
        return h.hexdigest()

    def equals(self, other: "Checkpoint") -> bool:
        """Bit-exact equality of architecture and tensors (ids ignored)."""
        if self.arch != other.arch:
            return False
        return all(
            np.array_equal(a.view(np.uint32), b.view(np.uint32))
            for a, b in zip(self.tensors.values(), other.tensors.values())
        )


def unflatten(arch: ArchConfig, theta: np.ndarray, id: str = "ckpt") -> Checkpoint:
    theta = np.asarray(theta)
    if theta.ndim != 1 or theta.size != n_params(arch):
        raise CheckpointError(f"parameter vector of size {theta.size} does not match arch ({n_params(arch)})")
    tensors = OrderedDict()
    offset = 0
    for name, shape in tensor_layout(arch):
        size = int(np.prod(shape))
        tensors[name] = theta[offset : offset + size].reshape(shape)
        offset += size
    return Checkpoint(arch, tensors, id)


def _paths(path: str | Path) -> tuple[Path, Path]:
    path = Path(path)
    for suffix in (".manifest.json", ".bin"):
        if path.name.endswith(suffix):
            path = path.with_name(path.name[: -len(suffix)])
    return path.with_name(path.name + ".manifest.json"), path.with_name(path.name + ".bin")


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Write ``ckpt`` as ``<path>.manifest.json`` + ``<path>.bin``."""
    manifest_path, blob_path = _paths(path)
    index = []
    chunks = []
    offset = 0
    for name, arr in ckpt.tensors.items():
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"tensor {name} has non-finite values")
        data = arr.astype(_DTYPE).tobytes(order="C")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    manifest = {
        "format_version": FORMAT_VERSION,
        "id": ckpt.id,
        "arch": ckpt.arch.to_dict(),
        "dtype": "float32-le",
        "total_bytes": offset,
        "tensors": index,
    }
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    blob_path.write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> Checkpoint:
    manifest_path, blob_path = _paths(path)
    if not manifest_path.exists():
        raise FileNotFoundError(f"missing manifest {manifest_path}")
    if not blob_path.exists():
        raise FileNotFoundError(f"missing blob {blob_path}")
    manifest = json.loads(manifest_path.read_text())
    arch = ArchConfig.from_dict(manifest["arch"])
    blob = blob_path.read_bytes()
    expected = tensor_layout(arch)
    index = manifest["tensors"]
    if [(e["name"], tuple(e["shape"])) for e in index] != expected:
        raise CheckpointError("manifest tensor index inconsistent with arch")
    tensors = OrderedDict()
    offset = 0
    for entry, (name, shape) in zip(index, expected):
        nbytes = int(np.prod(shape)) * _DTYPE.itemsize
        if entry["offset"] != offset:
            raise CheckpointError(f"tensor {name}: offset {entry['offset']} != expected {offset}")
        if offset + nbytes > len(blob):
            raise CheckpointError("truncated blob")
        tensors[name] = np.frombuffer(blob, dtype=_DTYPE, count=int(np.prod(shape)), offset=offset).reshape(shape)
        offset += nbytes
    if offset != len(blob):
        raise CheckpointError(f"blob has {len(blob) - offset} trailing bytes")
    return Checkpoint(arch, tensors, manifest.get("id", manifest_path.name[: -len(".manifest.json")]))
