"""Deterministic forward passes of the toy pre-norm transformer.

The network is a causal decoder: token embedding plus a fixed sinusoidal
position code, ``n_layers`` blocks of RMS-normalised multi-head attention and
a GELU MLP, each added to the residual stream, then a final RMS norm and an
unembedding.  All arithmetic is float64 regardless of the stored float32
weights, so traces are reproducible bit-for-bit.
"""

from __future__ import annotations

import dataclasses
from typing import Sequence

import numpy as np

from .checkpoint import ArchConfig, Checkpoint

_NORM_EPS = 1e-6


@dataclasses.dataclass(frozen=True, eq=False)
class ForwardTrace:
    """Signals recorded from one teacher-forced pass over one prompt.

    ``logits`` is (T, V); ``hidden`` is (L, T, d) post-residual block outputs;
    ``attention`` is (L, H, T, T) with rows summing to one.
    """

    logits: np.ndarray
    hidden: np.ndarray
    attention: np.ndarray
    prompt_id: str = ""

    @property
    def length(self) -> int:
        return self.logits.shape[0]

    def equals(self, other: "ForwardTrace") -> bool:
        return (
            np.array_equal(self.logits, other.logits)
            and np.array_equal(self.hidden, other.hidden)
            and np.array_equal(self.attention, other.attention)
        )


def positional_code(T: int, d: int) -> np.ndarray:
    pos = np.arange(T)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def _rms_norm(x: np.ndarray, scale: np.ndarray) -> np.ndarray:
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + _NORM_EPS) * scale


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(0.7978845608028654 * (x + 0.044715 * x**3)))


def _softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def _check_tokens(arch: ArchConfig, tokens: np.ndarray) -> None:
    if tokens.shape[-1] < 1:
        raise ValueError("token sequence must be nonempty")
    if tokens.shape[-1] > arch.max_seq_len:
        raise ValueError(f"sequence length {tokens.shape[-1]} exceeds max_seq_len {arch.max_seq_len}")
    if np.any(tokens < 0) or np.any(tokens >= arch.vocab_size):
        raise ValueError("invalid token id")


def forward_batch(ckpt: Checkpoint, tokens: np.ndarray, record: bool = True):
    """Run equal-length sequences ``tokens`` (B, T) through ``ckpt``.

    Returns ``(logits, hidden, attention)`` with leading batch axis; ``hidden``
    and ``attention`` are ``None`` when ``record`` is false.
    """
    arch = ckpt.arch
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    _check_tokens(arch, tokens)
    B, T = tokens.shape
    H, dh = arch.n_heads, arch.d_head
    w = {k: v.astype(np.float64) for k, v in ckpt.tensors.items()}

    x = w["embed"][tokens] + positional_code(T, arch.d_model)[None]
    mask = np.triu(np.ones((T, T), dtype=bool), k=1)
    hiddens, attns = [], []
    for i in range(arch.n_layers):
        p = f"layers.{i}."
        h = _rms_norm(x, w[p + "attn_norm"])
        q = (h @ w[p + "wq"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        k = (h @ w[p + "wk"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        v = (h @ w[p + "wv"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(dh)
        scores = np.where(mask, -np.inf, scores)
        att = _softmax(scores, axis=-1)
        ctx = (att @ v).transpose(0, 2, 1, 3).reshape(B, T, arch.d_model)
        x = x + ctx @ w[p + "wo"]
        h = _rms_norm(x, w[p + "mlp_norm"])
        x = x + _gelu(h @ w[p + "w_in"]) @ w[p + "w_out"]
        if record:
            hiddens.append(x)
            attns.append(att)
    logits = _rms_norm(x, w["final_norm"]) @ w["unembed"]
    if not record:
        return logits, None, None
    return logits, np.stack(hiddens, axis=1), np.stack(attns, axis=1)


def forward(ckpt: Checkpoint, tokens: Sequence[int], prompt_id: str = "") -> ForwardTrace:
    """Teacher-forced pass over a single prompt."""
    logits, hidden, attention = forward_batch(ckpt, np.asarray(tokens)[None, :])
    return ForwardTrace(logits[0], hidden[0], attention[0], prompt_id)


def forward_many(ckpt: Checkpoint, prompts: Sequence[Sequence[int]], prefix: str = "") -> list[ForwardTrace]:
    """Traces for every prompt, batching prompts of equal length."""
    traces: list[ForwardTrace | None] = [None] * len(prompts)
    by_len: dict[int, list[int]] = {}
    for idx, p in enumerate(prompts):
        by_len.setdefault(len(p), []).append(idx)
    for _, idxs in sorted(by_len.items()):
        batch = np.asarray([prompts[i] for i in idxs])
        logits, hidden, attention = forward_batch(ckpt, batch)
        for row, i in enumerate(idxs):
            traces[i] = ForwardTrace(logits[row], hidden[row], attention[row], f"{prefix}{i}")
    return traces  # type: ignore[return-value]


def next_token_distribution(trace: ForwardTrace, j: int) -> np.ndarray:
    if not 0 <= j < trace.length:
        raise IndexError(f"position {j} out of range for length {trace.length}")
    return np.exp(log_softmax(trace.logits[j]))


def evaluate_utility(ckpt: Checkpoint, eval_set: Sequence[Sequence[int]]) -> float:
    """Mean next-token log-likelihood, averaged over positions then sequences."""
    if len(eval_set) == 0:
        raise ValueError("empty eval set")
    per_seq = np.empty(len(eval_set))
    by_len: dict[int, list[int]] = {}
    for idx, s in enumerate(eval_set):
        if len(s) < 2:
            raise ValueError("eval sequences need at least two tokens")
        by_len.setdefault(len(s), []).append(idx)
    for _, idxs in sorted(by_len.items()):
        batch = np.asarray([eval_set[i] for i in idxs], dtype=np.int64)
        logits, _, _ = forward_batch(ckpt, batch, record=False)
        logp = log_softmax(logits[:, :-1])
        target = batch[:, 1:]
        ll = np.take_along_axis(logp, target[..., None], axis=-1)[..., 0]
        per_seq[idxs] = ll.mean(axis=1)
    return float(per_seq.mean())


def sample_sequences(
    ckpt: Checkpoint, n: int, length: int, rng: np.random.Generator, first_tokens: np.ndarray | None = None
) -> np.ndarray:
    """Ancestral sampling of ``n`` sequences of ``length`` tokens.

    The first token is drawn uniformly (or taken from ``first_tokens``); each
    later token is sampled from the model's next-token distribution.
    """
    arch = ckpt.arch
    if length > arch.max_seq_len:
        raise ValueError("length exceeds max_seq_len")
    seqs = np.zeros((n, length), dtype=np.int64)
    seqs[:, 0] = rng.integers(0, arch.vocab_size, size=n) if first_tokens is None else first_tokens
    for j in range(1, length):
        logits, _, _ = forward_batch(ckpt, seqs[:, :j], record=False)
        probs = np.exp(log_softmax(logits[:, -1]))
        u = rng.random(n)[:, None]
        seqs[:, j] = np.minimum((np.cumsum(probs, axis=1) < u).sum(axis=1), arch.vocab_size - 1)
    return seqs
