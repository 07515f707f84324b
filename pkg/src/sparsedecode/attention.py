"""Dense and sparse single-step decode attention with GQA head mapping."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Hashable, Sequence

import numpy as np

from .errors import ShapeError
from .kv_store import PagedKvCache


@dataclass(frozen=True)
class AttentionConfig:
    num_q_heads: int
    num_kv_heads: int
    head_dim: int
    scale: float | None = None

    def __post_init__(self):
        if min(self.num_q_heads, self.num_kv_heads, self.head_dim) < 1:
            raise ValueError("head counts and head_dim must be positive")
        if self.num_q_heads % self.num_kv_heads:
            raise ValueError(
                f"num_q_heads ({self.num_q_heads}) must be a multiple of "
                f"num_kv_heads ({self.num_kv_heads})"
            )

    @property
    def group_size(self) -> int:
        return self.num_q_heads // self.num_kv_heads

    @property
    def softmax_scale(self) -> float:
        return 1.0 / math.sqrt(self.head_dim) if self.scale is None else float(self.scale)


def gqa_kv_head(h: int, group_size: int) -> int:
    """KV head serving query head ``h``; query heads ``[j*G, (j+1)*G)`` share kv head ``j``."""
    return h // group_size


@dataclass
class AttentionOutput:
    outputs: np.ndarray  # (B, H_q, D)
    log_normalizer: np.ndarray  # (B, H_q)


class SparseIndexSet:
    """Per-(batch element, query head) token indices with optional weights.

    Lists are canonicalized on construction: indices sorted ascending with
    weights permuted alongside.  Duplicates and non-positive weights are
    rejected.
    """

    def __init__(self, indices: Sequence[Sequence], weights: Sequence[Sequence] | None = None):
        self.indices: list[list[np.ndarray]] = []
        self.weights: list[list[np.ndarray | None]] = []
        for b, row in enumerate(indices):
            idx_row, w_row = [], []
            for h, idx in enumerate(row):
                w = None if weights is None else weights[b][h]
                i, w = _canonical(np.asarray(idx, dtype=np.int64), w, b, h)
                idx_row.append(i)
                w_row.append(w)
            self.indices.append(idx_row)
            self.weights.append(w_row)

    @classmethod
    def full(cls, lengths: Sequence[int], num_q_heads: int) -> "SparseIndexSet":
        return cls([[np.arange(n, dtype=np.int64)] * num_q_heads for n in lengths])

    @property
    def batch_size(self) -> int:
        return len(self.indices)

    def head(self, b: int, h: int) -> tuple[np.ndarray, np.ndarray | None]:
        return self.indices[b][h], self.weights[b][h]

    def sizes(self) -> np.ndarray:
        return np.array([[len(i) for i in row] for row in self.indices], dtype=np.int64)

    def validate(self, lengths: Sequence[int], num_q_heads: int) -> None:
        if len(self.indices) != len(lengths):
            raise ShapeError(f"index set covers {len(self.indices)} sequences, batch has {len(lengths)}")
        for b, (row, n) in enumerate(zip(self.indices, lengths)):
            if len(row) != num_q_heads:
                raise ShapeError(f"batch {b}: {len(row)} head lists, expected {num_q_heads}")
            for h, idx in enumerate(row):
                if idx.size == 0:
                    raise ValueError(f"empty index list at batch {b}, head {h}")
                if idx[-1] >= n or idx[0] < 0:
                    bad = idx[-1] if idx[-1] >= n else idx[0]
                    raise IndexError(f"token index {int(bad)} out of range at batch {b}, head {h} (N={n})")


def _canonical(idx: np.ndarray, w, b: int, h: int):
    if idx.ndim != 1:
        raise ShapeError(f"index list at ({b}, {h}) must be 1-d")
    if w is not None:
        w = np.asarray(w, dtype=np.float64)
        if w.shape != idx.shape:
            raise ShapeError(f"weights at ({b}, {h}) have shape {w.shape}, indices {idx.shape}")
        if not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise ValueError(f"weights at ({b}, {h}) must be strictly positive and finite")
    if idx.size > 1 and not np.all(idx[1:] > idx[:-1]):
        order = np.argsort(idx, kind="stable")
        idx = idx[order]
        if w is not None:
            w = w[order]
        if np.any(idx[1:] == idx[:-1]):
            raise ValueError(f"duplicate token index at ({b}, {h})")
    return np.ascontiguousarray(idx), w


def _check_inputs(config: AttentionConfig, cache: PagedKvCache, seqs, queries) -> tuple[np.ndarray, list[int]]:
    cc = cache.config
    if cc.num_kv_heads != config.num_kv_heads or cc.head_dim != config.head_dim:
        raise ShapeError(
            f"cache geometry (H_kv={cc.num_kv_heads}, D={cc.head_dim}) does not match "
            f"attention config (H_kv={config.num_kv_heads}, D={config.head_dim})"
        )
    q = np.asarray(queries, dtype=np.float64)
    want = (len(seqs), config.num_q_heads, config.head_dim)
    if q.shape != want:
        raise ShapeError(f"queries must have shape {want}, got {q.shape}")
    if not np.all(np.isfinite(q)):
        raise ValueError("queries contain non-finite entries")
    lengths = [cache.num_tokens(s) for s in seqs]
    for s, n in zip(seqs, lengths):
        if n == 0:
            raise ValueError(f"sequence {s!r} is empty")
    return q, lengths


def dense_decode(config: AttentionConfig, cache: PagedKvCache, seqs: Sequence[Hashable],
                 queries: np.ndarray) -> AttentionOutput:
    """Full softmax attention of one decode token per sequence over its whole cache.

    Each kv head's rows are read once and shared by the ``G`` query heads of
    its group.
    """
    q, lengths = _check_inputs(config, cache, seqs, queries)
    G = config.group_size
    scale = config.softmax_scale
    B, Hq, D = q.shape
    out = np.empty((B, Hq, D))
    lse = np.empty((B, Hq))
    for b, (seq, n) in enumerate(zip(seqs, lengths)):
        everything = np.arange(n, dtype=np.int64)
        for j in range(config.num_kv_heads):
            heads = slice(j * G, (j + 1) * G)
            out[b, heads], lse[b, heads] = cache.attend(seq, j, everything, None, q[b, heads], scale)
    return AttentionOutput(out, lse)


def sparse_decode(config: AttentionConfig, cache: PagedKvCache, seqs: Sequence[Hashable],
                  queries: np.ndarray, idx: SparseIndexSet) -> AttentionOutput:
    """Weighted softmax over each query head's own index list.

    With weights ``w``: ``a_i = w_i exp(s_i - m) / sum_j w_j exp(s_j - m)``.
    Rows are gathered per query head, so a token chosen by several heads of
    one group is read once per head.
    """
    q, lengths = _check_inputs(config, cache, seqs, queries)
    idx.validate(lengths, config.num_q_heads)
    G = config.group_size
    scale = config.softmax_scale
    B, Hq, D = q.shape
    out = np.empty((B, Hq, D))
    lse = np.empty((B, Hq))
    for b, seq in enumerate(seqs):
        for h in range(Hq):
            i, w = idx.head(b, h)
            o, l = cache.attend(seq, gqa_kv_head(h, G), i, w, q[b, h:h + 1], scale)
            out[b, h], lse[b, h] = o[0], l[0]
    return AttentionOutput(out, lse)


def reference_decode(keys: np.ndarray, values: np.ndarray, query: np.ndarray, scale: float,
                     indices=None, weights=None) -> tuple[np.ndarray, float]:
    """Two-pass float64 masked softmax over contiguous ``(N, D)`` keys/values.

    Independent of the paged kernels; used as the correctness oracle.
    """
    k = np.asarray(keys, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if indices is not None:
        k, v = k[indices], v[indices]
    s = scale * (k @ np.asarray(query, dtype=np.float64))
    m = s.max()
    e = np.exp(s - m)
    if weights is not None:
        e = e * np.asarray(weights, dtype=np.float64)
    den = e.sum()
    return (e @ v) / den, float(m + np.log(den))
