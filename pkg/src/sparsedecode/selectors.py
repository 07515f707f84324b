"""Index selection: oracle top-k, sink/local/heavy retention, channel-sketch
(Double Sparsity style) indexing, and stochastic top + sampled remainder.

Every selector returns a strictly increasing int64 index array for one
(sequence, query head).  Ties in score are broken toward the smaller token
index.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Hashable, Sequence

import numpy as np

from .attention import AttentionConfig, SparseIndexSet, gqa_kv_head
from .kv_store import PagedKvCache

KINDS = ("oracle_topk", "sink_local_heavy", "double_sparsity", "stochastic")

CLI_NAMES = {
    "oracle": "oracle_topk",
    "sink-local": "sink_local_heavy",
    "double-sparsity": "double_sparsity",
    "stochastic": "stochastic",
}

_ALLOWED = {
    "oracle_topk": {"sparsity", "top_k"},
    "sink_local_heavy": {"sparsity", "top_k", "heavy_fraction", "sink", "local"},
    "double_sparsity": {"sparsity", "top_k", "channels", "sketch_width"},
    "stochastic": {"sparsity", "top_k", "deterministic_fraction", "sample_count", "rng_seed"},
}
_OPTIONAL = ("heavy_fraction", "channels", "sketch_width", "deterministic_fraction",
             "sample_count", "rng_seed")


@dataclass(frozen=True)
class SelectorSpec:
    """Tagged selector configuration.

    The budget is given in exactly one form: ``sparsity`` (factor S >= 1,
    each head keeps ~N/S tokens), ``top_k`` (absolute K), or, for
    ``sink_local_heavy`` only, ``heavy_fraction`` of the middle region.
    """

    kind: str
    sparsity: float | None = None
    top_k: int | None = None
    sink: int = 0
    local: int = 0
    heavy_fraction: float | None = None
    channels: int | None = None
    sketch_width: int | None = None
    deterministic_fraction: float | None = None
    sample_count: int | None = None
    rng_seed: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown selector kind {self.kind!r}; expected one of {KINDS}")
        allowed = _ALLOWED[self.kind]
        for name in _OPTIONAL + ("sparsity", "top_k"):
            if getattr(self, name) is not None and name not in allowed:
                raise ValueError(f"field {name!r} does not apply to selector {self.kind!r}")
        for name in ("sink", "local"):
            if getattr(self, name) and name not in allowed:
                raise ValueError(f"field {name!r} does not apply to selector {self.kind!r}")
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        forms = [f for f in ("sparsity", "top_k", "heavy_fraction") if getattr(self, f) is not None]
        if len(forms) != 1:
            raise ValueError(f"selector {self.kind!r} needs exactly one budget form, got {forms or 'none'}")
        if self.sparsity is not None and not self.sparsity >= 1:
            raise ValueError(f"sparsity factor must be >= 1, got {self.sparsity}")
        if self.top_k is not None and self.top_k < 1:
            raise ValueError(f"top_k must be >= 1, got {self.top_k}")
        if self.heavy_fraction is not None and not 0 <= self.heavy_fraction <= 1:
            raise ValueError(f"heavy_fraction must lie in [0, 1], got {self.heavy_fraction}")
        if self.kind == "double_sparsity":
            if self.num_channels < 0:
                raise ValueError("channels must be >= 0")
            if self.sketch_bytes not in (2, 4):
                raise ValueError(f"sketch_width must be 2 or 4, got {self.sketch_bytes}")
        if self.kind == "stochastic":
            if self.deterministic_fraction is None or self.sample_count is None:
                raise ValueError("stochastic selector needs deterministic_fraction and sample_count")
            if not 0 < self.deterministic_fraction <= 1:
                raise ValueError("deterministic_fraction must lie in (0, 1]")
            if self.sample_count < 0:
                raise ValueError("sample_count must be >= 0")

    @property
    def num_channels(self) -> int:
        return 8 if self.channels is None else self.channels

    @property
    def sketch_bytes(self) -> int:
        return 2 if self.sketch_width is None else self.sketch_width

    @property
    def seed(self) -> int:
        return 0 if self.rng_seed is None else self.rng_seed

    @property
    def fraction_mode(self) -> bool:
        return self.top_k is None

    def budget(self, n: int) -> int:
        """Token budget k for a context of ``n`` tokens (heavy part only for sink_local_heavy)."""
        if self.top_k is not None:
            return self.top_k
        if self.sparsity is not None:
            return budget_from_sparsity(self.sparsity, n)
        raise ValueError("heavy_fraction budget depends on the middle region; use select_sink_local_heavy")

    def with_sparsity(self, s: float) -> "SelectorSpec":
        return replace(self, sparsity=s, top_k=None, heavy_fraction=None)

    @classmethod
    def from_dict(cls, d: dict) -> "SelectorSpec":
        d = dict(d)
        d["kind"] = CLI_NAMES.get(d.get("kind"), d.get("kind"))
        return cls(**d)

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        for name in ("sparsity", "top_k", "heavy_fraction") + _OPTIONAL:
            if getattr(self, name) is not None:
                out[name] = getattr(self, name)
        if self.sink:
            out["sink"] = self.sink
        if self.local:
            out["local"] = self.local
        return out


def budget_from_sparsity(s: float, n: int) -> int:
    """``max(1, ceil(n / s))`` computed exactly."""
    if not s >= 1:
        raise ValueError(f"sparsity factor must be >= 1, got {s}")
    if n < 1:
        raise ValueError(f"context length must be >= 1, got {n}")
    return max(1, math.ceil(Fraction(n) / Fraction(s)))


def round_half_up(x: float) -> int:
    return math.floor(x + 0.5)


def achieved_density(n: int, sink: int, local: int, heavy_fraction: float) -> float:
    """Closed-form density of sink + local + heavy retention at context ``n``."""
    fixed = min(sink, n) + min(local, max(n - min(sink, n), 0))
    middle = n - fixed
    return (fixed + round_half_up(heavy_fraction * middle)) / n


def top_k_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores, ties toward smaller index, ascending order."""
    scores = np.asarray(scores)
    n = scores.size
    if not 0 <= k <= n:
        raise ValueError(f"k={k} outside [0, {n}]")
    if k == n:
        return np.arange(n, dtype=np.int64)
    if k == 0:
        return np.empty(0, dtype=np.int64)
    thr = np.partition(scores, n - k)[n - k]
    above = np.flatnonzero(scores > thr)
    ties = np.flatnonzero(scores == thr)[: k - above.size]
    return np.union1d(above, ties).astype(np.int64)


def _head_scores(config: AttentionConfig, cache: PagedKvCache, seq, h: int, query) -> np.ndarray:
    s = cache.score_all(seq, gqa_kv_head(h, config.group_size), query, config.softmax_scale)[0]
    if not np.all(np.isfinite(s)):
        raise FloatingPointError(f"non-finite score for sequence {seq!r}, head {h}")
    return s


def select_oracle_topk(config: AttentionConfig, cache: PagedKvCache, seq: Hashable, h: int,
                       query: np.ndarray, k: int) -> np.ndarray:
    """The ``k`` tokens with the largest exact scores for query head ``h``."""
    n = cache.num_tokens(seq)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must lie in [1, N={n}]")
    return top_k_indices(_head_scores(config, cache, seq, h, query), k)


def select_sink_local_heavy(config: AttentionConfig, cache: PagedKvCache, seq: Hashable, h: int,
                            query: np.ndarray, spec: SelectorSpec) -> np.ndarray:
    """Sinks ``[0, sink)`` + local window ``[N-local, N)`` + top-scored middle tokens."""
    n = cache.num_tokens(seq)
    if n < 1:
        raise ValueError(f"sequence {seq!r} is empty")
    lo = min(spec.sink, n)
    hi = max(n - spec.local, lo)
    middle = hi - lo
    if spec.top_k is not None:
        heavy = min(spec.top_k, middle)
    else:
        frac = spec.heavy_fraction if spec.heavy_fraction is not None else 1.0 / spec.sparsity
        heavy = round_half_up(frac * middle)
    parts = [np.arange(lo, dtype=np.int64), np.arange(hi, n, dtype=np.int64)]
    if heavy:
        s = _head_scores(config, cache, seq, h, query)[lo:hi]
        parts.append(top_k_indices(s, heavy) + lo)
    out = np.unique(np.concatenate(parts))
    if out.size == 0:
        # no sinks, no locals, zero heavy budget: keep the best token
        out = top_k_indices(_head_scores(config, cache, seq, h, query), 1)
    return out


@dataclass
class ChannelSketch:
    """Per-kv-head channel ids ``(H_kv, C)`` and sketches ``(H_kv, N, C)``."""

    channel_ids: np.ndarray
    sketch: np.ndarray
    head_dim: int

    @property
    def num_tokens(self) -> int:
        return self.sketch.shape[1]

    @property
    def num_channels(self) -> int:
        return self.channel_ids.shape[1]


def _rank_channels(keys: np.ndarray, c: int) -> np.ndarray:
    stat = np.abs(keys.astype(np.float64)).mean(axis=0)
    return top_k_indices(stat, c)


def build_channel_sketch(cache: PagedKvCache, seq: Hashable, channels: int = 8,
                         sketch_width: int = 2) -> ChannelSketch:
    """Pick the ``channels`` dimensions with largest mean |key| per kv head and
    store those key columns at ``sketch_width`` bytes per scalar."""
    D = cache.config.head_dim
    if not 0 <= channels <= D:
        raise ValueError(f"channels={channels} must lie in [0, head_dim={D}]")
    if sketch_width not in (2, 4):
        raise ValueError(f"sketch_width must be 2 or 4, got {sketch_width}")
    if cache.num_tokens(seq) == 0:
        raise ValueError(f"sequence {seq!r} is empty")
    keys, _ = cache.export_sequence(seq)  # (N, H_kv, D)
    dtype = np.float16 if sketch_width == 2 else np.float32
    ids, sketches = [], []
    for j in range(keys.shape[1]):
        ch = _rank_channels(keys[:, j], channels)
        ids.append(ch)
        sketches.append(keys[:, j][:, ch].astype(dtype))
    return ChannelSketch(np.stack(ids), np.stack(sketches), D)


def sketch_scores(sketch: ChannelSketch, kv_head: int, query: np.ndarray, scale: float | None = None) -> np.ndarray:
    if scale is None:
        scale = 1.0 / math.sqrt(sketch.head_dim)
    q = np.asarray(query, dtype=np.float64)[sketch.channel_ids[kv_head]]
    return scale * (sketch.sketch[kv_head].astype(np.float64) @ q)


def select_double_sparsity(sketch: ChannelSketch, kv_head: int, query: np.ndarray, k: int,
                           scale: float | None = None) -> np.ndarray:
    """Top-``k`` by approximate scores over the sketched channels."""
    n = sketch.num_tokens
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must lie in [1, N={n}]")
    return top_k_indices(sketch_scores(sketch, kv_head, query, scale), k)


def head_rng(seed: int, b: int, h: int) -> np.random.Generator:
    """Independent generator for (batch element, head), reproducible from ``seed``."""
    return np.random.default_rng([seed, b, h])


def stochastic_from_scores(scores: np.ndarray, k_det: int, sample_count: int,
                           rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic top-``k_det`` (weight 1) plus a uniform sample of the rest.

    Sampled tokens carry weight ``|R| / m`` so the weighted softmax
    denominator is an unbiased estimate of the full one.
    """
    n = scores.size
    top = top_k_indices(scores, min(k_det, n))
    mask = np.ones(n, dtype=bool)
    mask[top] = False
    rest = np.flatnonzero(mask)
    m = min(sample_count, rest.size)
    if m == 0:
        return top, np.ones(top.size)
    picked = np.sort(rng.choice(rest.size, size=m, replace=False))
    sampled = rest[picked]
    w_s = 1.0 if m == rest.size else rest.size / m
    idx = np.concatenate([top, sampled])
    w = np.concatenate([np.ones(top.size), np.full(m, w_s)])
    order = np.argsort(idx, kind="stable")
    return idx[order], w[order]


def select_stochastic(config: AttentionConfig, cache: PagedKvCache, seq: Hashable, h: int,
                      query: np.ndarray, spec: SelectorSpec, batch_index: int = 0
                      ) -> tuple[np.ndarray, np.ndarray]:
    n = cache.num_tokens(seq)
    k = spec.budget(n)
    k_det = math.ceil(spec.deterministic_fraction * k)
    if spec.deterministic_fraction * k < 1:
        raise ValueError(f"deterministic part is empty: {spec.deterministic_fraction} * {k} < 1")
    s = _head_scores(config, cache, seq, h, query)
    return stochastic_from_scores(s, k_det, spec.sample_count, head_rng(spec.seed, batch_index, h))


def select_indices(spec: SelectorSpec, config: AttentionConfig, cache: PagedKvCache,
                   seqs: Sequence[Hashable], queries: np.ndarray,
                   sketches: dict | None = None) -> SparseIndexSet:
    """Run ``spec`` for every (sequence, query head) of a decode batch."""
    q = np.asarray(queries, dtype=np.float64)
    G = config.group_size
    all_idx, all_w = [], []
    any_weights = spec.kind == "stochastic"
    for b, seq in enumerate(seqs):
        n = cache.num_tokens(seq)
        row_i, row_w = [], []
        if spec.kind == "double_sparsity":
            sk = (sketches or {}).get(seq)
            if sk is None:
                sk = build_channel_sketch(cache, seq, spec.num_channels, spec.sketch_bytes)
                if sketches is not None:
                    sketches[seq] = sk
        elif spec.kind == "oracle_topk":
            k = spec.budget(n)
            # one score pass per kv head, shared by its query group
            for j in range(config.num_kv_heads):
                s = cache.score_all(seq, j, q[b, j * G:(j + 1) * G], config.softmax_scale)
                if not np.all(np.isfinite(s)):
                    raise FloatingPointError(f"non-finite score for sequence {seq!r}")
                row_i.extend(top_k_indices(r, min(k, n)) for r in s)
            row_w = [None] * config.num_q_heads
        for h in range(config.num_q_heads):
            if spec.kind == "oracle_topk":
                break
            if spec.kind == "sink_local_heavy":
                row_i.append(select_sink_local_heavy(config, cache, seq, h, q[b, h], spec))
                row_w.append(None)
            elif spec.kind == "double_sparsity":
                k = min(spec.budget(n), n)
                row_i.append(select_double_sparsity(sk, gqa_kv_head(h, G), q[b, h], k, config.softmax_scale))
                row_w.append(None)
            else:
                i, w = select_stochastic(config, cache, seq, h, q[b, h], spec, batch_index=b)
                row_i.append(i)
                row_w.append(w)
        all_idx.append(row_i)
        all_w.append(row_w)
    return SparseIndexSet(all_idx, all_w if any_weights else None)
