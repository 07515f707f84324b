"""Paged key/value cache with byte-accounted gathers.

Storage is a shared pool of fixed-size pages in NHD order
``(page, slot, kv_head, dim)``; each sequence owns an ordered list of page
ids.  Every read of key/value rows that goes through :meth:`gather_rows` or
:meth:`attend` bumps :attr:`PagedKvCache.bytes_read` by exactly
``2 * rows * head_dim * element_width``.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Hashable

import numpy as np

from . import kernels
from .errors import AllocationError, ShapeError

_DTYPES = {2: np.float16, 4: np.float32}


@dataclass(frozen=True)
class CacheConfig:
    num_kv_heads: int
    head_dim: int
    page_size: int = 16
    element_width: int = 2

    def __post_init__(self):
        for name in ("num_kv_heads", "head_dim", "page_size"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.element_width not in _DTYPES:
            raise ValueError(f"element_width must be 2 or 4, got {self.element_width}")

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(_DTYPES[self.element_width])

    @property
    def row_bytes(self) -> int:
        """Bytes of one key row (or one value row) for one kv head."""
        return self.head_dim * self.element_width


@dataclass
class PageTable:
    sequence_id: Hashable
    page_size: int
    page_ids: list[int] = field(default_factory=list)
    total_tokens: int = 0

    @property
    def last_occupancy(self) -> int:
        if not self.page_ids:
            return 0
        return self.total_tokens - (len(self.page_ids) - 1) * self.page_size

    def locate(self, t: int) -> tuple[int, int]:
        return token_location(self, t)


@dataclass
class KvPage:
    keys: np.ndarray
    values: np.ndarray
    occupancy: int


def token_location(table: PageTable, t: int) -> tuple[int, int]:
    """Map logical token ``t`` to ``(page_id, slot)``."""
    t = int(t)
    if not 0 <= t < table.total_tokens:
        raise IndexError(
            f"token {t} out of range for sequence {table.sequence_id!r} "
            f"with {table.total_tokens} tokens"
        )
    return table.page_ids[t // table.page_size], t % table.page_size


class PagedKvCache:
    """Shared page pool plus per-sequence page tables.

    Parameters
    ----------
    config : CacheConfig
    initial_pages : int
        Pool capacity allocated up front; the pool doubles on demand.
    max_pages : int, optional
        Hard cap on pool size.  Appends that would exceed it raise
        :class:`AllocationError` and leave the cache unchanged.
    """

    def __init__(self, config: CacheConfig, initial_pages: int = 64, max_pages: int | None = None):
        self.config = config
        self.max_pages = max_pages
        cap = max(1, initial_pages if max_pages is None else min(initial_pages, max_pages))
        shape = (cap, config.page_size, config.num_kv_heads, config.head_dim)
        self._k = np.zeros(shape, dtype=config.dtype)
        self._v = np.zeros(shape, dtype=config.dtype)
        self._occupancy = np.zeros(cap, dtype=np.int64)
        self._next_page = 0
        self.tables: dict[Hashable, PageTable] = {}
        self._page_arrays: dict[Hashable, np.ndarray] = {}
        self._bytes_read = 0
        self._lock = threading.RLock()

    # -- introspection -------------------------------------------------

    @property
    def bytes_read(self) -> int:
        """Monotone count of key+value bytes gathered so far."""
        return self._bytes_read

    @property
    def pages_allocated(self) -> int:
        return self._next_page

    @property
    def k_pool(self) -> np.ndarray:
        return self._k

    @property
    def v_pool(self) -> np.ndarray:
        return self._v

    def num_tokens(self, seq: Hashable) -> int:
        return self._table(seq).total_tokens

    def page_count(self, seq: Hashable) -> int:
        return len(self._table(seq).page_ids)

    def page(self, page_id: int) -> KvPage:
        if not 0 <= page_id < self._next_page:
            raise IndexError(f"page {page_id} not allocated")
        return KvPage(self._k[page_id], self._v[page_id], int(self._occupancy[page_id]))

    def token_location(self, seq: Hashable, t: int) -> tuple[int, int]:
        return token_location(self._table(seq), t)

    def page_array(self, seq: Hashable) -> np.ndarray:
        """Page ids of ``seq`` as a contiguous int64 array (kernel input)."""
        arr = self._page_arrays.get(seq)
        if arr is None:
            arr = np.asarray(self._table(seq).page_ids, dtype=np.int64)
            self._page_arrays[seq] = arr
        return arr

    def _table(self, seq: Hashable) -> PageTable:
        try:
            return self.tables[seq]
        except KeyError:
            raise KeyError(f"unknown sequence {seq!r}") from None

    # -- writes ----------------------------------------------------------

    def _grow(self, needed: int) -> None:
        cap = self._k.shape[0]
        if needed <= cap:
            return
        if self.max_pages is not None and needed > self.max_pages:
            raise AllocationError(
                f"page pool exhausted: need {needed} pages, cap is {self.max_pages}"
            )
        new_cap = max(needed, 2 * cap)
        if self.max_pages is not None:
            new_cap = min(new_cap, self.max_pages)
        extra = new_cap - cap
        pad = ((0, extra), (0, 0), (0, 0), (0, 0))
        self._k = np.pad(self._k, pad)
        self._v = np.pad(self._v, pad)
        self._occupancy = np.pad(self._occupancy, (0, extra))

    def append_tokens(self, seq: Hashable, keys: np.ndarray, values: np.ndarray) -> int:
        """Append ``T`` tokens of keys/values (each ``T x H_kv x D``) to ``seq``.

        Creates the sequence on first use.  Returns the new token count.
        """
        cfg = self.config
        keys = np.asarray(keys)
        values = np.asarray(values)
        want = (cfg.num_kv_heads, cfg.head_dim)
        if keys.ndim != 3 or keys.shape[1:] != want:
            raise ShapeError(f"keys must be T x {want[0]} x {want[1]}, got {keys.shape}")
        if values.shape != keys.shape:
            raise ShapeError(f"values shape {values.shape} != keys shape {keys.shape}")
        T = keys.shape[0]
        ps = cfg.page_size
        with self._lock:
            table = self.tables.get(seq)
            if table is None:
                table = PageTable(seq, ps)
            if T == 0:
                self.tables.setdefault(seq, table)
                return table.total_tokens
            free_slots = (ps - table.last_occupancy) if table.page_ids else 0
            fill = min(free_slots, T)
            new_pages = -(-(T - fill) // ps)
            first = self._next_page
            self._grow(first + new_pages)

            k = keys.astype(cfg.dtype, copy=False)
            v = values.astype(cfg.dtype, copy=False)
            if fill:
                last = table.page_ids[-1]
                slot = table.last_occupancy
                self._k[last, slot:slot + fill] = k[:fill]
                self._v[last, slot:slot + fill] = v[:fill]
                self._occupancy[last] += fill
            rest = T - fill
            if rest:
                flat_k = self._k[first:first + new_pages].reshape(-1, *want)
                flat_v = self._v[first:first + new_pages].reshape(-1, *want)
                flat_k[:rest] = k[fill:]
                flat_v[:rest] = v[fill:]
                self._occupancy[first:first + new_pages] = ps
                self._occupancy[first + new_pages - 1] = rest - (new_pages - 1) * ps
                table.page_ids.extend(range(first, first + new_pages))
                self._next_page = first + new_pages
            table.total_tokens += T
            self.tables[seq] = table
            self._page_arrays.pop(seq, None)
            return table.total_tokens

    # -- reads -----------------------------------------------------------

    def _charge(self, rows: int) -> None:
        with self._lock:
            self._bytes_read += 2 * rows * self.config.row_bytes

    def _check_head(self, kv_head: int) -> None:
        if not 0 <= kv_head < self.config.num_kv_heads:
            raise IndexError(
                f"kv_head {kv_head} out of range [0, {self.config.num_kv_heads})"
            )

    def _check_indices(self, seq: Hashable, idx: np.ndarray) -> np.ndarray:
        n = self.num_tokens(seq)
        idx = np.ascontiguousarray(idx, dtype=np.int64)
        if idx.ndim != 1:
            raise ShapeError(f"token indices must be 1-d, got shape {idx.shape}")
        if idx.size:
            bad = idx[(idx < 0) | (idx >= n)]
            if bad.size:
                raise IndexError(
                    f"token index {int(bad[0])} out of range for sequence {seq!r} with {n} tokens"
                )
        return idx

    def gather_rows(self, seq: Hashable, kv_head: int, token_indices) -> tuple[np.ndarray, np.ndarray]:
        """Copy the key and value rows of ``token_indices`` (in the given order)."""
        self._check_head(kv_head)
        idx = self._check_indices(seq, token_indices)
        if idx.size == 0:
            d = self.config.head_dim
            empty = np.empty((0, d), dtype=self.config.dtype)
            return empty, empty.copy()
        k, v = kernels.gather(self._k, self._v, self.page_array(seq), self.config.page_size, kv_head, idx)
        self._charge(idx.size)
        return k, v

    def attend(self, seq: Hashable, kv_head: int, token_indices, weights, queries: np.ndarray,
               scale: float) -> tuple[np.ndarray, np.ndarray]:
        """Fused gather + softmax-weighted sum for ``g`` queries sharing ``kv_head``.

        Each listed row is read once regardless of ``g``.  Returns outputs
        ``(g, D)`` and log-normalizers ``(g,)``.
        """
        self._check_head(kv_head)
        idx = self._check_indices(seq, token_indices)
        if idx.size == 0:
            raise ValueError(f"empty index list for sequence {seq!r}, kv head {kv_head}")
        q = np.ascontiguousarray(queries, dtype=np.float64)
        w = None if weights is None else np.ascontiguousarray(weights, dtype=np.float64)
        out = kernels.attend(self._k, self._v, self.page_array(seq), self.config.page_size,
                             kv_head, idx, w, q, float(scale))
        self._charge(idx.size)
        return out

    def score_all(self, seq: Hashable, kv_head: int, queries: np.ndarray, scale: float) -> np.ndarray:
        """Exact scores ``scale * <q, k_t>`` for every cached token, shape ``(g, N)``.

        This is the full score pass used by oracle selection.  It reads key
        rows only and is not charged to :attr:`bytes_read`.
        """
        self._check_head(kv_head)
        q = np.ascontiguousarray(np.atleast_2d(queries), dtype=np.float64)
        n = self.num_tokens(seq)
        return kernels.scores(self._k, self.page_array(seq), self.config.page_size,
                              kv_head, n, q, float(scale))

    def export_sequence(self, seq: Hashable) -> tuple[np.ndarray, np.ndarray]:
        """Uncharged contiguous copy ``(N, H_kv, D)`` of a sequence's keys and values.

        For index construction and reference checks, not for decode.
        """
        table = self._table(seq)
        pages = self.page_array(seq)
        n = table.total_tokens
        shape = (-1, self.config.num_kv_heads, self.config.head_dim)
        return self._k[pages].reshape(shape)[:n].copy(), self._v[pages].reshape(shape)[:n].copy()


def append_tokens(cache: PagedKvCache, seq: Hashable, keys, values) -> int:
    return cache.append_tokens(seq, keys, values)


def gather_rows(cache: PagedKvCache, seq: Hashable, kv_head: int, token_indices):
    return cache.gather_rows(seq, kv_head, token_indices)
