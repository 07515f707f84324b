"""Synthetic decode workloads, dense-vs-sparse sweeps, and table output."""
from __future__ import annotations

import csv
import io
import json
import statistics
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from .attention import AttentionConfig, SparseIndexSet, dense_decode, reference_decode, sparse_decode
from .collapse import find_collapse_pair, verify_witness
from .errors import CorrectnessError, ResourceCapError
from .kv_store import CacheConfig, PagedKvCache
from .selectors import SelectorSpec, select_indices
from .traffic import (
    Calibration,
    WorkloadGeometry,
    estimate_dense,
    estimate_indexer,
    estimate_sparse,
    fit_calibration,
    predict_speedup,
    sparse_bytes_for_rows,
)

DEFAULT_SPARSITY = (2, 4, 10, 20, 50, 100, 200, 500)
DEFAULT_MEM_CAP = 3 * 2**30
FORMATS = ("csv", "markdown", "json")
CORRECTNESS_RTOL = 1e-4


@dataclass
class BenchConfig:
    context: int = 32768
    batch_sizes: tuple[int, ...] = (1, 4, 8)
    num_q_heads: int = 32
    num_kv_heads: int = 8
    head_dim: int = 128
    page_size: int = 16
    element_width: int = 2
    sparsity_levels: tuple[float, ...] = DEFAULT_SPARSITY
    selector: SelectorSpec = field(default_factory=lambda: SelectorSpec("oracle_topk", sparsity=1))
    repeats: int = 20
    warmup: int = 3
    seed: int = 0
    output: str | None = None
    format: str = "markdown"
    mem_cap_bytes: int = DEFAULT_MEM_CAP
    check: bool = True

    def __post_init__(self):
        self.batch_sizes = tuple(int(b) for b in self.batch_sizes)
        self.sparsity_levels = tuple(self.sparsity_levels)
        if self.repeats < 1:
            raise ValueError(f"repeats must be >= 1, got {self.repeats}")
        if self.warmup < 0:
            raise ValueError(f"warmup must be >= 0, got {self.warmup}")
        if not self.batch_sizes or min(self.batch_sizes) < 1:
            raise ValueError("batch sizes must be positive")
        if list(self.sparsity_levels) != sorted(self.sparsity_levels):
            raise ValueError(f"sparsity levels must be sorted ascending, got {list(self.sparsity_levels)}")
        if any(not s >= 1 for s in self.sparsity_levels):
            raise ValueError("sparsity levels must be >= 1")
        if self.format not in FORMATS:
            raise ValueError(f"unknown format {self.format!r}; expected one of {FORMATS}")
        # validates head divisibility
        self.geometry(1)

    def geometry(self, batch: int) -> WorkloadGeometry:
        return WorkloadGeometry(batch, self.context, self.num_q_heads, self.num_kv_heads,
                                self.head_dim, self.element_width, self.page_size)

    def attention_config(self) -> AttentionConfig:
        return AttentionConfig(self.num_q_heads, self.num_kv_heads, self.head_dim)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["selector"] = self.selector.to_dict()
        d["batch_sizes"] = list(self.batch_sizes)
        d["sparsity_levels"] = list(self.sparsity_levels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BenchConfig":
        d = dict(d)
        if isinstance(d.get("selector"), dict):
            d["selector"] = SelectorSpec.from_dict(d["selector"])
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Workload:
    cache: PagedKvCache
    seqs: list[int]
    queries: np.ndarray  # (B, H_q, D)
    needles: list[int] | None = None


def workload_bytes(geom: WorkloadGeometry) -> int:
    return estimate_dense(geom)


def generate_workload(geom: WorkloadGeometry, seed: int, planted_needle: bool = False,
                      needle_scale: float = 50.0, mem_cap_bytes: int | None = DEFAULT_MEM_CAP) -> Workload:
    """Seeded standard-normal keys, values and queries scaled by ``1/sqrt(D)``.

    With ``planted_needle`` each sequence gets one token whose key, for every
    kv head, is ``needle_scale`` times the sum of that head's group queries.
    """
    need = workload_bytes(geom)
    if mem_cap_bytes is not None and need > mem_cap_bytes:
        raise ResourceCapError(
            f"workload needs {need} bytes of KV cache, memory cap is {mem_cap_bytes} bytes"
        )
    B, N, H, D = geom.batch, geom.context, geom.num_kv_heads, geom.head_dim
    G = geom.group_size
    rng = np.random.default_rng(seed)
    cfg = CacheConfig(H, D, geom.page_size, geom.element_width)
    cache = PagedKvCache(cfg, initial_pages=max(1, B * -(-N // geom.page_size)))
    root = 1.0 / np.sqrt(D)
    queries = rng.standard_normal((B, geom.num_q_heads, D)) * root
    needles = [] if planted_needle else None
    for b in range(B):
        keys = rng.standard_normal((N, H, D), dtype=np.float32)
        keys *= root
        if planted_needle:
            t = int(rng.integers(N))
            needles.append(t)
            for j in range(H):
                keys[t, j] = needle_scale * queries[b, j * G:(j + 1) * G].sum(axis=0)
        values = rng.standard_normal((N, H, D), dtype=np.float32)
        values *= root
        cache.append_tokens(b, keys, values)
    return Workload(cache, list(range(B)), queries, needles)


@dataclass
class RunRecord:
    batch: int
    sparsity: float | None
    dense_ms: float
    sparse_ms: float | None
    measured_speedup: float | None
    predicted_speedup: float | None
    bytes_dense: int
    bytes_sparse: int | None
    bytes_indexer: int | None
    max_output_rel_error: float | None
    select_ms: float | None = None


def _median_ms(fn: Callable[[], object], repeats: int, warmup: int) -> float:
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(samples)


def _max_rel_error(cfg: AttentionConfig, workload: Workload, seqs, queries, idx: SparseIndexSet,
                   got: np.ndarray) -> tuple[float, tuple[int, int]]:
    G = cfg.group_size
    worst, where = 0.0, (0, 0)
    for b, seq in enumerate(seqs):
        keys, values = workload.cache.export_sequence(seq)
        for h in range(cfg.num_q_heads):
            i, w = idx.head(b, h)
            j = h // G
            ref, _ = reference_decode(keys[:, j], values[:, j], queries[b, h], cfg.softmax_scale, i, w)
            err = float(np.abs(got[b, h] - ref).max() / max(np.abs(ref).max(), 1e-300))
            if err > worst:
                worst, where = err, (b, h)
    return worst, where


def _sweep_specs(config: BenchConfig) -> list[tuple[float, SelectorSpec]]:
    sel = config.selector
    if sel.heavy_fraction is not None:
        return [(1.0 / sel.heavy_fraction if sel.heavy_fraction > 0 else float("inf"), sel)]
    if sel.top_k is not None:
        return [(config.context / sel.top_k, sel)]
    return [(s, sel.with_sparsity(s)) for s in config.sparsity_levels]


def run_sweep(config: BenchConfig, calibration: Calibration | None = None,
              workload: Workload | None = None, log: Callable[[str], None] | None = None) -> list[RunRecord]:
    """Time dense and sparse decode for every (B, S) and check them inline.

    ``sparse_ms`` times the sparse backend only (selection excluded);
    ``select_ms`` is reported separately.  Raises CorrectnessError when the
    sparse output strays from the masked float64 reference by more than
    ``1e-4`` relative, or when byte counters disagree with the model.
    """
    calibration = calibration or fit_calibration()
    cfg = config.attention_config()
    if workload is None:
        workload = generate_workload(config.geometry(max(config.batch_sizes)), config.seed,
                                     mem_cap_bytes=config.mem_cap_bytes)
    cache = workload.cache
    records = []
    for B in config.batch_sizes:
        geom = config.geometry(B)
        seqs = workload.seqs[:B]
        q = workload.queries[:B]
        before = cache.bytes_read
        dense_decode(cfg, cache, seqs, q)
        bytes_dense = cache.bytes_read - before
        if bytes_dense != estimate_dense(geom):
            raise CorrectnessError(
                f"B={B}: dense counter delta {bytes_dense} != model {estimate_dense(geom)}"
            )
        dense_ms = _median_ms(lambda: dense_decode(cfg, cache, seqs, q), config.repeats, config.warmup)
        if log:
            log(f"B={B} dense {dense_ms:.2f} ms")
        specs = _sweep_specs(config)
        if not specs:
            records.append(RunRecord(B, None, dense_ms, None, None, None, bytes_dense, None, None, None))
        for s, spec in specs:
            t0 = time.perf_counter()
            idx = select_indices(spec, cfg, cache, seqs, q)
            select_ms = (time.perf_counter() - t0) * 1e3
            sizes = idx.sizes()
            before = cache.bytes_read
            out = sparse_decode(cfg, cache, seqs, q, idx)
            bytes_sparse = cache.bytes_read - before
            uniform = bool(np.all(sizes == sizes.flat[0]))
            expected = (estimate_sparse(geom, int(sizes.flat[0])) if uniform
                        else sparse_bytes_for_rows(geom, int(sizes.sum())))
            if bytes_sparse != expected:
                raise CorrectnessError(f"B={B}, S={s}: sparse counter delta {bytes_sparse} != model {expected}")
            err = None
            if config.check:
                err, (b, h) = _max_rel_error(cfg, workload, seqs, q, idx, out.outputs)
                if not err <= CORRECTNESS_RTOL:
                    raise CorrectnessError(
                        f"B={B}, S={s}, batch element {b}, head {h}: relative error {err:.3g} "
                        f"exceeds {CORRECTNESS_RTOL}"
                    )
            sparse_ms = _median_ms(lambda: sparse_decode(cfg, cache, seqs, q, idx),
                                   config.repeats, config.warmup)
            k = int(sizes.max())
            indexer = estimate_indexer(geom, spec) if spec.kind == "double_sparsity" else 0
            records.append(RunRecord(
                batch=B,
                sparsity=s,
                dense_ms=dense_ms,
                sparse_ms=sparse_ms,
                measured_speedup=dense_ms / sparse_ms,
                predicted_speedup=predict_speedup(geom, k, None, calibration),
                bytes_dense=bytes_dense,
                bytes_sparse=int(bytes_sparse),
                bytes_indexer=int(indexer),
                max_output_rel_error=err,
                select_ms=select_ms,
            ))
            if log:
                log(f"B={B} S={s:g} sparse {sparse_ms:.2f} ms ({dense_ms / sparse_ms:.2f}x)")
    return records


# -- tables ---------------------------------------------------------------

def format_speedup(x: float) -> str:
    return f"{x:.2f}×"


def sparsity_label(s: float) -> str:
    return f"{s:g}x"


def speedup_markdown(rows: Sequence[tuple[int, float, dict]], levels: Sequence[float],
                     baseline_label: str = "dense (ms)") -> str:
    """Rows of ``(B, baseline_ms, {S: speedup})`` as a markdown table."""
    head = ["B", baseline_label] + [sparsity_label(s) for s in levels]
    lines = ["| " + " | ".join(head) + " |", "|" + "|".join("---:" for _ in head) + "|"]
    for b, base, cells in rows:
        vals = [str(b), f"{base:.2f}"]
        vals += [format_speedup(cells[s]) if cells.get(s) is not None else "" for s in levels]
        lines.append("| " + " | ".join(vals) + " |")
    return "\n".join(lines) + "\n"


_CSV_FIELDS = [f.name for f in fields(RunRecord)]
_INT_FIELDS = {"batch", "bytes_dense", "bytes_sparse", "bytes_indexer"}


def _csv_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_csv(text: str) -> list[RunRecord]:
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        kw = {}
        for name in _CSV_FIELDS:
            raw = row[name]
            if raw == "":
                kw[name] = None
            elif name in _INT_FIELDS:
                kw[name] = int(raw)
            else:
                kw[name] = float(raw)
        out.append(RunRecord(**kw))
    return out


def emit_table(records: Sequence[RunRecord], fmt: str = "markdown") -> str:
    if fmt not in FORMATS:
        raise ValueError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    if not records:
        raise ValueError("no records to emit")
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(_CSV_FIELDS)
        for r in records:
            w.writerow([_csv_value(getattr(r, n)) for n in _CSV_FIELDS])
        return buf.getvalue()
    if fmt == "json":
        return json.dumps([asdict(r) for r in records], indent=2) + "\n"
    levels = sorted({r.sparsity for r in records if r.sparsity is not None})
    rows: dict[int, tuple[float, dict]] = {}
    for r in records:
        base, cells = rows.setdefault(r.batch, (r.dense_ms, {}))
        if r.sparsity is not None:
            cells[r.sparsity] = r.measured_speedup
    return speedup_markdown([(b, base, cells) for b, (base, cells) in rows.items()], levels)


# -- collapse -------------------------------------------------------------

def run_collapse(n: int, d: int, beta: float, seed: int = 0, tol: float = 1e-9) -> dict:
    """Random Gaussian ``V`` (n x d), a collapse witness if one exists, and its checks."""
    if not 0.0 < beta < 1.0:
        raise ValueError(f"beta must lie in the open interval (0, 1), got {beta}")
    if n < 2 or d < 1:
        raise ValueError(f"need N >= 2 and d >= 1, got N={n}, d={d}")
    V = np.random.default_rng(seed).standard_normal((n, d))
    report = {"N": n, "d": d, "beta": beta, "seed": seed, "min_width_for_injectivity": n - 1}
    w = find_collapse_pair(V, beta)
    if w is None:
        report.update(witness=False, message="no witness (d >= N-1)" if d >= n - 1
                      else "no witness (stacked map has full column rank)")
        return report
    rep = verify_witness(V, w, tol)
    report.update(witness=True, message="witness found", tol=tol, passed=rep.passed,
                  checks=rep.checks, **w.to_dict())
    return report
