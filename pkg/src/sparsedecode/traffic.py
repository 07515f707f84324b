"""Per-decode-step byte traffic for dense, sparse and fixed-state regimes.

Times are modelled as ``bytes / bandwidth + overhead`` with the two scalars
fitted to a column of measured dense latencies.  Sparse traffic defaults to
worst-case per-query-head accounting: every query head gathers its own
rows, so under GQA a full-density sparse step moves ``G`` times the dense
bytes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np
from scipy.optimize import nnls

from .selectors import SelectorSpec, budget_from_sparsity


@dataclass(frozen=True)
class WorkloadGeometry:
    batch: int
    context: int
    num_q_heads: int = 32
    num_kv_heads: int = 8
    head_dim: int = 128
    element_width: int = 2
    page_size: int = 16

    def __post_init__(self):
        if self.num_q_heads % self.num_kv_heads:
            raise ValueError(
                f"num_q_heads ({self.num_q_heads}) must be a multiple of num_kv_heads ({self.num_kv_heads})"
            )
        if self.batch < 0 or self.context < 0:
            raise ValueError("batch and context must be non-negative")

    @property
    def group_size(self) -> int:
        return self.num_q_heads // self.num_kv_heads

    def with_batch(self, b: int) -> "WorkloadGeometry":
        return WorkloadGeometry(b, self.context, self.num_q_heads, self.num_kv_heads,
                                self.head_dim, self.element_width, self.page_size)


# GPU reference measurements: FP16, GQA 32/8, D=128, page size 16, 128K context.
REFERENCE_GEOMETRY = WorkloadGeometry(1, 131072, 32, 8, 128, 2, 16)
REFERENCE_DENSE_MS = {1: 0.19, 4: 0.72, 8: 1.50, 16: 3.08}
REFERENCE_BACKEND_SPEEDUP = {
    1: {2: 0.32, 4: 0.63, 10: 1.45, 20: 2.58, 50: 5.57, 100: 10.25, 200: 11.05, 500: 11.14},
    4: {2: 0.33, 4: 0.66, 10: 1.64, 20: 3.18, 50: 7.45, 100: 13.36, 200: 24.25, 500: 42.04},
    8: {2: 0.38, 4: 0.77, 10: 1.90, 20: 3.75, 50: 8.88, 100: 16.82, 200: 29.64, 500: 76.14},
    16: {2: 0.45, 4: 0.89, 10: 2.21, 20: 4.35, 50: 10.54, 100: 20.09, 200: 37.32, 500: 76.77},
}
# Same hardware with an 8 x 16-bit channel sketch indexer included.
REFERENCE_INDEXED_SPEEDUP = {
    "gqa": {
        1: {2: 0.28, 5: 0.56, 10: 0.83, 20: 1.12, 50: 1.46, 100: 1.65},
        4: {2: 0.32, 5: 0.67, 10: 1.06, 20: 1.52, 50: 2.11, 100: 2.45},
        8: {2: 0.36, 5: 0.75, 10: 1.18, 20: 1.68, 50: 2.30, 100: 2.66},
        16: {2: 0.41, 5: 0.85, 10: 1.31, 20: 1.82, 50: 2.46, 100: 2.81},
    },
    "mha": {
        1: {2: 0.91, 5: 1.62, 10: 2.18, 20: 2.68, 50: 3.14, 100: 3.37},
        4: {2: 1.02, 5: 1.86, 10: 2.56, 20: 3.17, 50: 3.74, 100: 4.00},
        8: {2: 1.12, 5: 2.00, 10: 2.71, 20: 3.32, 50: 3.86, 100: 4.11},
        16: {2: 1.22, 5: 2.13, 10: 2.84, 20: 3.43, 50: 3.94, 100: 4.17},
    },
}
REFERENCE_MHA_DENSE_MS = {1: 0.70, 4: 2.79, 8: 5.61, 16: 11.18}


def estimate_dense(geom: WorkloadGeometry) -> int:
    """Keys + values read once per kv head."""
    return 2 * geom.batch * geom.context * geom.num_kv_heads * geom.head_dim * geom.element_width


def expected_union(n: int, k: int, g: int) -> float:
    """Expected size of the union of ``g`` independent uniform ``k``-subsets of ``n``."""
    if n == 0:
        return 0.0
    return n * (1.0 - (1.0 - k / n) ** g)


def estimate_sparse(geom: WorkloadGeometry, k: int, dedup: bool = False) -> float:
    if dedup:
        e = expected_union(geom.context, k, geom.group_size)
        return 2 * geom.batch * geom.num_kv_heads * e * geom.head_dim * geom.element_width
    return 2 * geom.batch * geom.num_q_heads * k * geom.head_dim * geom.element_width


def sparse_bytes_for_rows(geom: WorkloadGeometry, rows: int) -> int:
    """Bytes for an arbitrary total of gathered rows (non-uniform budgets)."""
    return 2 * rows * geom.head_dim * geom.element_width


def indexer_deployable(spec: SelectorSpec | None) -> bool:
    return spec is None or spec.kind == "double_sparsity"


def estimate_indexer(geom: WorkloadGeometry, spec: SelectorSpec | None) -> int:
    """Per-step index-selection bytes.

    The channel sketch scans ``C`` scalars per token per kv head.  Score-based
    selectors (oracle, retention heavy part, stochastic top) are charged the
    full score pass; they are measurement instruments, not deployable
    indexers.
    """
    if spec is None:
        return 0
    if spec.kind == "double_sparsity":
        return geom.batch * geom.num_kv_heads * geom.context * spec.num_channels * spec.sketch_bytes
    return 2 * geom.batch * geom.num_kv_heads * geom.context * geom.head_dim * geom.element_width


def estimate_fixed_state(geom: WorkloadGeometry) -> int:
    """Recurrent-state read: ``D x D`` per kv head, independent of context."""
    return geom.batch * geom.num_kv_heads * geom.head_dim * geom.head_dim * geom.element_width


@dataclass(frozen=True)
class CalibrationRow:
    batch: int
    measured_ms: float
    fitted_ms: float
    overhead_ms: float


@dataclass(frozen=True)
class Calibration:
    """Effective bandwidth (bytes per ms) and fixed per-step overhead (ms)."""

    bytes_per_ms: float
    overhead_ms: float
    rows: tuple[CalibrationRow, ...] = field(default=())

    def time_ms(self, nbytes: float) -> float:
        return nbytes / self.bytes_per_ms + self.overhead_ms

    @property
    def bandwidth_gbps(self) -> float:
        return self.bytes_per_ms * 1e3 / 1e9


def fit_calibration(dense_ms: Mapping[int, float] = REFERENCE_DENSE_MS,
                    geometry: WorkloadGeometry = REFERENCE_GEOMETRY) -> Calibration:
    """Least-squares fit of ``t(B) = dense_bytes(B) / bw + overhead`` with both scalars >= 0."""
    batches = sorted(dense_ms)
    times = [dense_ms[b] for b in batches]
    if len(batches) < 2:
        raise ValueError("need at least two batch sizes to calibrate")
    if any(t2 <= t1 for t1, t2 in zip(times, times[1:])):
        raise ValueError("dense latencies must strictly increase with batch size")
    nbytes = np.array([estimate_dense(geometry.with_batch(b)) for b in batches], dtype=np.float64)
    # column scaling keeps nnls well conditioned
    scale = nbytes.max()
    A = np.column_stack([nbytes / scale, np.ones(len(batches))])
    (inv_bw_scaled, overhead), _ = nnls(A, np.asarray(times, dtype=np.float64))
    if inv_bw_scaled <= 0:
        raise ValueError("calibration produced a non-positive slope")
    bytes_per_ms = float(scale / inv_bw_scaled)
    overhead = float(overhead)
    rows = tuple(
        CalibrationRow(b, t, float(nb / bytes_per_ms + overhead), overhead)
        for b, t, nb in zip(batches, times, nbytes)
    )
    return Calibration(bytes_per_ms, overhead, rows)


@dataclass(frozen=True)
class TrafficEstimate:
    dense_bytes: float
    sparse_bytes: float
    indexer_bytes: float
    fixed_state_bytes: float
    predicted_speedup: float
    overhead_ms: float
    indexer_deployable: bool = True


def predict_speedup(geom: WorkloadGeometry, k: int, spec: SelectorSpec | None,
                    calibration: Calibration | None, dedup: bool = False) -> float:
    """Calibrated dense time over sparse (+ indexer) time."""
    if calibration is None:
        raise ValueError("predict_speedup needs a fitted calibration")
    dense_t = calibration.time_ms(estimate_dense(geom))
    sparse_t = calibration.time_ms(estimate_sparse(geom, k, dedup) + estimate_indexer(geom, spec))
    return float(dense_t / sparse_t)


def estimate(geom: WorkloadGeometry, k: int, spec: SelectorSpec | None,
             calibration: Calibration, dedup: bool = False) -> TrafficEstimate:
    return TrafficEstimate(
        dense_bytes=estimate_dense(geom),
        sparse_bytes=estimate_sparse(geom, k, dedup),
        indexer_bytes=estimate_indexer(geom, spec),
        fixed_state_bytes=estimate_fixed_state(geom),
        predicted_speedup=predict_speedup(geom, k, spec, calibration, dedup),
        overhead_ms=calibration.overhead_ms,
        indexer_deployable=indexer_deployable(spec),
    )


def speedup_at_sparsity(geom: WorkloadGeometry, s: float, spec: SelectorSpec | None,
                        calibration: Calibration, dedup: bool = False) -> float:
    return predict_speedup(geom, budget_from_sparsity(s, geom.context), spec, calibration, dedup)


def break_even_sparsity(geom: WorkloadGeometry, spec: SelectorSpec | None,
                        calibration: Calibration | None, lo: float = 1.0, hi: float = 1000.0,
                        dedup: bool = False, tol: float = 1e-9) -> float:
    """Smallest S in ``[lo, hi]`` with predicted speedup >= 1; ``inf`` if none."""
    if calibration is None:
        raise ValueError("break_even_sparsity needs a fitted calibration")

    def ok(s):
        return speedup_at_sparsity(geom, s, spec, calibration, dedup) >= 1.0

    if ok(lo):
        return lo
    if not ok(hi):
        return math.inf
    while hi - lo > tol * hi:
        mid = 0.5 * (lo + hi)
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return hi


def model_sweep(geometry: WorkloadGeometry, batch_sizes: Iterable[int], sparsity_levels: Iterable[float],
                spec: SelectorSpec | None, calibration: Calibration, dedup: bool = False) -> list[dict]:
    """Rows ``(B, S, regime, dense_ms_calibrated, predicted_speedup, measured_speedup_optional)``."""
    regime = "backend" if spec is None else f"indexer:{spec.kind}"
    if dedup:
        regime += "+dedup"
    reference = _reference_cells(geometry, spec)
    rows = []
    for b in batch_sizes:
        g = geometry.with_batch(b)
        dense_ms = calibration.time_ms(estimate_dense(g))
        for s in sparsity_levels:
            rows.append({
                "B": b,
                "S": s,
                "regime": regime,
                "dense_ms_calibrated": dense_ms,
                "predicted_speedup": speedup_at_sparsity(g, s, spec, calibration, dedup),
                "measured_speedup_optional": reference.get(b, {}).get(s),
            })
    return rows


def _reference_cells(geometry: WorkloadGeometry, spec: SelectorSpec | None) -> dict:
    same = (geometry.context == REFERENCE_GEOMETRY.context and geometry.head_dim == 128
            and geometry.element_width == 2 and geometry.num_q_heads == 32)
    if not same:
        return {}
    if spec is None and geometry.num_kv_heads == 8:
        return REFERENCE_BACKEND_SPEEDUP
    if spec is not None and spec.kind == "double_sparsity":
        if geometry.num_kv_heads == 8:
            return REFERENCE_INDEXED_SPEEDUP["gqa"]
        if geometry.num_kv_heads == 32:
            return REFERENCE_INDEXED_SPEEDUP["mha"]
    return {}
