"""Inline property checks runnable on an arbitrary geometry (``sparsedecode verify``)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import SparseIndexSet, dense_decode, reference_decode, sparse_decode
from .bench import BenchConfig, generate_workload
from .collapse import find_collapse_pair, verify_witness
from .selectors import select_oracle_topk, top_k_indices
from .traffic import estimate_dense, estimate_sparse


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


def brute_force_topk(scores: np.ndarray, k: int) -> np.ndarray:
    """Full stable sort on descending score; equal scores keep index order."""
    order = sorted(range(len(scores)), key=lambda t: (-scores[t], t))
    return np.array(sorted(order[:k]), dtype=np.int64)


def rel_err(got: np.ndarray, ref: np.ndarray) -> float:
    return float(np.abs(got - ref).max() / max(np.abs(ref).max(), 1e-300))


def run_verify(config: BenchConfig, sparsity: float = 10.0) -> list[CheckResult]:
    geom = config.geometry(max(config.batch_sizes))
    cfg = config.attention_config()
    wl = generate_workload(geom, config.seed, mem_cap_bytes=config.mem_cap_bytes)
    cache, seqs, q = wl.cache, wl.seqs, wl.queries
    n = geom.context
    out: list[CheckResult] = []

    before = cache.bytes_read
    dense = dense_decode(cfg, cache, seqs, q)
    d_bytes = cache.bytes_read - before
    before = cache.bytes_read
    full = sparse_decode(cfg, cache, seqs, q, SparseIndexSet.full([n] * len(seqs), cfg.num_q_heads))
    err = rel_err(full.outputs, dense.outputs)
    out.append(CheckResult("full-index equivalence", err <= 1e-6, f"max relative error {err:.2e} (tol 1e-6)"))

    keys, values = cache.export_sequence(seqs[0])
    worst_norm, worst_ref = 0.0, 0.0
    for h in range(cfg.num_q_heads):
        j = h // cfg.group_size
        s = cfg.softmax_scale * (keys[:, j].astype(np.float64) @ q[0, h])
        a = np.exp(s - dense.log_normalizer[0, h])
        worst_norm = max(worst_norm, abs(a.sum() - 1.0))
        ref, _ = reference_decode(keys[:, j], values[:, j], q[0, h], cfg.softmax_scale)
        worst_ref = max(worst_ref, rel_err(dense.outputs[0, h], ref))
    out.append(CheckResult("normalization", worst_norm <= 1e-6, f"max |sum(a) - 1| = {worst_norm:.2e}"))
    out.append(CheckResult("dense vs float64 reference", worst_ref <= 1e-5,
                           f"max relative error {worst_ref:.2e} (tol 1e-5)"))

    k = max(1, -(-n // int(sparsity)))
    mismatches = 0
    for h in range(cfg.num_q_heads):
        j = h // cfg.group_size
        s = cache.score_all(seqs[0], j, q[0, h], cfg.softmax_scale)[0]
        got = select_oracle_topk(cfg, cache, seqs[0], h, q[0, h], k)
        mismatches += int(not np.array_equal(got, brute_force_topk(s, k)))
        mismatches += int(not np.array_equal(got, top_k_indices(s, k)))
    out.append(CheckResult("oracle exactness", mismatches == 0,
                           f"{mismatches} mismatches over {cfg.num_q_heads} heads at k={k}"))

    idx = SparseIndexSet([[top_k_indices(cache.score_all(b, h // cfg.group_size, q[b, h], cfg.softmax_scale)[0], k)
                           for h in range(cfg.num_q_heads)] for b in seqs])
    before = cache.bytes_read
    sparse_decode(cfg, cache, seqs, q, idx)
    s_bytes = cache.bytes_read - before
    ok = d_bytes == estimate_dense(geom) and s_bytes == estimate_sparse(geom, k)
    out.append(CheckResult("byte accounting", ok,
                           f"dense {d_bytes} vs model {estimate_dense(geom)}, "
                           f"sparse {s_bytes} vs model {estimate_sparse(geom, k)}"))

    rng = np.random.default_rng(config.seed)
    bad = 0
    for _ in range(20):
        nn = int(rng.integers(3, 129))
        d = int(rng.integers(1, nn - 1))
        V = rng.standard_normal((nn, d))
        w = find_collapse_pair(V, 0.5)
        bad += int(w is None or not verify_witness(V, w, 1e-9).passed)
    out.append(CheckResult("collapse soundness", bad == 0, f"{bad} failing witnesses out of 20"))
    return out
