"""Distinct full-support attention distributions with identical outputs.

For a value matrix ``V`` (N x d) with ``d < N - 1`` the stacked map
``[V | 1]^T`` has a nontrivial null space.  Any null vector ``z`` rescaled to
``||z||_inf = 1`` gives the pair ``a = u + (beta/N) z``, ``a' = u - (beta/N) z``
around the uniform distribution ``u``: both stay in the open simplex and
``V^T a == V^T a'``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

RANK_RTOL = 1e-10


@dataclass
class CollapseWitness:
    a: np.ndarray
    a_prime: np.ndarray
    z: np.ndarray
    beta: float
    residual: float

    def to_dict(self) -> dict:
        return {
            "beta": self.beta,
            "a": self.a.tolist(),
            "a_prime": self.a_prime.tolist(),
            "z": self.z.tolist(),
            "residual": self.residual,
        }


@dataclass
class WitnessReport:
    checks: dict[str, bool] = field(default_factory=dict)
    details: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def failures(self) -> list[str]:
        return [k for k, ok in self.checks.items() if not ok]


def _as_value_matrix(V) -> np.ndarray:
    V = np.asarray(V, dtype=np.float64)
    if V.ndim != 2:
        raise ValueError(f"value matrix must be 2-d, got shape {V.shape}")
    if V.shape[0] < 2:
        raise ValueError(f"need N >= 2 rows, got {V.shape[0]}")
    if not np.all(np.isfinite(V)):
        raise ValueError("value matrix has non-finite entries")
    return V


def stacked_rank(V) -> int:
    """Numerical rank of ``[V | 1]^T`` under the relative singular-value cutoff."""
    V = _as_value_matrix(V)
    M = np.vstack([V.T, np.ones((1, V.shape[0]))])
    s = np.linalg.svd(M, compute_uv=False)
    return int(np.sum(s > RANK_RTOL * s[0]))


def null_zero_sum_direction(V) -> np.ndarray | None:
    """A nonzero ``z`` with ``V^T z = 0`` and ``sum(z) = 0``, scaled to ``max|z| = 1``.

    Returns None when no such direction exists.
    """
    V = _as_value_matrix(V)
    n = V.shape[0]
    M = np.vstack([V.T, np.ones((1, n))])  # (d+1, N)
    _, s, vt = np.linalg.svd(M, full_matrices=True)
    rank = int(np.sum(s > RANK_RTOL * s[0]))
    if rank >= n:
        return None
    z = vt[rank]
    # SVD sign is arbitrary; pin the first largest-magnitude entry to +1
    return z / z[np.argmax(np.abs(z))]


def find_collapse_pair(V, beta: float) -> CollapseWitness | None:
    if not 0.0 < beta < 1.0:
        raise ValueError(f"beta must lie in the open interval (0, 1), got {beta}")
    V = _as_value_matrix(V)
    z = null_zero_sum_direction(V)
    if z is None:
        return None
    n = V.shape[0]
    a0 = np.full(n, 1.0 / n)
    a = a0 + (beta / n) * z
    a_prime = a0 - (beta / n) * z
    residual = float(np.abs(V.T @ (a - a_prime)).max())
    return CollapseWitness(a, a_prime, z, float(beta), residual)


def min_width_for_injectivity(n: int) -> int:
    """Smallest hidden width for which ``a -> V^T a`` can be injective on the simplex."""
    if n < 2:
        raise ValueError(f"need N >= 2, got {n}")
    return n - 1


def verify_witness(V, w: CollapseWitness, tol: float = 1e-9) -> WitnessReport:
    """Check every witness property separately; the residual is recomputed from ``V``."""
    V = np.asarray(V, dtype=np.float64)
    n = V.shape[0]
    a, ap, z = (np.asarray(x, dtype=np.float64) for x in (w.a, w.a_prime, w.z))
    rep = WitnessReport()
    lo, hi = (1 - w.beta) / n, (1 + w.beta) / n
    slack = 1e-15
    residual = float(np.abs(V.T @ a - V.T @ ap).max())
    null_res = float(np.abs(V.T @ z).max()) if z.size == n else np.inf
    rep.details.update(residual=residual, null_residual=null_res,
                       sum_a=float(a.sum()), sum_a_prime=float(ap.sum()))
    rep.checks["shapes"] = a.shape == ap.shape == z.shape == (n,)
    rep.checks["beta_in_open_interval"] = 0.0 < w.beta < 1.0
    rep.checks["distinct"] = bool(np.any(a != ap))
    rep.checks["sum_a"] = abs(a.sum() - 1.0) <= 1e-12
    rep.checks["sum_a_prime"] = abs(ap.sum() - 1.0) <= 1e-12
    rep.checks["support_bounds"] = bool(
        np.all(a >= lo - slack) and np.all(a <= hi + slack)
        and np.all(ap >= lo - slack) and np.all(ap <= hi + slack)
    )
    rep.checks["z_unit_inf_norm"] = abs(np.abs(z).max() - 1.0) <= 1e-12 if z.size else False
    rep.checks["z_zero_sum"] = abs(z.sum()) <= 1e-12
    rep.checks["z_in_null_space"] = null_res <= tol
    rep.checks["residual"] = residual <= tol
    rep.checks = {k: bool(v) for k, v in rep.checks.items()}
    return rep
