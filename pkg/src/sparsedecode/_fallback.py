"""Pure numpy implementation of the kernel contract in ``_kernels.pyx``.

Same signatures and return types; used when the compiled extension is not
built or when ``SPARSEDECODE_BACKEND=python`` is set.
"""
from __future__ import annotations

import numpy as np


def _locate(page_ids, page_size, idx):
    return page_ids[idx // page_size], idx % page_size


def gather(k_pool, v_pool, page_ids, page_size, kv_head, idx):
    p, s = _locate(page_ids, page_size, idx)
    return k_pool[p, s, kv_head], v_pool[p, s, kv_head]


def scores(k_pool, page_ids, page_size, kv_head, n_tokens, q, scale):
    idx = np.arange(n_tokens, dtype=np.int64)
    p, s = _locate(page_ids, page_size, idx)
    keys = k_pool[p, s, kv_head].astype(np.float64)
    return scale * (q @ keys.T)


def attend(k_pool, v_pool, page_ids, page_size, kv_head, idx, weights, q, scale):
    p, s = _locate(page_ids, page_size, idx)
    keys = k_pool[p, s, kv_head].astype(np.float64)
    s_ = scale * (q @ keys.T)  # (g, n)
    if not np.all(np.isfinite(s_)):
        raise FloatingPointError("non-finite attention score")
    m = s_.max(axis=1, keepdims=True)
    e = np.exp(s_ - m)
    if weights is not None:
        e = e * weights[None, :]
    den = e.sum(axis=1)
    values = v_pool[p, s, kv_head].astype(np.float64)
    out = (e @ values) / den[:, None]
    return out, m[:, 0] + np.log(den)
