# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled gather / score / attend kernels over a paged NHD pool.

Pools are 4-d arrays ``(pages, page_size, kv_heads, head_dim)``.  Half
precision pools are passed as ``uint16`` views and widened through a
65536-entry lookup table.  All arithmetic is double precision.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, isfinite
from libc.stdlib cimport malloc, free
from libc.stdint cimport int64_t, uint16_t

cnp.import_array()

ctypedef fused store_t:
    float
    uint16_t

cdef float H2F[65536]


def _init_half_table():
    cdef Py_ssize_t i
    table = np.arange(65536, dtype=np.uint16).view(np.float16).astype(np.float32)
    cdef float[::1] tv = table
    for i in range(65536):
        H2F[i] = tv[i]


_init_half_table()


cdef inline void _load_row(store_t* src, double* dst, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i
    if store_t is float:
        for i in range(n):
            dst[i] = src[i]
    else:
        for i in range(n):
            dst[i] = H2F[src[i]]


cdef inline double _dot(const double* a, const double* b, Py_ssize_t n) noexcept nogil:
    # four fixed lanes: deterministic order regardless of how many queries share the row
    cdef double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0
    cdef Py_ssize_t i = 0
    while i + 4 <= n:
        s0 += a[i] * b[i]
        s1 += a[i + 1] * b[i + 1]
        s2 += a[i + 2] * b[i + 2]
        s3 += a[i + 3] * b[i + 3]
        i += 4
    while i < n:
        s0 += a[i] * b[i]
        i += 1
    return (s0 + s1) + (s2 + s3)


def _gather(store_t[:, :, :, ::1] k_pool, store_t[:, :, :, ::1] v_pool,
            const int64_t[::1] page_ids, Py_ssize_t page_size, Py_ssize_t kv_head,
            const int64_t[::1] idx, store_t[:, ::1] k_out, store_t[:, ::1] v_out):
    cdef Py_ssize_t n = idx.shape[0], D = k_pool.shape[3]
    cdef Py_ssize_t j, d, t, p, s
    with nogil:
        for j in range(n):
            t = idx[j]
            p = page_ids[t // page_size]
            s = t % page_size
            for d in range(D):
                k_out[j, d] = k_pool[p, s, kv_head, d]
                v_out[j, d] = v_pool[p, s, kv_head, d]


def _scores(store_t[:, :, :, ::1] k_pool, const int64_t[::1] page_ids,
            Py_ssize_t page_size, Py_ssize_t kv_head, Py_ssize_t n_tokens,
            const double[:, ::1] q, double scale, double[:, ::1] out):
    cdef Py_ssize_t g = q.shape[0], D = k_pool.shape[3]
    cdef Py_ssize_t t, a, p, s
    cdef double* row = <double*> malloc(D * sizeof(double))
    if row == NULL:
        raise MemoryError()
    try:
        with nogil:
            for t in range(n_tokens):
                p = page_ids[t // page_size]
                s = t % page_size
                _load_row(&k_pool[p, s, kv_head, 0], row, D)
                for a in range(g):
                    out[a, t] = scale * _dot(row, &q[a, 0], D)
    finally:
        free(row)


def _attend(store_t[:, :, :, ::1] k_pool, store_t[:, :, :, ::1] v_pool,
            const int64_t[::1] page_ids, Py_ssize_t page_size, Py_ssize_t kv_head,
            const int64_t[::1] idx, const double[::1] weights, bint weighted,
            const double[:, ::1] q, double scale,
            double[:, ::1] scores, double[:, ::1] out, double[::1] lse):
    cdef Py_ssize_t n = idx.shape[0], g = q.shape[0], D = k_pool.shape[3]
    cdef Py_ssize_t j, a, d, t, p, s
    cdef double m, e, denom, w
    cdef bint finite = True
    cdef double* row = <double*> malloc(D * sizeof(double))
    cdef double* mx = <double*> malloc(g * sizeof(double))
    cdef double* den = <double*> malloc(g * sizeof(double))
    if row == NULL or mx == NULL or den == NULL:
        free(row); free(mx); free(den)
        raise MemoryError()
    try:
        with nogil:
            # pass 1: key rows -> scores
            for a in range(g):
                mx[a] = -1e308
                den[a] = 0.0
                for d in range(D):
                    out[a, d] = 0.0
            for j in range(n):
                t = idx[j]
                p = page_ids[t // page_size]
                s = t % page_size
                _load_row(&k_pool[p, s, kv_head, 0], row, D)
                for a in range(g):
                    e = scale * _dot(row, &q[a, 0], D)
                    if not isfinite(e):
                        finite = False
                    scores[a, j] = e
                    if e > mx[a]:
                        mx[a] = e
            # pass 2: value rows, weighted by w_j * exp(s_j - max)
            if finite:
                for j in range(n):
                    t = idx[j]
                    p = page_ids[t // page_size]
                    s = t % page_size
                    _load_row(&v_pool[p, s, kv_head, 0], row, D)
                    w = weights[j] if weighted else 1.0
                    for a in range(g):
                        e = w * exp(scores[a, j] - mx[a])
                        den[a] += e
                        for d in range(D):
                            out[a, d] += e * row[d]
                for a in range(g):
                    denom = den[a]
                    for d in range(D):
                        out[a, d] /= denom
                    lse[a] = mx[a] + log(denom)
    finally:
        free(row); free(mx); free(den)
    if not finite:
        raise FloatingPointError("non-finite attention score")


def _pool_view(pool):
    if pool.dtype == np.float16:
        return pool.view(np.uint16)
    return pool


def gather(k_pool, v_pool, page_ids, page_size, kv_head, idx):
    n = idx.shape[0]
    D = k_pool.shape[3]
    k_out = np.empty((n, D), dtype=k_pool.dtype)
    v_out = np.empty((n, D), dtype=v_pool.dtype)
    _gather(_pool_view(k_pool), _pool_view(v_pool), page_ids, page_size, kv_head, idx,
            _pool_view(k_out), _pool_view(v_out))
    return k_out, v_out


def scores(k_pool, page_ids, page_size, kv_head, n_tokens, q, scale):
    out = np.empty((q.shape[0], n_tokens), dtype=np.float64)
    _scores(_pool_view(k_pool), page_ids, page_size, kv_head, n_tokens, q, scale, out)
    return out


def attend(k_pool, v_pool, page_ids, page_size, kv_head, idx, weights, q, scale):
    g, D = q.shape
    n = idx.shape[0]
    scratch = np.empty((g, n), dtype=np.float64)
    out = np.empty((g, D), dtype=np.float64)
    lse = np.empty(g, dtype=np.float64)
    weighted = weights is not None
    w = weights if weighted else np.empty(0, dtype=np.float64)
    _attend(_pool_view(k_pool), _pool_view(v_pool), page_ids, page_size, kv_head, idx,
            w, weighted, q, scale, scratch, out, lse)
    return out, lse
