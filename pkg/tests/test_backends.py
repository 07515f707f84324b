"""Compiled and fallback kernels must agree on every entry point."""
import numpy as np
import pytest

from sparsedecode import kernels

BACKENDS = kernels.backends()
compiled = pytest.mark.skipif("compiled" not in BACKENDS, reason="extension not built")


def _pools(rng, dtype, pages=12, page_size=8, H=2, D=24):
    k = rng.standard_normal((pages, page_size, H, D)).astype(dtype)
    v = rng.standard_normal((pages, page_size, H, D)).astype(dtype)
    page_ids = rng.permutation(pages).astype(np.int64)
    return k, v, page_ids, page_size


def test_fallback_always_available():
    assert "python" in BACKENDS
    assert kernels.BACKEND in BACKENDS


@compiled
@pytest.mark.parametrize("dtype", [np.float16, np.float32])
class TestParity:
    def test_gather_bitwise(self, dtype):
        rng = np.random.default_rng(0)
        k, v, pid, ps = _pools(rng, dtype)
        idx = rng.choice(96, size=40, replace=False).astype(np.int64)
        a = BACKENDS["python"].gather(k, v, pid, ps, 1, idx)
        b = BACKENDS["compiled"].gather(k, v, pid, ps, 1, idx)
        for x, y in zip(a, b):
            assert x.dtype == y.dtype == dtype
            np.testing.assert_array_equal(x, y)

    def test_scores(self, dtype):
        rng = np.random.default_rng(1)
        k, _, pid, ps = _pools(rng, dtype)
        q = rng.standard_normal((3, 24))
        a = BACKENDS["python"].scores(k, pid, ps, 0, 90, q, 0.2)
        b = BACKENDS["compiled"].scores(k, pid, ps, 0, 90, q, 0.2)
        assert a.shape == b.shape == (3, 90)
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)

    @pytest.mark.parametrize("weighted", [False, True])
    def test_attend(self, dtype, weighted):
        rng = np.random.default_rng(2)
        k, v, pid, ps = _pools(rng, dtype)
        idx = np.sort(rng.choice(96, size=33, replace=False)).astype(np.int64)
        w = rng.uniform(0.5, 4.0, size=33) if weighted else None
        q = rng.standard_normal((4, 24))
        oa, la = BACKENDS["python"].attend(k, v, pid, ps, 1, idx, w, q, 0.3)
        ob, lb = BACKENDS["compiled"].attend(k, v, pid, ps, 1, idx, w, q, 0.3)
        np.testing.assert_allclose(oa, ob, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(la, lb, rtol=1e-12)

    def test_non_finite_rejected(self, dtype):
        rng = np.random.default_rng(3)
        k, v, pid, ps = _pools(rng, dtype)
        k[pid[0], 2, 0, 0] = np.inf
        q = np.ones((1, 24))
        idx = np.arange(5, dtype=np.int64)
        for impl in BACKENDS.values():
            with pytest.raises(FloatingPointError):
                impl.attend(k, v, pid, ps, 0, idx, None, q, 1.0)


@compiled
def test_half_table_covers_all_bit_patterns():
    # every finite fp16 value must round-trip through the compiled gather-and-score path
    bits = np.arange(65536, dtype=np.uint16).view(np.float16)
    finite = bits[np.isfinite(bits)]
    n = finite.size
    ps = 16
    pages = -(-n // ps)
    k = np.zeros((pages * ps, 1, 1), dtype=np.float16)
    k[:n, 0, 0] = finite
    k = k.reshape(pages, ps, 1, 1)
    pid = np.arange(pages, dtype=np.int64)
    s = BACKENDS["compiled"].scores(k, pid, ps, 0, n, np.ones((1, 1)), 1.0)[0]
    np.testing.assert_array_equal(s, finite.astype(np.float64))
