import math

import numpy as np
import pytest
from conftest import make_cache
from hypothesis import given, settings, strategies as st
from oracles import naive_attention

from sparsedecode.attention import (
    AttentionConfig,
    SparseIndexSet,
    dense_decode,
    gqa_kv_head,
    reference_decode,
    sparse_decode,
)
from sparsedecode.errors import ShapeError
from sparsedecode.kv_store import CacheConfig, PagedKvCache


def rel(a, b):
    return float(np.abs(np.asarray(a) - np.asarray(b)).max() / max(np.abs(np.asarray(b)).max(), 1e-300))


class TestGqaMapping:
    @pytest.mark.parametrize("h,G,want", [(0, 4, 0), (5, 4, 1), (31, 4, 7), (3, 1, 3)])
    def test_examples(self, h, G, want):
        assert gqa_kv_head(h, G) == want

    def test_config_rejects_uneven_groups(self):
        with pytest.raises(ValueError):
            AttentionConfig(6, 4, 8)

    def test_default_scale(self):
        assert AttentionConfig(4, 2, 64).softmax_scale == pytest.approx(1 / 8)
        assert AttentionConfig(4, 2, 64, scale=0.5).softmax_scale == 0.5


class TestDenseDecode:
    def test_singleton(self, rng):
        cache, raw = make_cache(rng, {0: 1}, 2, 8)
        cfg = AttentionConfig(4, 2, 8)
        out = dense_decode(cfg, cache, [0], rng.standard_normal((1, 4, 8)))
        for h in range(4):
            assert np.array_equal(out.outputs[0, h], raw[0][1][0, h // 2])

    def test_identical_keys_give_mean(self, rng):
        cache = PagedKvCache(CacheConfig(1, 4, 4, 4))
        K = np.tile(rng.standard_normal((1, 1, 4)), (10, 1, 1))
        V = rng.standard_normal((10, 1, 4))
        cache.append_tokens(0, K, V)
        out = dense_decode(AttentionConfig(1, 1, 4), cache, [0], rng.standard_normal((1, 1, 4)))
        np.testing.assert_allclose(out.outputs[0, 0], V.astype(np.float32).astype(np.float64)[:, 0].mean(axis=0), rtol=1e-12)

    def test_matches_naive_double_reference(self, rng):
        cache, raw = make_cache(rng, {0: 64}, 1, 8)
        cfg = AttentionConfig(1, 1, 8)
        q = rng.standard_normal((1, 1, 8))
        out = dense_decode(cfg, cache, [0], q)
        K, V = raw[0]
        want, lse = naive_attention(K[:, 0], V[:, 0], q[0, 0], cfg.softmax_scale)
        assert rel(out.outputs[0, 0], want) <= 1e-5
        assert out.log_normalizer[0, 0] == pytest.approx(lse, rel=1e-12)

    def test_empty_sequence_rejected(self):
        cache = PagedKvCache(CacheConfig(1, 4))
        cache.append_tokens(0, np.zeros((0, 1, 4)), np.zeros((0, 1, 4)))
        with pytest.raises(ValueError, match="empty"):
            dense_decode(AttentionConfig(1, 1, 4), cache, [0], np.zeros((1, 1, 4)))

    def test_geometry_mismatch(self, rng):
        cache, _ = make_cache(rng, {0: 4}, 2, 8)
        with pytest.raises(ShapeError):
            dense_decode(AttentionConfig(4, 4, 8), cache, [0], np.zeros((1, 4, 8)))
        with pytest.raises(ShapeError):
            dense_decode(AttentionConfig(4, 2, 8), cache, [0], np.zeros((2, 4, 8)))

    def test_non_finite_scores_rejected(self):
        cache = PagedKvCache(CacheConfig(1, 2, 4, 4))
        K = np.zeros((3, 1, 2))
        K[1, 0, 0] = np.inf
        cache.append_tokens(0, K, np.zeros((3, 1, 2)))
        with pytest.raises(FloatingPointError):
            dense_decode(AttentionConfig(1, 1, 2), cache, [0], np.ones((1, 1, 2)))

    def test_reads_each_kv_head_once(self, rng):
        cache, _ = make_cache(rng, {0: 30, 1: 7}, 2, 8)
        dense_decode(AttentionConfig(8, 2, 8), cache, [0, 1], rng.standard_normal((2, 8, 8)))
        assert cache.bytes_read == 2 * (30 + 7) * 2 * 8 * 4


class TestSparseDecode:
    def test_full_index_equals_dense(self, rng):
        cache, _ = make_cache(rng, {0: 100, 1: 33}, 2, 16, width=2)
        cfg = AttentionConfig(8, 2, 16)
        q = rng.standard_normal((2, 8, 16))
        d = dense_decode(cfg, cache, [0, 1], q)
        s = sparse_decode(cfg, cache, [0, 1], q, SparseIndexSet.full([100, 33], 8))
        assert rel(s.outputs, d.outputs) <= 1e-6
        np.testing.assert_allclose(s.log_normalizer, d.log_normalizer, rtol=1e-12)

    def test_singleton_index(self, rng):
        cache, raw = make_cache(rng, {0: 20}, 1, 8)
        cfg = AttentionConfig(2, 1, 8)
        out = sparse_decode(cfg, cache, [0], rng.standard_normal((1, 2, 8)), SparseIndexSet([[[7], [13]]]))
        assert np.array_equal(out.outputs[0, 0], raw[0][1][7, 0])
        assert np.array_equal(out.outputs[0, 1], raw[0][1][13, 0])

    def test_topk_half_matches_masked_reference(self, rng):
        cache, raw = make_cache(rng, {0: 256}, 1, 8)
        cfg = AttentionConfig(1, 1, 8)
        q = rng.standard_normal((1, 1, 8))
        K, V = raw[0]
        scores = K[:, 0] @ q[0, 0]
        idx = np.sort(np.argsort(-scores, kind="stable")[:128])
        out = sparse_decode(cfg, cache, [0], q, SparseIndexSet([[idx]]))
        want, _ = naive_attention(K[:, 0], V[:, 0], q[0, 0], cfg.softmax_scale, idx)
        assert rel(out.outputs[0, 0], want) <= 1e-5

    def test_weighted_matches_naive(self, rng):
        cache, raw = make_cache(rng, {0: 50}, 1, 8)
        cfg = AttentionConfig(1, 1, 8)
        q = rng.standard_normal((1, 1, 8))
        idx = np.array([1, 4, 9, 30, 49])
        w = np.array([1.0, 3.5, 0.25, 2.0, 7.0])
        out = sparse_decode(cfg, cache, [0], q, SparseIndexSet([[idx]], [[w]]))
        want, lse = naive_attention(raw[0][0][:, 0], raw[0][1][:, 0], q[0, 0], cfg.softmax_scale, idx, w)
        assert rel(out.outputs[0, 0], want) <= 1e-12
        assert out.log_normalizer[0, 0] == pytest.approx(lse, rel=1e-12)

    def test_bytes_only_for_selected_rows(self, rng):
        cache, _ = make_cache(rng, {0: 64}, 2, 8, width=2)
        cfg = AttentionConfig(4, 2, 8)
        idx = SparseIndexSet([[np.arange(k) for k in (1, 2, 3, 4)]])
        sparse_decode(cfg, cache, [0], rng.standard_normal((1, 4, 8)), idx)
        assert cache.bytes_read == 2 * (1 + 2 + 3 + 4) * 8 * 2

    def test_empty_head_rejected(self, rng):
        cache, _ = make_cache(rng, {0: 8}, 1, 4)
        with pytest.raises(ValueError, match="empty index list"):
            sparse_decode(AttentionConfig(2, 1, 4), cache, [0], np.zeros((1, 2, 4)), SparseIndexSet([[[0], []]]))

    def test_out_of_range_rejected(self, rng):
        cache, _ = make_cache(rng, {0: 8}, 1, 4)
        with pytest.raises(IndexError, match="8"):
            sparse_decode(AttentionConfig(1, 1, 4), cache, [0], np.zeros((1, 1, 4)), SparseIndexSet([[[0, 8]]]))

    def test_dominant_key_concentration(self, rng):
        cache = PagedKvCache(CacheConfig(1, 8, 16, 4))
        q = rng.standard_normal(8)
        K = rng.standard_normal((300, 1, 8)) * 0.1
        K[123, 0] = 40 * q
        cache.append_tokens(0, K, rng.standard_normal((300, 1, 8)))
        cfg = AttentionConfig(1, 1, 8)
        d = dense_decode(cfg, cache, [0], q[None, None])
        for idx in ([123], [0, 123, 299], list(range(100, 200))):
            s = sparse_decode(cfg, cache, [0], q[None, None], SparseIndexSet([[idx]]))
            assert np.abs(s.outputs - d.outputs).max() <= 1e-3


class TestSparseIndexSet:
    def test_canonicalizes_with_weights(self):
        s = SparseIndexSet([[[5, 1, 3]]], [[[0.5, 1.0, 2.0]]])
        i, w = s.head(0, 0)
        assert i.tolist() == [1, 3, 5]
        assert w.tolist() == [1.0, 2.0, 0.5]

    def test_rejects_duplicates_and_bad_weights(self):
        with pytest.raises(ValueError, match="duplicate"):
            SparseIndexSet([[[1, 1]]])
        with pytest.raises(ValueError, match="positive"):
            SparseIndexSet([[[1, 2]]], [[[1.0, 0.0]]])
        with pytest.raises(ValueError, match="positive"):
            SparseIndexSet([[[1, 2]]], [[[1.0, np.inf]]])


def _check_full_equivalence(n, D, G, seed):
    rng = np.random.default_rng(seed)
    H = 2
    cache, _ = make_cache(rng, {0: n}, H, D, width=2)
    cfg = AttentionConfig(H * G, H, D)
    q = rng.standard_normal((1, H * G, D))
    d = dense_decode(cfg, cache, [0], q)
    s = sparse_decode(cfg, cache, [0], q, SparseIndexSet.full([n], H * G))
    return rel(s.outputs, d.outputs)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 512), D=st.sampled_from([8, 64, 128]), G=st.sampled_from([1, 4]),
       seed=st.integers(0, 2**16))
def test_full_index_equivalence_property(n, D, G, seed):
    assert _check_full_equivalence(n, D, G, seed) <= 1e-6


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 200), seed=st.integers(0, 2**16))
def test_normalization_property(n, seed):
    rng = np.random.default_rng(seed)
    cache, raw = make_cache(rng, {0: n}, 1, 16)
    cfg = AttentionConfig(2, 1, 16)
    q = rng.standard_normal((1, 2, 16))
    out = dense_decode(cfg, cache, [0], q)
    for h in range(2):
        s = cfg.softmax_scale * (raw[0][0][:, 0] @ q[0, h])
        assert abs(np.exp(s - out.log_normalizer[0, h]).sum() - 1) <= 1e-6


@settings(max_examples=25, deadline=None)
@given(shift=st.sampled_from([-800.0, -3.0, 0.5, 40.0, 900.0]), seed=st.integers(0, 2**16))
def test_shift_invariance(shift, seed):
    # adding c to every key shifts every score by scale*<q, c>; inputs kept exact in fp32
    rng = np.random.default_rng(seed)
    n, D = 40, 8
    K = rng.integers(-16, 17, size=(n, 1, D)) / 8.0
    V = rng.integers(-16, 17, size=(n, 1, D)) / 8.0
    q = np.zeros((1, 1, D))
    q[0, 0, :] = rng.integers(-4, 5, size=D) / 4.0
    q[0, 0, 0] = 1.0
    c = np.zeros(D)
    c[0] = shift * math.sqrt(D)
    cfg = AttentionConfig(1, 1, D)
    outs = []
    for keys in (K, K + c):
        cache = PagedKvCache(CacheConfig(1, D, 16, 4))
        cache.append_tokens(0, keys, V)
        outs.append(dense_decode(cfg, cache, [0], q).outputs)
    assert np.abs(outs[0] - outs[1]).max() <= 1e-6


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**16))
def test_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    cache, _ = make_cache(rng, {0: 80}, 1, 8)
    cfg = AttentionConfig(1, 1, 8)
    q = rng.standard_normal((1, 1, 8))
    idx = rng.choice(80, size=20, replace=False)
    w = rng.uniform(0.1, 3.0, size=20)
    perm = rng.permutation(20)
    a = sparse_decode(cfg, cache, [0], q, SparseIndexSet([[np.sort(idx)]], [[w[np.argsort(idx)]]]))
    b = sparse_decode(cfg, cache, [0], q, SparseIndexSet([[idx[perm]]], [[w[perm]]]))
    assert np.abs(a.outputs - b.outputs).max() <= 1e-6


def test_reference_decode_agrees_with_naive(rng):
    K, V, q = rng.standard_normal((30, 4)), rng.standard_normal((30, 4)), rng.standard_normal(4)
    out, lse = reference_decode(K, V, q, 0.5, [2, 5, 7], [1.0, 2.0, 3.0])
    want, want_lse = naive_attention(K, V, q, 0.5, [2, 5, 7], [1.0, 2.0, 3.0])
    np.testing.assert_allclose(out, want, rtol=1e-12)
    assert lse == pytest.approx(want_lse)
