import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from respagent.attention import (
    AttentionPattern,
    anchor_grid_stats,
    attention_cost,
    build_anchor_set,
    build_global_set,
    cost_probe,
    dense_mask,
    dense_reference_attention,
    linear_fit_r2,
    sparse_attention,
)
from respagent.errors import InvalidArgument, NumericInputError


def _pattern(n, w, T, s, audio_start=2):
    anchors = build_anchor_set(T, s)
    g = build_global_set(0, 1, audio_start, anchors, seq_len=n)
    return AttentionPattern(seq_len=n, window=w, global_set=g, audio_span=(audio_start, T))


def _qkv(n, d=8, seed=0, dtype=torch.float64):
    gen = torch.Generator().manual_seed(seed)
    return tuple(torch.randn(n, d, generator=gen, dtype=dtype) for _ in range(3))


def _brute_allowed(pattern, i):
    n, w = pattern.seq_len, pattern.window
    g = set(pattern.global_set)
    if i in g:
        return set(range(n))
    return {j for j in range(n) if abs(i - j) <= w} | g


class TestAnchors:
    def test_one_based_shift(self):
        # 1-based a_{1+ks} = {1, 5, 9} for T=9, s=4
        one_based = {1 + k * 4 for k in range((9 - 1) // 4 + 1)}
        assert build_anchor_set(9, 4) == tuple(sorted(a - 1 for a in one_based)) == (0, 4, 8)

    def test_single_frame(self):
        assert build_anchor_set(1, 4) == (0,)

    def test_496_frames(self):
        a = build_anchor_set(496, 4)
        assert len(a) == 124
        assert a[-1] == 492

    @pytest.mark.parametrize("T,s", [(0, 4), (4, 0)])
    def test_invalid(self, T, s):
        with pytest.raises(InvalidArgument):
            build_anchor_set(T, s)

    def test_global_set_union(self):
        assert build_global_set(0, 1, 10, (0, 4, 8)) == (0, 1, 10, 14, 18)
        assert build_global_set(0, 1, 2, ()) == (0, 1)

    def test_global_set_size_126(self):
        g = build_global_set(0, 1, 3, build_anchor_set(496, 4), seq_len=600)
        assert len(g) == 126

    def test_global_set_out_of_range(self):
        with pytest.raises(InvalidArgument):
            build_global_set(0, 1, 10, (0, 4, 8), seq_len=15)
        with pytest.raises(InvalidArgument):
            build_global_set(3, 3, 10, ())


class TestAnchorGrid:
    def test_grid_constants(self):
        g = anchor_grid_stats(10000, 496, 4)
        assert g.hop_ms == pytest.approx(20.1613, abs=1e-4)
        assert g.spacing_ms == pytest.approx(80.6452, abs=1e-4)
        assert g.worst_dev_ms == pytest.approx(40.3226, abs=1e-4)

    def test_stride_one(self):
        g = anchor_grid_stats(10000, 496, 1)
        assert g.spacing_ms == g.hop_ms

    def test_round_numbers(self):
        g = anchor_grid_stats(1000, 100, 10)
        assert (g.hop_ms, g.spacing_ms, g.worst_dev_ms) == (10.0, 100.0, 50.0)

    def test_invalid_duration(self):
        with pytest.raises(InvalidArgument):
            anchor_grid_stats(0, 10, 2)


class TestPattern:
    def test_invariants(self):
        with pytest.raises(InvalidArgument):
            AttentionPattern(seq_len=4, window=0)
        with pytest.raises(InvalidArgument):
            AttentionPattern(seq_len=4, window=1, global_set=(1, 1))
        with pytest.raises(InvalidArgument):
            AttentionPattern(seq_len=4, window=1, global_set=(4,))
        with pytest.raises(InvalidArgument):
            AttentionPattern(seq_len=4, window=1, audio_span=(2, 3))

    def test_json_roundtrip(self):
        p = _pattern(40, 3, 16, 4)
        q = AttentionPattern.from_json(p.to_json())
        assert q == p
        assert set(p.to_dict()) == {"n", "w", "global", "audio_span"}

    def test_allowed_matches_brute_force(self):
        p = _pattern(30, 2, 12, 4, audio_start=10)
        for i in range(30):
            assert set(p.allowed(i)) == _brute_allowed(p, i)

    def test_symmetric_reachability(self):
        p = _pattern(50, 3, 20, 5, audio_start=20)
        m = dense_mask(p)
        for g in p.global_set:
            assert m[g, :].all() and m[:, g].all()


class TestSparseAttention:
    def test_full_window_equals_dense(self):
        n = 8
        Q, K, V = _qkv(n)
        p = AttentionPattern(seq_len=n, window=8, global_set=(0, 3))
        out = sparse_attention(Q, K, V, p)
        full = torch.softmax(Q @ K.T / math.sqrt(8), dim=-1) @ V
        assert torch.allclose(out, full, atol=1e-12)

    def test_oracle_n64(self):
        n = 64
        Q, K, V = _qkv(n, seed=3, dtype=torch.float32)
        p = _pattern(n, 4, 32, 4, audio_start=20)
        diff = (sparse_attention(Q, K, V, p) - dense_reference_attention(Q, K, V, p)).abs().max()
        assert diff < 1e-5

    def test_uniform_scores_average_allowed_rows(self):
        n = 20
        p = _pattern(n, 2, 8, 4, audio_start=8)
        Q = torch.zeros(n, 4, dtype=torch.float64)
        K = torch.zeros(n, 4, dtype=torch.float64)
        V = torch.eye(n, dtype=torch.float64)
        out = sparse_attention(Q, K, V, p)
        for i in range(n):
            allowed = sorted(_brute_allowed(p, i))
            expected = torch.zeros(n, dtype=torch.float64)
            expected[allowed] = 1.0 / len(allowed)
            assert torch.allclose(out[i], expected, atol=1e-12)
        # rows of the attention matrix sum to one
        assert torch.allclose(out.sum(-1), torch.ones(n, dtype=torch.float64), atol=1e-6)

    def test_single_allowed_key(self):
        n = 6
        Q, K, V = _qkv(n)
        # causal row 0 and a length-1 sequence both have exactly one allowed key
        p = AttentionPattern(seq_len=n, window=1, causal=True)
        assert torch.equal(dense_reference_attention(Q, K, V, p)[0], V[0])
        assert torch.equal(sparse_attention(Q, K, V, p)[0], V[0])
        p1 = AttentionPattern(seq_len=1, window=1)
        assert torch.equal(sparse_attention(Q[:1], K[:1], V[:1], p1), V[:1])

    def test_batched_heads(self):
        n = 40
        gen = torch.Generator().manual_seed(1)
        Q, K, V = (torch.randn(2, 3, n, 5, generator=gen, dtype=torch.float64) for _ in range(3))
        p = _pattern(n, 3, 16, 4, audio_start=10)
        assert torch.allclose(sparse_attention(Q, K, V, p), dense_reference_attention(Q, K, V, p), atol=1e-12)

    def test_causal_full_window(self):
        n = 12
        Q, K, V = _qkv(n)
        p = AttentionPattern(seq_len=n, window=n, causal=True)
        mask = torch.tril(torch.ones(n, n, dtype=torch.bool))
        s = (Q @ K.T / math.sqrt(8)).masked_fill(~mask, float("-inf"))
        assert torch.allclose(sparse_attention(Q, K, V, p), torch.softmax(s, -1) @ V, atol=1e-12)
        assert torch.allclose(dense_reference_attention(Q, K, V, p), torch.softmax(s, -1) @ V, atol=1e-12)

    def test_locality(self):
        n = 48
        Q, K, V = _qkv(n, seed=5)
        p = _pattern(n, 3, 16, 4, audio_start=20)
        base = sparse_attention(Q, K, V, p)
        i = 10
        assert i not in p.global_set
        outside = [j for j in range(n) if j not in _brute_allowed(p, i)]
        K2, V2 = K.clone(), V.clone()
        K2[outside] += 7.0
        V2[outside] -= 3.0
        out = sparse_attention(Q, K2, V2, p)
        assert torch.equal(out[i], base[i])

    def test_errors(self):
        Q, K, V = _qkv(8)
        p = AttentionPattern(seq_len=9, window=2)
        with pytest.raises(InvalidArgument):
            sparse_attention(Q, K, V, p)
        p = AttentionPattern(seq_len=8, window=2)
        Qn = Q.clone()
        Qn[2, 1] = float("nan")
        with pytest.raises(NumericInputError):
            sparse_attention(Qn, K, V, p)
        with pytest.raises(NumericInputError):
            dense_reference_attention(Qn, K, V, p)

    @settings(max_examples=25, deadline=None)
    @given(
        n=st.integers(8, 200),
        w=st.integers(1, 40),
        s=st.integers(1, 9),
        seed=st.integers(0, 10_000),
    )
    def test_oracle_property(self, n, w, s, seed):
        T = max(1, n // 2)
        start = n - T
        anchors = build_anchor_set(T, s)
        g = build_global_set(0, 1, start, anchors, seq_len=n) if start >= 2 else ()
        p = AttentionPattern(seq_len=n, window=w, global_set=g, audio_span=(start, T))
        Q, K, V = _qkv(n, d=6, seed=seed, dtype=torch.float32)
        diff = (sparse_attention(Q, K, V, p) - dense_reference_attention(Q, K, V, p)).abs().max()
        assert diff < 1e-5


class TestCost:
    def _brute(self, p):
        return sum(len(_brute_allowed(p, i)) for i in range(p.seq_len))

    def test_full_window(self):
        assert attention_cost(AttentionPattern(seq_len=4, window=4)) == 16

    def test_edge_truncated(self):
        assert attention_cost(AttentionPattern(seq_len=100, window=2)) == 494

    @pytest.mark.parametrize("n,w,T,s", [(30, 2, 12, 4), (64, 4, 32, 4), (17, 20, 5, 2)])
    def test_matches_enumeration(self, n, w, T, s):
        p = _pattern(n, w, T, s)
        assert attention_cost(p) == self._brute(p) == int(dense_mask(p).sum())

    def test_doubling(self):
        a = attention_cost(AttentionPattern(seq_len=1000, window=8, global_set=tuple(range(10))))
        b = attention_cost(AttentionPattern(seq_len=2000, window=8, global_set=tuple(range(10))))
        assert 1.9 < b / a < 2.1

    def test_bounded_by_band(self):
        for n in (128, 256, 512):
            p = AttentionPattern(seq_len=n, window=4, global_set=tuple(range(6)))
            # global rows contribute n each
            assert attention_cost(p) <= n * (2 * 4 + 1 + 6) + 6 * n

    def test_probe_rows(self):
        rows = cost_probe([128, 256, 512, 1024], window=32, n_global=126)
        assert [r["n"] for r in rows] == [128, 256, 512, 1024]
        counts = [r["scored_pairs"] for r in rows]
        assert counts == sorted(counts)
        assert linear_fit_r2([r["n"] for r in rows], counts) > 0.99
