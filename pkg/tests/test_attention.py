"""Interaction operators against per-query brute-force oracles plus the
reduction, duplication, permutation, and scaling identities."""

import math

import numpy as np
import pytest

from refcomp.attention import (AttentionParams, init_attention_params,
                               mixture_attention, self_attention)
from refcomp.engine import Parameter, ShapeError, Tensor, check_gradients, sum_all


def make_params(d, heads, rng, dtype=np.float64):
    def p(name):
        return Parameter(name, rng.normal(0, 1.0 / math.sqrt(d), (d, d)).astype(dtype))
    return AttentionParams(p("wq"), p("wk"), p("wv"), heads)


def attention_oracle(q_src, kv_src, w_q, w_k, w_v, heads, scale=None):
    """Per-query, per-head double loop with explicit softmax."""
    t, d = q_src.shape
    dk = d // heads
    if scale is None:
        scale = 1.0 / math.sqrt(dk)
    q = q_src @ w_q
    k = kv_src @ w_k
    v = kv_src @ w_v
    out = np.zeros((t, d))
    for h in range(heads):
        cols = slice(h * dk, (h + 1) * dk)
        for i in range(t):
            logits = np.array([np.dot(q[i, cols], k[j, cols]) * scale
                               for j in range(kv_src.shape[0])])
            logits -= logits.max()
            weights = np.exp(logits)
            weights /= weights.sum()
            for j in range(kv_src.shape[0]):
                out[i, cols] += weights[j] * v[j, cols]
    return out


class TestSelfAttention:
    def test_single_token_is_value_projection(self):
        rng = np.random.default_rng(0)
        p = make_params(6, 2, rng)
        x = rng.normal(size=(1, 6))
        out = self_attention(Tensor(x), p)
        np.testing.assert_allclose(out.data, x @ p.w_v.data, atol=1e-12)

    def test_zero_input_zero_output(self):
        rng = np.random.default_rng(1)
        p = make_params(4, 2, rng)
        out = self_attention(Tensor(np.zeros((3, 4))), p)
        np.testing.assert_array_equal(out.data, np.zeros((3, 4)))

    def test_against_double_loop(self):
        rng = np.random.default_rng(2)
        p = make_params(8, 1, rng)
        x = rng.normal(size=(4, 8))
        out = self_attention(Tensor(x), p)
        expect = attention_oracle(x, x, p.w_q.data, p.w_k.data, p.w_v.data, 1)
        assert np.abs(out.data - expect).max() < 1e-6

    def test_empty_query_rejected(self):
        rng = np.random.default_rng(3)
        p = make_params(4, 1, rng)
        with pytest.raises(ShapeError):
            self_attention(Tensor(np.zeros((0, 4))), p)


class TestMixtureAttention:
    def test_empty_reference_reduces_to_self(self):
        rng = np.random.default_rng(4)
        p = make_params(8, 2, rng)
        x = rng.normal(size=(5, 8))
        a = mixture_attention(Tensor(x), Tensor(np.zeros((0, 8))), p).data
        b = self_attention(Tensor(x), p).data
        np.testing.assert_array_equal(a, b)
        c = mixture_attention(Tensor(x), None, p).data
        np.testing.assert_array_equal(a, c)

    def test_duplication_symmetry(self):
        rng = np.random.default_rng(5)
        p = make_params(8, 2, rng)
        x = rng.normal(size=(5, 8))
        a = mixture_attention(Tensor(x), Tensor(x.copy()), p).data
        b = self_attention(Tensor(x), p).data
        assert np.abs(a - b).max() < 1e-6

    def test_worked_scalar_example(self):
        one = np.ones((1, 1))
        p = AttentionParams(Parameter("q", one), Parameter("k", one),
                            Parameter("v", one), heads=1)
        out = mixture_attention(Tensor(np.array([[1.0]])), Tensor(np.array([[3.0]])), p)
        w = np.exp([1.0, 3.0])
        w /= w.sum()
        np.testing.assert_allclose(w, [0.11920, 0.88080], atol=1e-5)
        assert abs(out.data[0, 0] - (w[0] * 1.0 + w[1] * 3.0)) < 1e-6
        assert abs(out.data[0, 0] - 2.76159) < 1e-5

    def test_width_mismatch(self):
        rng = np.random.default_rng(6)
        p = make_params(4, 1, rng)
        with pytest.raises(ShapeError):
            mixture_attention(Tensor(np.zeros((2, 4))), Tensor(np.zeros((2, 6))), p)

    def test_reference_permutation_invariance(self):
        rng = np.random.default_rng(7)
        p = make_params(8, 2, rng)
        bg = rng.normal(size=(4, 8))
        ref = rng.normal(size=(6, 8))
        perm = rng.permutation(6)
        a = mixture_attention(Tensor(bg), Tensor(ref), p).data
        b = mixture_attention(Tensor(bg), Tensor(ref[perm]), p).data
        assert np.abs(a - b).max() < 1e-6

    def test_query_permutation_equivariance(self):
        rng = np.random.default_rng(8)
        p = make_params(8, 2, rng)
        bg = rng.normal(size=(5, 8))
        ref = rng.normal(size=(3, 8))
        perm = rng.permutation(5)
        a = mixture_attention(Tensor(bg), Tensor(ref), p).data
        b = mixture_attention(Tensor(bg[perm]), Tensor(ref), p).data
        assert np.abs(a[perm] - b).max() < 1e-6

    def test_logit_scaling_matches_prescaled_oracle(self):
        rng = np.random.default_rng(9)
        p = make_params(8, 2, rng)
        bg = rng.normal(size=(4, 8))
        ref = rng.normal(size=(3, 8))
        out = mixture_attention(Tensor(bg), Tensor(ref), p).data
        kv = np.concatenate([bg, ref], axis=0)
        dk = p.d_head
        unscaled = attention_oracle(bg, kv, p.w_q.data / math.sqrt(dk),
                                    p.w_k.data, p.w_v.data, p.heads, scale=1.0)
        assert np.abs(out - unscaled).max() < 1e-6


def test_random_instances_match_brute_force():
    rng = np.random.default_rng(10)
    for _ in range(40):
        heads = int(rng.choice([1, 2, 4]))
        d = int(rng.choice([4, 8, 16]))
        t_bg = int(rng.integers(1, 9))
        t_ref = int(rng.integers(0, 9))
        p = make_params(d, heads, rng)
        bg = rng.normal(size=(t_bg, d))
        ref = rng.normal(size=(t_ref, d))
        got_self = self_attention(Tensor(bg), p).data
        want_self = attention_oracle(bg, bg, p.w_q.data, p.w_k.data, p.w_v.data, heads)
        assert np.abs(got_self - want_self).max() < 1e-6
        got_mix = mixture_attention(Tensor(bg), Tensor(ref), p).data
        kv = np.concatenate([bg, ref], axis=0) if t_ref else bg
        want_mix = attention_oracle(bg, kv, p.w_q.data, p.w_k.data, p.w_v.data, heads)
        assert np.abs(got_mix - want_mix).max() < 1e-6


def test_shared_parameter_record_mutation_is_visible_to_both_streams():
    rng = np.random.default_rng(11)
    p = make_params(4, 2, rng)
    bg = rng.normal(size=(3, 4))
    ref = rng.normal(size=(2, 4))
    before_self = self_attention(Tensor(ref), p).data.copy()
    before_mix = mixture_attention(Tensor(bg), Tensor(ref), p).data.copy()
    p.w_v.data = p.w_v.data + 0.5
    after_self = self_attention(Tensor(ref), p).data
    after_mix = mixture_attention(Tensor(bg), Tensor(ref), p).data
    assert np.abs(after_self - before_self).max() > 1e-3
    assert np.abs(after_mix - before_mix).max() > 1e-3


def test_mixture_attention_gradients():
    rng = np.random.default_rng(12)
    p = make_params(4, 2, rng)
    bg = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
    ref = Tensor(rng.normal(size=(3, 4)), requires_grad=True)

    def loss(b, r, wq, wk, wv):
        q = AttentionParams(wq, wk, wv, 2)
        return sum_all(mixture_attention(b, r, q))

    report = check_gradients(loss, [bg, ref, p.w_q, p.w_k, p.w_v])
    assert report.ok, report
