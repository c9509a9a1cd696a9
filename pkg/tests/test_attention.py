import numpy as np
import pytest

from hyfusion import tensor as T
from hyfusion.attention import (ISTL, TransformerPath, WindowAttention, relative_position_index,
                                shift_mask, shift_region_labels, sw_msa, w_msa)
from hyfusion.gradcheck import grad_check
from hyfusion.tensor import Tensor, backward


def make_attention(dim=8, heads=2, window=4, seed=0, random_bias=True):
    rng = np.random.default_rng(seed)
    p = WindowAttention(dim, heads, window, rng)
    if random_bias:
        p.bias_table.data[...] = rng.standard_normal(p.bias_table.shape)
    p.qkv.bias.data[...] = rng.standard_normal(p.qkv.bias.shape) * 0.1
    p.proj.bias.data[...] = rng.standard_normal(p.proj.bias.shape) * 0.1
    return p


def region_oracle(x, p, shift=0, masked=True):
    """Dense attention over explicit token groups, evaluated pixel by pixel in original coordinates."""
    c, h, w = x.shape
    win, heads = p.window, p.heads
    d = c // heads
    wq, bq = p.qkv.weight.data, p.qkv.bias.data
    wp, bp = p.proj.weight.data, p.proj.bias.data
    table = p.bias_table.data

    def label(i, n):
        if not (shift and masked):
            return 0
        return 0 if i < n - win else (1 if i < n - shift else 2)

    groups = {}
    for pi in range(h):
        for pj in range(w):
            si, sj = (pi - shift) % h, (pj - shift) % w
            key = (si // win, sj // win, label(si, h), label(sj, w))
            groups.setdefault(key, []).append((pi, pj, si % win, sj % win))
    out = np.zeros_like(x)
    for members in groups.values():
        toks = np.array([x[:, a, b] for a, b, _, _ in members])
        qkv = toks @ wq.T + bq
        q, k, v = qkv[:, :c], qkv[:, c:2 * c], qkv[:, 2 * c:]
        res = np.zeros((len(members), c))
        for hd in range(heads):
            sl = slice(hd * d, (hd + 1) * d)
            s = (q[:, sl] / np.sqrt(d)) @ k[:, sl].T
            for a, (_, _, ia, ja) in enumerate(members):
                for b, (_, _, ib, jb) in enumerate(members):
                    s[a, b] += table[(ia - ib + win - 1) * (2 * win - 1) + (ja - jb + win - 1), hd]
            e = np.exp(s - s.max(axis=1, keepdims=True))
            res[:, sl] = (e / e.sum(axis=1, keepdims=True)) @ v[:, sl]
        res = res @ wp.T + bp
        for a, (pi, pj, _, _) in enumerate(members):
            out[:, pi, pj] = res[a]
    return out


class TestIndexAndMask:
    def test_relative_index_range(self):
        idx = relative_position_index(4)
        assert idx.shape == (16, 16)
        assert idx.max() < 49 and idx.min() >= 0
        assert np.all(np.diag(idx) == 24)

    def test_region_labels(self):
        lab = shift_region_labels(8, 8, 4, 2)
        assert set(np.unique(lab)) == set(range(9))
        assert lab[0, 0] == 0 and lab[7, 7] == 8 and lab[4, 5] == 4

    def test_mask_blocks_cross_region_pairs(self):
        m = shift_mask(8, 8, 4, 2)
        assert m.shape == (4, 16, 16)
        assert np.all(m[0] == 0)
        assert np.all(m[3][np.eye(16, dtype=bool)] == 0)
        assert np.any(m[3] < 0)


class TestWMsa:
    def test_single_window_dense_oracle(self):
        p = make_attention()
        x = np.random.default_rng(1).standard_normal((8, 4, 4))
        got = w_msa(Tensor(x[None]), p).data[0]
        assert np.max(np.abs(got - region_oracle(x, p))) < 1e-10

    @pytest.mark.parametrize("size", [8, 12])
    def test_multi_window_oracle(self, size):
        p = make_attention(seed=size)
        x = np.random.default_rng(size).standard_normal((8, size, size))
        got = w_msa(Tensor(x[None]), p).data[0]
        assert np.max(np.abs(got - region_oracle(x, p))) < 1e-10

    def test_identical_windows(self):
        p = make_attention()
        tile = np.random.default_rng(2).standard_normal((8, 4, 4))
        x = np.concatenate([tile, tile], axis=2)
        y = w_msa(Tensor(x[None]), p).data[0]
        np.testing.assert_array_equal(y[:, :, :4], y[:, :, 4:])

    def test_uniform_attention_when_query_key_zero(self):
        p = make_attention(random_bias=False)
        c = 8
        p.qkv.weight.data[:2 * c] = 0.0
        p.qkv.bias.data[:2 * c] = 0.0
        x = np.random.default_rng(3).standard_normal((1, 8, 8, 8))
        t = T.window_partition(Tensor(x), 4)
        _, weights = p.attend(t, return_weights=True)
        np.testing.assert_allclose(weights.data, 1 / 16, atol=1e-15)
        y = w_msa(Tensor(x), p).data[0]
        v = np.einsum("oc,chw->ohw", p.qkv.weight.data[2 * c:], x[0]) + p.qkv.bias.data[2 * c:, None, None]
        mean_v = v[:, :4, :4].mean(axis=(1, 2))
        want = p.proj.weight.data @ mean_v + p.proj.bias.data
        np.testing.assert_allclose(y[:, 1, 2], want, atol=1e-12)

    def test_translation_by_window(self):
        p = make_attention()
        x = np.random.default_rng(4).standard_normal((1, 8, 8, 12))
        a = w_msa(T.cyclic_shift(Tensor(x), 4, 8), p).data
        b = T.cyclic_shift(w_msa(Tensor(x), p), 4, 8).data
        assert np.max(np.abs(a - b)) < 1e-12

    def test_divisibility(self):
        with pytest.raises(ValueError):
            w_msa(Tensor(np.zeros((1, 8, 6, 8))), make_attention())

    def test_heads_must_divide(self):
        with pytest.raises(ValueError):
            WindowAttention(6, 4, 4, np.random.default_rng(0))


class TestSwMsa:
    def test_zero_shift_equals_w_msa(self):
        p = make_attention()
        x = Tensor(np.random.default_rng(5).standard_normal((2, 8, 8, 8)))
        assert np.max(np.abs(sw_msa(x, p, 0, masked=False).data - w_msa(x, p).data)) < 1e-12

    @pytest.mark.parametrize("size,shift", [(8, 2), (12, 2), (8, 1), (12, 3)])
    def test_region_oracle(self, size, shift):
        p = make_attention(seed=shift)
        x = np.random.default_rng(size + shift).standard_normal((8, size, size))
        got = sw_msa(Tensor(x[None]), p, shift).data[0]
        assert np.max(np.abs(got - region_oracle(x, p, shift))) < 1e-10

    def test_masked_weights(self):
        p = make_attention()
        x = Tensor(np.random.default_rng(6).standard_normal((1, 8, 8, 8)))
        mask = shift_mask(8, 8, 4, 2)
        t = T.window_partition(T.cyclic_shift(x, -2, -2), 4)
        _, weights = p.attend(t, mask, 1, return_weights=True)
        w = weights.data
        np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-12)
        blocked = np.broadcast_to((mask < 0)[:, None], w.shape)
        assert w[blocked].max() < 1e-12

    def test_shift_range(self):
        with pytest.raises(ValueError):
            sw_msa(Tensor(np.zeros((1, 8, 8, 8))), make_attention(), 4)


class TestIstl:
    def layer(self, seed=0):
        return ISTL(8, 2, 4, 2, 2.0, np.random.default_rng(seed))

    def test_beta_degenerate(self):
        m = self.layer()
        x = Tensor(np.random.default_rng(7).standard_normal((1, 8, 8, 8)))
        m.beta2.data[...] = 0.0
        np.testing.assert_array_equal(m(x).data, (m.path_w(x) * 1.0).data)
        m.beta1.data[...] = 0.0
        np.testing.assert_array_equal(m(x).data, 0.0)

    def test_beta_gradient(self):
        m = self.layer()
        x = Tensor(np.random.default_rng(8).standard_normal((1, 8, 8, 8)))
        g = np.random.default_rng(9).standard_normal((1, 8, 8, 8))
        backward((m(x) * Tensor(g)).sum())
        assert m.beta1.grad == pytest.approx(float(np.sum(m.path_w(x).data * g)), rel=1e-12)
        rep = grad_check(lambda: (m(x) * Tensor(g)).sum(), {"beta1": m.beta1, "beta2": m.beta2}, tol=1e-6)
        assert rep.passed, rep.summary()

    def test_full_gradient_check(self):
        m = self.layer(1)
        x = Tensor(np.random.default_rng(10).standard_normal((1, 8, 6, 6)), requires_grad=True)
        for _, p in m.named_parameters():
            p.data[...] += np.random.default_rng(11).standard_normal(p.shape) * 0.1
        g = Tensor(np.random.default_rng(12).standard_normal((1, 8, 6, 6)))
        params = {"x": x, **dict(m.named_parameters())}
        rep = grad_check(lambda: (m(x) * g).sum(), params, tol=1e-5)
        assert rep.passed, rep.summary()

    def test_path_matches_manual_block(self):
        rng = np.random.default_rng(13)
        path = TransformerPath(8, 2, 4, 0, 2.0, rng)
        x = Tensor(rng.standard_normal((1, 8, 8, 8)))
        t = T.window_partition(x, 4)
        t = t + path.attn.attend(path.norm1(t))
        t = t + path.fc2(T.leaky_relu(path.fc1(path.norm2(t)), 0.2))
        want = T.window_merge(t, 4, 1, 8, 8).data
        np.testing.assert_allclose(path(x).data, want, atol=1e-14)

    def test_reflect_padding_crop(self):
        m = self.layer()
        y = m(Tensor(np.random.default_rng(14).standard_normal((1, 8, 5, 7))))
        assert y.shape == (1, 8, 5, 7)

    def test_window_only_variant(self):
        m = ISTL(8, 2, 4, 2, 2.0, np.random.default_rng(0), use_shifted=False)
        assert not hasattr(m, "path_sw")
        assert m(Tensor(np.zeros((1, 8, 4, 4)))).shape == (1, 8, 4, 4)
