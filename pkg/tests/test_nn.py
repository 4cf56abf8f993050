import math

import pytest
import torch

from hitdvae.nn import (
    DecoderLayer,
    EncoderLayer,
    LayerConfig,
    LayerNorm,
    MultiHeadAttention,
    build_causal_mask,
    grad_check,
    module_grad_check,
    positional_encoding,
    scaled_dot_attention,
    shift_right,
)

D = torch.float64
TINY = LayerConfig(d_model=8, n_heads=1, d_ff=16)


def randn(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=D)


def seeded(module_cls, *args, seed=0):
    torch.manual_seed(seed)
    return module_cls(*args).to(D)


class TestPositionalEncoding:
    def test_row_zero(self):
        pe = positional_encoding(4, 6)
        assert pe[0].tolist() == [0.0, 1.0, 0.0, 1.0, 0.0, 1.0]

    def test_first_sine(self):
        assert positional_encoding(3, 4)[1, 0].item() == pytest.approx(math.sin(1.0), abs=1e-15)
        assert math.sin(1.0) == pytest.approx(0.8415, abs=1e-4)

    def test_bounded(self):
        pe = positional_encoding(500, 32)
        assert pe.abs().max() <= 1.0

    def test_odd_width_rejected(self):
        with pytest.raises(ValueError):
            positional_encoding(3, 5)


class TestMasks:
    def test_lower_triangular(self):
        m = build_causal_mask(3)
        assert m.tolist() == [[True, False, False], [True, True, False], [True, True, True]]

    def test_single(self):
        assert build_causal_mask(1).tolist() == [[True]]

    def test_exclusive_refused(self):
        with pytest.raises(ValueError, match="shift"):
            build_causal_mask(4, inclusive=False)

    def test_shift_plus_inclusive_is_strictly_causal(self):
        T, d = 6, 4
        q = randn(T, d, seed=1)
        kv = randn(T, d, seed=2)
        mask = build_causal_mask(T)
        base = scaled_dot_attention(q, shift_right(kv), shift_right(kv), mask)
        for t0 in range(T):
            pert = kv.clone()
            pert[t0] += 3.0
            out = scaled_dot_attention(q, shift_right(pert), shift_right(pert), mask)
            assert torch.equal(out[: t0 + 1], base[: t0 + 1])
            if t0 < T - 1:
                assert not torch.equal(out[t0 + 1], base[t0 + 1])


class TestAttention:
    def test_diagonal_mask_copies_values(self):
        T, d = 5, 3
        mask = torch.eye(T, dtype=torch.bool)
        v = randn(T, d, seed=3)
        out = scaled_dot_attention(randn(T, d, seed=4), randn(T, d, seed=5), v, mask)
        assert torch.equal(out, v)

    def test_uniform_scores_give_mean(self):
        T, d = 4, 3
        v = randn(T, d, seed=6)
        out = scaled_dot_attention(torch.zeros(T, d, dtype=D), torch.zeros(T, d, dtype=D), v)
        torch.testing.assert_close(out, v.mean(0).expand(T, d), rtol=0, atol=1e-15)

    def test_empty_row_rejected(self):
        mask = torch.ones(3, 3, dtype=torch.bool)
        mask[1] = False
        with pytest.raises(ValueError, match="no allowed"):
            scaled_dot_attention(randn(3, 2), randn(3, 2), randn(3, 2), mask)

    def test_gradients(self):
        T, d = 4, 3
        mask = build_causal_mask(T)
        w = randn(T, d, seed=7)

        def f(q, k, v):
            return (scaled_dot_attention(q, k, v, mask) * w).sum()

        assert grad_check(f, [randn(T, d, seed=8), randn(T, d, seed=9), randn(T, d, seed=10)]) < 1e-4


class TestMultiHead:
    def test_single_head_identity_projections(self):
        d, T = 6, 5
        mha = seeded(MultiHeadAttention, d, 1)
        with torch.no_grad():
            for lin in (mha.w_q, mha.w_k, mha.w_v, mha.w_o):
                lin.weight.copy_(torch.eye(d, dtype=D))
                if lin.bias is not None:
                    lin.bias.zero_()
        x, y = randn(T, d, seed=11), randn(T, d, seed=12)
        mask = build_causal_mask(T)
        assert torch.equal(mha(x, y, mask), scaled_dot_attention(x, y, y, mask))

    def test_single_head_equals_projected_attention(self):
        d, T = 6, 5
        mha = seeded(MultiHeadAttention, d, 1)
        x, y = randn(2, T, d, seed=13), randn(2, T, d, seed=14)
        ref = mha.w_o(scaled_dot_attention(mha.w_q(x), mha.w_k(y), mha.w_v(y)))
        torch.testing.assert_close(mha(x, y), ref, rtol=0, atol=1e-14)

    @pytest.mark.parametrize("heads", [1, 2, 4])
    def test_shape(self, heads):
        mha = seeded(MultiHeadAttention, 8, heads)
        assert mha(randn(3, 7, 8), randn(3, 7, 8)).shape == (3, 7, 8)

    def test_shape_mismatch(self):
        mha = seeded(MultiHeadAttention, 8, 2)
        with pytest.raises(ValueError):
            mha(randn(4, 6), randn(4, 8))

    def test_indivisible(self):
        with pytest.raises(ValueError):
            MultiHeadAttention(6, 4)

    @pytest.mark.parametrize("heads", [1, 2])
    def test_causality(self, heads):
        T = 7
        mha = seeded(MultiHeadAttention, 8, heads)
        x, kv = randn(T, 8, seed=15), randn(T, 8, seed=16)
        mask = build_causal_mask(T)
        base = mha(x, kv, mask)
        for t0 in range(T):
            pert = kv.clone()
            pert[t0] -= 2.0
            out = mha(x, pert, mask)
            assert torch.equal(out[:t0], base[:t0])
            assert not torch.equal(out[t0:], base[t0:])

    def test_gradients_two_heads(self):
        mha = seeded(MultiHeadAttention, 4, 2)
        x, kv = randn(3, 4, seed=17), randn(3, 4, seed=18)
        mask = build_causal_mask(3)
        assert module_grad_check(lambda: (mha(x, kv, mask) ** 2).sum(), mha) < 1e-4
        assert grad_check(lambda a, b: mha(a, b, mask).sin().sum(), [x, kv]) < 1e-4


class TestLayerNorm:
    def test_standardizes_rows(self):
        x = 10 * randn(20, 16, seed=19) + 3
        y = LayerNorm.normalize(x)
        torch.testing.assert_close(y.mean(-1), torch.zeros(20, dtype=D), rtol=0, atol=1e-6)
        torch.testing.assert_close(y.var(-1, unbiased=False), torch.ones(20, dtype=D), rtol=0, atol=1e-6)

    def test_gradients(self):
        ln = seeded(LayerNorm, 5)
        with torch.no_grad():
            ln.gain.copy_(randn(5, seed=20))
            ln.bias.copy_(randn(5, seed=21))
        w = randn(3, 5, seed=22)
        assert grad_check(lambda x: (ln(x) * w).sum(), [randn(3, 5, seed=23)]) < 1e-4
        x = randn(3, 5, seed=24)
        assert module_grad_check(lambda: (ln(x) * w).sum(), ln) < 1e-4


class TestEncoderLayer:
    def test_shape(self):
        layer = seeded(EncoderLayer, TINY)
        assert layer(randn(2, 5, 8)).shape == (2, 5, 8)

    def test_unmasked_is_global(self):
        T = 5
        layer = seeded(EncoderLayer, TINY)
        x = randn(T, 8, seed=25)
        base = layer(x)
        for t0 in range(T):
            pert = x.clone()
            pert[t0] += 1.0
            diff = (layer(pert) - base).abs().sum(-1)
            assert torch.all(diff > 0)

    def test_gradients(self):
        layer = seeded(EncoderLayer, TINY)
        x = randn(4, 8, seed=26)
        w = randn(4, 8, seed=27)
        assert grad_check(lambda a: (layer(a) * w).sum(), [x]) < 1e-4
        assert module_grad_check(lambda: (layer(x) * w).sum(), layer) < 1e-4


class TestDecoderLayer:
    def test_no_residual_has_no_identity_path(self, monkeypatch):
        layer = seeded(DecoderLayer, LayerConfig(8, 1, 16, residual_enabled=False))
        with torch.no_grad():
            layer.norm3.bias.copy_(randn(8, seed=28))
        for sub in (layer.self_attn, layer.cross_attn, layer.ff):
            monkeypatch.setattr(sub, "forward", lambda *a, **k: torch.zeros_like(a[0]))
        a = layer(randn(4, 8, seed=29), randn(4, 8, seed=30))
        b = layer(randn(4, 8, seed=31), randn(4, 8, seed=32))
        assert torch.equal(a, b)
        assert torch.equal(a[0], layer.norm3.bias)
        # with skips on, the same zeroed sub-blocks pass the input through
        c = layer(randn(4, 8, seed=29), randn(4, 8, seed=30), residual=True)
        d = layer(randn(4, 8, seed=31), randn(4, 8, seed=32), residual=True)
        assert not torch.equal(c, d)

    def test_cross_mask_strictly_causal_on_memory(self):
        T = 6
        layer = seeded(DecoderLayer, TINY)
        mask = build_causal_mask(T)
        x, mem = randn(T, 8, seed=33), randn(T, 8, seed=34)
        base = layer(x, shift_right(mem), mask, mask)
        for t0 in range(T):
            pert = mem.clone()
            pert[t0] *= -2.0
            out = layer(x, shift_right(pert), mask, mask)
            assert torch.equal(out[: t0 + 1], base[: t0 + 1])

    @pytest.mark.parametrize("residual", [True, False])
    def test_gradients(self, residual):
        layer = seeded(DecoderLayer, TINY)
        mask = build_causal_mask(4)
        x, mem = randn(4, 8, seed=35), randn(4, 8, seed=36)
        w = randn(4, 8, seed=37)

        def f(a, b):
            return (layer(a, b, mask, mask, residual=residual) * w).sum()

        assert grad_check(f, [x, mem]) < 1e-4
        assert module_grad_check(lambda: f(x, mem), layer) < 1e-4


class TestGradCheck:
    def test_linear_is_exact(self):
        A = randn(3, 4, seed=38)
        assert grad_check(lambda x: (A @ x).sum(), [randn(4, seed=39)]) < 1e-8

    def test_softmax_cross_entropy(self):
        target = torch.tensor([2, 0, 1])

        def f(logits):
            return torch.nn.functional.cross_entropy(logits, target)

        assert grad_check(f, [randn(3, 4, seed=40)]) < 1e-4

    def test_returns_finite(self):
        err = grad_check(lambda x: (x ** 3).sum(), [randn(5, seed=41)])
        assert math.isfinite(err)
