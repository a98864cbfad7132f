import math

import numpy as np
import pytest

from woundseg.errors import ConfigError
from woundseg.gradcheck import grad_check
from woundseg.layers import LinearParams
from woundseg.tensor import Tensor, precision
from woundseg.transformer import (
    EncoderLayerParams,
    TransformerConfig,
    TransformerParams,
    encoder_layer,
    mhsa,
    patch_count,
    tokenize,
    transformer_bottleneck,
    untokenize,
)


def zero_linear(D, dout=None):
    dout = dout or D
    return LinearParams(Tensor(np.zeros((D, dout))), Tensor(np.zeros(dout)))


def ln_oracle(x, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(((x - mu) ** 2).mean(axis=-1, keepdims=True) + eps)


def small_cfg(depth=2):
    # 32px input with 16px patches: 2x2 grid, 4 tokens of 3 channels, D=8
    return TransformerConfig(depth=depth, heads=2, model_dim=8, mlp_hidden=16, patch_size=16, input_hw=32,
                             token_channels=3)


class TestPatchCount:
    def test_full_size_config(self):
        assert patch_count(256, 256, 16) == 256
        assert TransformerConfig().num_tokens == 256

    def test_single_patch(self):
        assert patch_count(16, 16, 16) == 1

    def test_scaled(self):
        assert patch_count(64, 64, 16) == (64 // 16) ** 2 == 16

    @pytest.mark.parametrize("hw,p", [(100, 16), (64, 0), (64, 7)])
    def test_not_divisible(self, hw, p):
        with pytest.raises(ConfigError):
            patch_count(hw, hw, p)

    def test_heads_must_divide_width(self):
        with pytest.raises(ConfigError):
            TransformerConfig(model_dim=30, heads=8)


class TestTokenize:
    def test_full_size_bottleneck_gives_256_tokens(self, rng):
        proj = LinearParams.init(256, 256, rng)
        tokens = tokenize(Tensor(np.zeros((1, 16, 16, 256))), proj, Tensor(np.zeros((256, 256))))
        assert tokens.shape == (1, 256, 256)

    def test_zero_input_returns_positional_table(self, rng):
        proj = LinearParams.init(4, 6, rng)
        pos = rng.standard_normal((9, 6)).astype(np.float32)
        tokens = tokenize(Tensor(np.zeros((2, 3, 3, 4))), proj, Tensor(pos))
        np.testing.assert_array_equal(tokens.data[0], pos)
        np.testing.assert_array_equal(tokens.data[1], pos)

    def test_token_index_bookkeeping(self, rng):
        p4 = rng.standard_normal((1, 16, 16, 3)).astype(np.float32)
        ident = LinearParams(Tensor(np.eye(3)), Tensor(np.zeros(3)))
        tokens = tokenize(Tensor(p4), ident, None)
        for k in (0, 1, 17, 100, 255):
            np.testing.assert_array_equal(tokens.data[0, k], p4[0, k // 16, k % 16])
        np.testing.assert_array_equal(untokenize(tokens, 16, 16).data, p4)

    def test_positional_row_mismatch(self, rng):
        with pytest.raises(ConfigError):
            tokenize(Tensor(np.zeros((1, 4, 4, 2))), LinearParams.init(2, 2, rng), Tensor(np.zeros((8, 2))))


class TestAttention:
    def test_single_token(self, rng):
        p = EncoderLayerParams.init(4, 8, rng)
        x = Tensor(rng.standard_normal((1, 1, 4)))
        out, w = mhsa(x, 2, p, return_weights=True)
        np.testing.assert_allclose(w.data, 1.0)
        v = x.data @ p.wv.weight.data + p.wv.bias.data
        np.testing.assert_allclose(out.data, v @ p.wo.weight.data + p.wo.bias.data, rtol=1e-5)

    def test_identical_tokens(self, rng):
        p = EncoderLayerParams.init(8, 8, rng)
        x = Tensor(np.tile(rng.standard_normal(8), (1, 5, 1)))
        out = mhsa(x, 4, p).data
        np.testing.assert_allclose(out, np.broadcast_to(out[:, :1], out.shape), rtol=1e-6)

    def test_two_token_hand_case(self, rng):
        D = 2
        x = rng.standard_normal((2, D))
        wq, wk, wv, wo = (rng.standard_normal((D, D)) for _ in range(4))
        q, k, v = x @ wq, x @ wk, x @ wv
        expected = np.zeros((2, D))
        for i in range(2):
            s = [float(q[i] @ k[j]) / math.sqrt(D) for j in range(2)]
            e = [math.exp(t - max(s)) for t in s]
            a = [t / sum(e) for t in e]
            expected[i] = (a[0] * v[0] + a[1] * v[1]) @ wo
        with precision(np.float64):
            z = np.zeros(D)
            p = EncoderLayerParams.init(D, 4, rng)
            p.wq, p.wk, p.wv, p.wo = (LinearParams(Tensor(w), Tensor(z)) for w in (wq, wk, wv, wo))
            out = mhsa(Tensor(x[None]), 1, p).data[0]
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_attention_rows_sum_to_one(self, rng):
        p = EncoderLayerParams.init(16, 8, rng)
        _, w = mhsa(Tensor(rng.standard_normal((2, 7, 16)) * 3), 4, p, return_weights=True)
        assert w.shape == (2, 4, 7, 7)
        np.testing.assert_allclose(w.data.sum(axis=-1), 1.0, atol=1e-6)

    def test_heads_divisibility(self, rng):
        with pytest.raises(ConfigError):
            mhsa(Tensor(np.zeros((1, 2, 6))), 4, EncoderLayerParams.init(6, 4, rng))

    def test_permutation_equivariance_without_positions(self, rng):
        with precision(np.float64):
            layer = EncoderLayerParams.init(8, 16, rng)
            proj = LinearParams.init(3, 8, rng)
            p4 = rng.standard_normal((1, 9, 3))
            perm = rng.permutation(9)
            tok = tokenize(Tensor(p4.reshape(1, 3, 3, 3)), proj, None)
            tok_p = tokenize(Tensor(p4[:, perm].reshape(1, 3, 3, 3)), proj, None)
            out, out_p = mhsa(tok, 2, layer).data, mhsa(tok_p, 2, layer).data
        np.testing.assert_allclose(out_p, out[:, perm], atol=1e-12)

    def test_positions_break_equivariance(self, rng):
        with precision(np.float64):
            layer = EncoderLayerParams.init(8, 16, rng)
            proj = LinearParams.init(3, 8, rng)
            pos = Tensor(rng.normal(0, 0.5, (9, 8)))
            p4 = rng.standard_normal((1, 9, 3))
            perm = np.roll(np.arange(9), 1)
            out = mhsa(tokenize(Tensor(p4.reshape(1, 3, 3, 3)), proj, pos), 2, layer).data
            out_p = mhsa(tokenize(Tensor(p4[:, perm].reshape(1, 3, 3, 3)), proj, pos), 2, layer).data
        assert np.abs(out_p - out[:, perm]).max() > 1e-3


class TestEncoderLayer:
    def test_shape(self, rng):
        x = Tensor(rng.standard_normal((2, 5, 8)))
        assert encoder_layer(x, EncoderLayerParams.init(8, 32, rng), 4).shape == (2, 5, 8)

    def test_zero_weights_give_double_layernorm(self, rng):
        D = 4
        with precision(np.float64):
            p = EncoderLayerParams.init(D, 8, rng)
            p.wq, p.wk, p.wv, p.wo = (zero_linear(D) for _ in range(4))
            p.mlp1, p.mlp2 = zero_linear(D, 8), zero_linear(8, D)
            x = np.array([[[0.5, -1.0, 2.0, 3.5]]])
            out = encoder_layer(Tensor(x), p, 2).data
        np.testing.assert_allclose(out, ln_oracle(ln_oracle(x)), atol=1e-12)

    def test_gradient_check(self, f64, rng):
        p = EncoderLayerParams.init(8, 16, rng)
        x = Tensor(rng.standard_normal((1, 4, 8)), requires_grad=True)
        w = Tensor(rng.standard_normal((1, 4, 8)))

        def f(a, wq, w1):
            p.wq.weight, p.mlp1.weight = wq, w1
            return (encoder_layer(a, p, 2) * w).sum()

        report = grad_check(f, [x, p.wq.weight, p.mlp1.weight])
        assert report.passed, report.failures[:3]


class TestBottleneck:
    def test_output_matches_input_shape(self, rng):
        cfg = small_cfg()
        params = TransformerParams.init(cfg, rng)
        out = transformer_bottleneck(Tensor(rng.standard_normal((2, 2, 2, 3))), params, cfg)
        assert out.shape == (2, 2, 2, 3)

    def test_depth_zero_is_projection_then_back_projection(self, rng):
        cfg = small_cfg(depth=0)
        with precision(np.float64):
            params = TransformerParams.init(cfg, rng)
            p4 = rng.standard_normal((1, 2, 2, 3))
            out = transformer_bottleneck(Tensor(p4), params, cfg).data
        tok = p4.reshape(1, 4, 3) @ params.proj.weight.data + params.proj.bias.data + params.pos.data
        expected = (tok @ params.back.weight.data + params.back.bias.data).reshape(1, 2, 2, 3)
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_full_size_config_applies_six_layers(self, rng):
        cfg = TransformerConfig()
        params = TransformerParams.init(cfg, rng)
        calls = []
        out = transformer_bottleneck(Tensor(np.zeros((1, 16, 16, 256))), params, cfg,
                                     probe=lambda name, t: calls.append((name, t.shape)))
        layer_calls = [c for c in calls if c[0].startswith("transformer.layer")]
        assert len(layer_calls) == 6
        assert calls[0] == ("transformer.tokens", (1, 256, 256))
        assert out.shape == (1, 16, 16, 256)

    def test_full_size_parameter_groups(self, rng):
        params = TransformerParams.init(TransformerConfig(), rng)
        assert len(params.layers) == 6
        for layer in params.layers:
            mats = [layer.wq, layer.wk, layer.wv, layer.wo]
            assert all(m.weight.shape == (256, 256) for m in mats)
            assert layer.mlp1.weight.shape == (256, 1024) and layer.mlp2.weight.shape == (1024, 256)
        assert params.pos.shape == (256, 256)

    def test_config_mismatch(self, rng):
        cfg = small_cfg()
        with pytest.raises(ConfigError):
            transformer_bottleneck(Tensor(np.zeros((1, 3, 3, 3))), TransformerParams.init(cfg, rng), cfg)

    def test_gradient_check_reduced_size(self, f64, rng):
        cfg = small_cfg(depth=2)
        params = TransformerParams.init(cfg, rng)
        x = Tensor(rng.standard_normal((1, 2, 2, 3)), requires_grad=True)
        w = Tensor(rng.standard_normal((1, 2, 2, 3)))

        def f(a, pos, wv1):
            params.pos, params.layers[1].wv.weight = pos, wv1
            return (transformer_bottleneck(a, params, cfg) * w).sum()

        report = grad_check(f, [x, params.pos, params.layers[1].wv.weight])
        assert report.passed, report.failures[:3]
