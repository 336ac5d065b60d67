import math
import time

import numpy as np
import pytest

from signrec import engine as ops
from signrec.conformer import (
    AttentionConfig, ConformerConfig, attention_weights, conformer_block, convolution_module,
    cross_modal_relative_attention, encode, feed_forward_module, init_attention, init_block, init_stack,
    relative_attention,
)
from signrec.engine import DiffArray, GradTape, backward, finite_difference_gradient, relative_error
from signrec.errors import AlignmentError, ConfigError, DimensionError
from signrec.params import flatten, tree_map


def naive_attention(xq, xkv, p, cfg, positions=None):
    """Per-head, per-pair loops; the reference for the vectorised path."""
    T, d = xkv.shape
    h, dz, m = cfg.num_heads, cfg.head_dim, cfg.max_relative_distance
    pos = np.arange(T) if positions is None else positions
    Wq, Wk, Wv = p.w_q.data, p.w_k.data, p.w_v.data
    R, u, v = p.relative_embedding.data, p.content_bias.data, p.position_bias.data
    heads = np.zeros((T, d))
    for hd in range(h):
        sl = slice(hd * dz, (hd + 1) * dz)
        for i in range(T):
            q = xq[i] @ Wq[:, sl]
            logits = []
            for j in range(T):
                k = xkv[j] @ Wk[:, sl]
                off = int(np.clip(pos[j] - pos[i], -m, m)) + m
                r = R[off, sl]
                logits.append((np.dot(q + u[hd], k) + np.dot(q + v[hd], r)) / math.sqrt(dz))
            logits = np.array(logits)
            w = np.exp(logits - logits.max())
            w /= w.sum()
            for j in range(T):
                heads[i, sl] += w[j] * (xkv[j] @ Wv[:, sl])
    return heads @ p.w_out.data + p.b_out.data


def randomise(tree, seed, scale=0.5):
    r = np.random.default_rng(seed)
    return tree_map(lambda n, leaf: DiffArray(r.uniform(-scale, scale, leaf.shape), requires_grad=True), tree)


ACFG = AttentionConfig(model_dim=8, num_heads=2, max_relative_distance=3)


@pytest.fixture
def attn():
    return randomise(init_attention(np.random.default_rng(0), ACFG), 1)


class TestRelativeAttention:
    def test_single_frame(self, attn):
        x = np.random.default_rng(2).normal(size=(1, 8))
        out = relative_attention(DiffArray(x), attn, ACFG).data
        expected = (x @ attn.w_v.data) @ attn.w_out.data + attn.b_out.data
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_matches_naive(self, attn):
        x = np.random.default_rng(3).normal(size=(5, 8))
        out = relative_attention(DiffArray(x), attn, ACFG).data
        np.testing.assert_allclose(out, naive_attention(x, x, attn, ACFG), atol=1e-10)

    def test_clamped_offsets_match_naive(self, attn):
        x = np.random.default_rng(4).normal(size=(9, 8))  # offsets up to 8 > M = 3
        np.testing.assert_allclose(relative_attention(DiffArray(x), attn, ACFG).data,
                                   naive_attention(x, x, attn, ACFG), atol=1e-10)

    def test_shift_invariance(self, attn):
        x = DiffArray(np.random.default_rng(5).normal(size=(6, 8)))
        a = relative_attention(x, attn, ACFG, positions=np.arange(6)).data
        b = relative_attention(x, attn, ACFG, positions=np.arange(6) + 1000).data
        assert a.tobytes() == b.tobytes()

    def test_weights_normalised(self, attn):
        x = DiffArray(np.random.default_rng(6).normal(size=(7, 8)))
        probs, _ = attention_weights(x, x, attn, ACFG)
        np.testing.assert_allclose(probs.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_empty(self, attn):
        with pytest.raises(DimensionError):
            relative_attention(DiffArray(np.zeros((0, 8))), attn, ACFG)

    def test_bad_heads(self):
        with pytest.raises(ConfigError):
            AttentionConfig(model_dim=10, num_heads=4)

    def test_full_scale_constructible(self):
        cfg = ConformerConfig.full_scale()
        assert (cfg.model_dim, cfg.num_heads, cfg.num_layers, cfg.ff_expansion, cfg.kernel_size) == (512, 8, 3, 4, 31)
        assert cfg.attention.head_dim == 64


class TestCrossModal:
    def test_identical_streams_double(self, attn):
        x = DiffArray(np.random.default_rng(7).normal(size=(5, 8)))
        np.testing.assert_allclose(cross_modal_relative_attention(x, x, attn, ACFG).data,
                                   2 * relative_attention(x, attn, ACFG).data, atol=1e-10)

    def test_single_frame(self, attn):
        xa, xb = np.random.default_rng(8).normal(size=(2, 1, 8))
        out = cross_modal_relative_attention(DiffArray(xa), DiffArray(xb), attn, ACFG).data
        expected = 2 * ((xa @ attn.w_v.data) @ attn.w_out.data + attn.b_out.data)
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_matches_two_naive_terms(self, attn):
        xa, xb = np.random.default_rng(9).normal(size=(2, 5, 8))
        out = cross_modal_relative_attention(DiffArray(xa), DiffArray(xb), attn, ACFG).data
        expected = naive_attention(xa, xa, attn, ACFG) + naive_attention(xb, xa, attn, ACFG)
        np.testing.assert_allclose(out, expected, atol=1e-10)

    def test_length_mismatch(self, attn):
        with pytest.raises(AlignmentError):
            cross_modal_relative_attention(DiffArray(np.zeros((4, 8))), DiffArray(np.zeros((3, 8))), attn, ACFG)


CFG = ConformerConfig(model_dim=16, num_heads=2, num_layers=2, kernel_size=3, max_relative_distance=4, dropout=0.0)


def grad_check_tree(fn, tree, x, tol=1e-4, max_entries=None):
    """Reverse-mode vs central differences for the input and every parameter leaf."""
    with GradTape() as tape:
        xd = DiffArray(x, requires_grad=True)
        loss = fn(xd, tree)
    g = backward(loss, tape)
    numeric_x = finite_difference_gradient(lambda v: fn(v, tree), DiffArray(x))
    assert relative_error(g[xd.node_id], numeric_x) < tol
    leaves = flatten(tree)
    for name, leaf in leaves.items():
        def f(v, name=name):
            return fn(DiffArray(x), tree_map(lambda n, l: v if n == name else l, tree))
        numeric = finite_difference_gradient(f, leaf)
        analytic = g.get(leaf.node_id, np.zeros(leaf.shape))
        err = relative_error(analytic, numeric)
        assert err < tol, f"{name}: relative error {err}"


def weighted_sum(y, seed=0):
    return ops.sum(y * DiffArray(np.random.default_rng(seed).uniform(-1, 1, y.shape)))


class TestModules:
    def test_conv_zero_input(self):
        p = init_block(np.random.default_rng(0), CFG).conv
        assert np.array_equal(convolution_module(DiffArray(np.zeros((5, 16))), p, CFG).data, np.zeros((5, 16)))

    @pytest.mark.parametrize("T", [1, 2, 7])
    def test_shapes(self, T):
        blk = init_block(np.random.default_rng(0), CFG)
        x = DiffArray(np.random.default_rng(1).normal(size=(T, 16)))
        assert convolution_module(x, blk.conv, CFG).shape == (T, 16)
        assert feed_forward_module(x, blk.ff1, CFG).shape == (T, 16)
        assert conformer_block(x, blk, CFG).shape == (T, 16)

    def test_ff_zero_weights(self):
        p = init_block(np.random.default_rng(0), CFG, identity=True).ff1
        x = DiffArray(np.random.default_rng(1).normal(size=(4, 16)))
        assert np.array_equal(feed_forward_module(x, p, CFG).data, np.zeros((4, 16)))

    def test_conv_grad(self):
        blk = randomise(init_block(np.random.default_rng(0), CFG), 3)
        x = np.random.default_rng(1).normal(size=(4, 16))
        grad_check_tree(lambda v, p: weighted_sum(convolution_module(v, p, CFG)), blk.conv, x)

    def test_ff_grad(self):
        blk = randomise(init_block(np.random.default_rng(0), CFG), 4)
        x = np.random.default_rng(1).normal(size=(4, 16))
        grad_check_tree(lambda v, p: weighted_sum(feed_forward_module(v, p, CFG)), blk.ff2, x)

    def test_batch_norm_variant(self):
        cfg = ConformerConfig(model_dim=16, num_heads=2, num_layers=1, kernel_size=3, dropout=0.0,
                              max_relative_distance=4, conv_norm="batch")
        blk = randomise(init_block(np.random.default_rng(0), cfg), 5)
        x = np.random.default_rng(1).normal(size=(4, 16))
        grad_check_tree(lambda v, p: weighted_sum(convolution_module(v, p, cfg)), blk.conv, x)


class TestBlock:
    def test_cross_equals_doubled_attention(self):
        blk = randomise(init_block(np.random.default_rng(0), CFG), 6, scale=0.3)
        x = DiffArray(np.random.default_rng(1).normal(size=(5, 16)))
        got = conformer_block(x, blk, CFG, cross_stream=x).data
        # manual composition with the attention term doubled
        h = x + 0.5 * feed_forward_module(x, blk.ff1, CFG)
        hn = ops.layer_norm(h, blk.attn_norm_gain, blk.attn_norm_bias)
        h = h + 2.0 * relative_attention(hn, blk.attn, CFG.attention)
        h = h + convolution_module(h, blk.conv, CFG)
        h = h + 0.5 * feed_forward_module(h, blk.ff2, CFG)
        expected = ops.layer_norm(h, blk.final_gain, blk.final_bias).data
        np.testing.assert_allclose(got, expected, atol=1e-10)

    def test_shape_mismatch(self):
        blk = init_block(np.random.default_rng(0), CFG)
        with pytest.raises(DimensionError):
            conformer_block(DiffArray(np.zeros((4, 16))), blk, CFG, cross_stream=DiffArray(np.zeros((3, 16))))

    def test_full_block_gradient(self):
        cfg = ConformerConfig(model_dim=16, num_heads=2, num_layers=1, kernel_size=3,
                              max_relative_distance=4, dropout=0.0)
        blk = randomise(init_block(np.random.default_rng(0), cfg), 7, scale=0.3)
        x = np.random.default_rng(1).normal(size=(4, 16))
        start = time.perf_counter()
        grad_check_tree(lambda v, p: weighted_sum(conformer_block(v, p, cfg)), blk, x)
        assert time.perf_counter() - start < 60

    def test_cross_block_gradient_wrt_both_streams(self):
        cfg = ConformerConfig(model_dim=8, num_heads=2, num_layers=1, kernel_size=3,
                              max_relative_distance=2, dropout=0.0)
        blk = randomise(init_block(np.random.default_rng(0), cfg), 8, scale=0.3)
        xb = np.random.default_rng(2).normal(size=(4, 8))
        grad_check_tree(lambda v, p: weighted_sum(conformer_block(v, p, cfg, cross_stream=DiffArray(xb))),
                        blk, np.random.default_rng(1).normal(size=(4, 8)))
        xa = np.random.default_rng(1).normal(size=(4, 8))
        grad_check_tree(lambda v, p: weighted_sum(conformer_block(DiffArray(xa), p, cfg, cross_stream=v)),
                        blk, xb)


class TestEncode:
    def test_identity_stack(self):
        stack = init_stack(0, CFG, identity=True)
        x = DiffArray(np.random.default_rng(0).normal(size=(6, 16)))
        y = encode(x, stack, CFG)
        assert y.shape == (6, 16) and np.all(np.isfinite(y.data))

    def test_default_layers(self):
        assert ConformerConfig().num_layers == 3
        assert len(init_stack(0, ConformerConfig(model_dim=16, num_heads=2))) == 3

    def test_single_layer(self):
        stack = init_stack(0, CFG)[:1]
        x = DiffArray(np.random.default_rng(0).normal(size=(5, 16)))
        assert encode(x, stack, CFG).data.tobytes() == conformer_block(x, stack[0], CFG).data.tobytes()

    def test_empty(self):
        with pytest.raises(ConfigError):
            encode(DiffArray(np.zeros((3, 16))), [], CFG)

    def test_stack_gradients(self):
        cfg = ConformerConfig(model_dim=8, num_heads=2, num_layers=2, kernel_size=3,
                              max_relative_distance=3, dropout=0.0)
        stack = randomise(init_stack(0, cfg), 9, scale=0.3)
        grad_check_tree(lambda v, p: weighted_sum(encode(v, p, cfg)), stack,
                        np.random.default_rng(1).normal(size=(5, 8)))

    def test_dropout_training_changes_output_deterministically(self):
        cfg = ConformerConfig(model_dim=16, num_heads=2, num_layers=1, kernel_size=3, dropout=0.1)
        stack = init_stack(0, cfg)
        x = DiffArray(np.random.default_rng(0).normal(size=(5, 16)))
        a = encode(x, stack, cfg, rng=np.random.default_rng(1), training=True).data
        b = encode(x, stack, cfg, rng=np.random.default_rng(1), training=True).data
        c = encode(x, stack, cfg).data
        assert a.tobytes() == b.tobytes()
        assert not np.allclose(a, c)
