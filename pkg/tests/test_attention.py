"""
Tests for ml_engine/attention.py
"""

import math
import sys
from pathlib import Path

import numpy as np
import pytest
from scipy.special import expit

sys.path.insert(0, str(Path(__file__).parent.parent))

from errors import ConfigurationError, ContractError, DimensionError
from ml_engine.attention import (
    AttentionConfig, AttentionVariant, Modulation, MultiHeadQKCV, ScoreMatrix, causal_mask,
    combine_key_category, dot_product_attention, multi_head_qkcv, position_code, qkcv_attention,
)
from ml_engine.gradcheck import check_composites
from ml_engine.numeric import Tensor, grad_of, reshape, transpose
from ml_engine.static_encoder import expand_static


def brute_force(Q, K_mod, V, divisor):
    """Per-element loop over (b, h, i, j) of softmax(q_i . k_j / divisor) v_j"""
    B, H, Lq, D = Q.shape
    Lk = K_mod.shape[2]
    out = np.zeros((B, H, Lq, V.shape[-1]))
    scores = np.zeros((B, H, Lq, Lk))
    for b in range(B):
        for h in range(H):
            for i in range(Lq):
                logits = [sum(Q[b, h, i, d] * K_mod[b, h, j, d] for d in range(D)) / divisor
                          for j in range(Lk)]
                m = max(logits)
                weights = [math.exp(v - m) for v in logits]
                total = sum(weights)
                for j in range(Lk):
                    scores[b, h, i, j] = weights[j] / total
                    out[b, h, i] += scores[b, h, i, j] * V[b, h, j]
    return out, scores


def random_qkv(rng, B=2, H=2, L=4, D=3):
    return (rng.standard_normal((B, H, L, D)), rng.standard_normal((B, H, L, D)),
            rng.standard_normal((B, H, L, D)))


class TestDotProductAttention:
    """Tests for plain scaled dot-product attention."""

    def test_two_key_closed_form(self):
        out, _ = dot_product_attention(Tensor([[[[1.0]]]]), Tensor([[[[1.0], [0.0]]]]), Tensor([[[[1.0], [0.0]]]]))
        np.testing.assert_allclose(out.data.reshape(-1), [0.73106], atol=1e-4)

    def test_zero_keys_average_values(self, rng):
        Q, _, V = random_qkv(rng)
        out, _ = dot_product_attention(Q, np.zeros_like(Q), V)
        np.testing.assert_allclose(out.data, np.broadcast_to(V.mean(axis=2, keepdims=True), out.shape), atol=1e-14)

    def test_matches_loop(self, rng):
        Q, K, V = random_qkv(rng)
        out, scores = dot_product_attention(Q, K, V)
        ref_out, ref_scores = brute_force(Q, K, V, math.sqrt(3))
        assert np.abs(out.data - ref_out).max() < 1e-12
        assert np.abs(scores.values.data - ref_scores).max() < 1e-12

    def test_dim_mismatch(self, rng):
        with pytest.raises(DimensionError):
            dot_product_attention(rng.standard_normal((1, 1, 2, 3)), rng.standard_normal((1, 1, 2, 4)),
                                  rng.standard_normal((1, 1, 2, 4)))

    def test_all_masked_row(self, rng):
        Q, K, V = random_qkv(rng)
        mask = np.zeros((4, 4), dtype=bool)
        mask[1] = True
        with pytest.raises(ContractError):
            dot_product_attention(Q, K, V, mask)

    def test_causal_mask_zeroes_future(self, rng):
        Q, K, V = random_qkv(rng)
        _, scores = dot_product_attention(Q, K, V, causal_mask(4, 4))
        upper = np.triu(np.ones((4, 4), dtype=bool), k=1)
        assert (scores.values.data[..., upper] == 0).all()
        scores.validate()


class TestCombineKeyCategory:
    """Tests for the key/category combiner."""

    def test_v1_ones_is_identity(self, rng):
        K = rng.standard_normal((2, 3, 2, 4))
        K_mod, divisor = combine_key_category(K, np.zeros_like(K), "v1",
                                              inject=Modulation.identity(K.shape, "v1"))
        assert np.array_equal(K_mod.data, K) and divisor == 2.0

    def test_v3_zeros_is_identity_with_wider_divisor(self, rng):
        K = rng.standard_normal((2, 3, 2, 4))
        K_mod, divisor = combine_key_category(K, np.zeros_like(K), "v3",
                                              inject=Modulation.identity(K.shape, "v3"))
        assert np.array_equal(K_mod.data, K)
        assert divisor == pytest.approx(2.82843, abs=1e-5)

    def test_v2_sigmoid_midpoint(self):
        K = np.full((1, 1, 1, 1), 2.0)
        K_mod, _ = combine_key_category(K, np.zeros_like(K), "v2", inject=np.zeros_like(K))
        np.testing.assert_array_equal(K_mod.data, [[[[1.0]]]])

    def test_keys_never_mutated(self, rng):
        K = Tensor(rng.standard_normal((2, 3, 2, 4)))
        before = K.data.copy()
        block = MultiHeadQKCV(AttentionConfig("v1", 2, 4), rng)
        for variant in ("v1", "v2", "v3"):
            combine_key_category(K, rng.standard_normal(K.shape), variant, block.combiner)
        assert np.array_equal(K.data, before)

    def test_incongruent_shapes(self, rng):
        with pytest.raises(DimensionError):
            combine_key_category(rng.standard_normal((1, 2, 2, 4)), rng.standard_normal((1, 3, 2, 4)), "v1",
                                 inject=np.ones((1, 2, 2, 4)))

    def test_unknown_variant(self, rng):
        K = rng.standard_normal((1, 2, 2, 4))
        with pytest.raises(ContractError):
            combine_key_category(K, K, "v4", inject=np.ones_like(K))

    def test_modulation_mode_must_match_variant(self, rng):
        K = rng.standard_normal((1, 2, 2, 4))
        with pytest.raises(ContractError):
            combine_key_category(K, K, "v3", inject=Modulation.identity(K.shape, "v1"))

    def test_v2_raw_inject_applies_sigmoid(self, rng):
        K = rng.standard_normal((2, 3, 2, 4))
        block = MultiHeadQKCV(AttentionConfig("v2", 2, 4), rng)
        g = rng.standard_normal(K.shape) * 5
        K_mod, _ = combine_key_category(K, K, "v2", block.combiner, inject=g)
        np.testing.assert_allclose(K_mod.data, K * expit(g), atol=1e-15)


class TestQKCVAttention:
    """Identity collapse, loop equivalence and row-stochasticity."""

    def _c(self, Q):
        B, H, L, D = Q.shape
        return np.zeros((B, L, H, D))

    def test_vanilla_ignores_c(self, rng):
        Q, K, V = random_qkv(rng)
        out, scores = qkcv_attention(Q, K, V, rng.standard_normal((2, 4, 2, 3)), AttentionConfig("vanilla", 2, 3))
        ref_out, ref_scores = dot_product_attention(Q, K, V)
        assert np.abs(out.data - ref_out.data).max() == 0.0
        assert np.abs(scores.values.data - ref_scores.values.data).max() == 0.0

    @pytest.mark.parametrize("variant", ["v1", "v2"])
    def test_multiplicative_ones_collapse_to_vanilla(self, rng, variant):
        Q, K, V = random_qkv(rng)
        C = self._c(Q)
        _, scores = qkcv_attention(Q, K, V, C, AttentionConfig(variant, 2, 3),
                                   inject=Modulation.identity(C.shape, variant))
        _, ref = dot_product_attention(Q, K, V)
        assert np.abs(scores.values.data - ref.values.data).max() < 1e-10

    def test_v3_zeros_scale_logits(self, rng):
        Q, K, V = random_qkv(rng)
        C = self._c(Q)
        _, scores = qkcv_attention(Q, K, V, C, AttentionConfig("v3", 2, 3),
                                   inject=Modulation.identity(C.shape, "v3"))
        _, ref = dot_product_attention(Q, K, V)
        assert np.abs(scores.logits.data - ref.logits.data / math.sqrt(2.0)).max() < 1e-12

    @pytest.mark.parametrize("variant", ["v1", "v2", "v3"])
    def test_matches_loop(self, variant):
        rng = np.random.default_rng(3)
        B, H, L, D = 2, 2, 5, 4
        Q, K, V = random_qkv(rng, B, H, L, D)
        g = rng.standard_normal((B, L, H, D))
        out, scores = qkcv_attention(Q, K, V, self._c(Q), AttentionConfig(variant, H, D), inject=g)

        g_heads = np.transpose(g, (0, 2, 1, 3))
        if variant == "v1":
            K_mod, divisor = K * g_heads, math.sqrt(D)
        elif variant == "v2":
            K_mod, divisor = K * expit(g_heads), math.sqrt(D)
        else:
            K_mod, divisor = K + g_heads, math.sqrt(2 * D)
        ref_out, ref_scores = brute_force(Q, K_mod, V, divisor)
        assert np.abs(out.data - ref_out).max() < 1e-12
        assert np.abs(scores.values.data - ref_scores).max() < 1e-12

    def test_missing_c(self, rng):
        Q, K, V = random_qkv(rng)
        with pytest.raises(ContractError):
            qkcv_attention(Q, K, V, None, AttentionConfig("v1", 2, 3), inject=np.ones((2, 4, 2, 3)))

    def test_rows_stochastic_over_random_configs(self):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            variant = ["vanilla", "v1", "v2", "v3"][seed % 4]
            H, D, L, B = int(rng.integers(1, 3)), int(rng.integers(1, 5)), int(rng.integers(1, 6)), int(rng.integers(1, 3))
            config = AttentionConfig(variant, H, D, causal_mask=bool(seed % 2))
            block = MultiHeadQKCV(config, rng)
            _, scores = block(rng.standard_normal((B, L, H * D)), rng.standard_normal((B, H * D)))
            assert (scores.values.data >= 0).all()
            assert np.abs(scores.row_sums() - 1.0).max() < 1e-6


class TestMultiHeadQKCV:
    """Tests for the multi-head block."""

    def test_expansion_shapes(self, rng):
        config = AttentionConfig("v1", 4, 16)
        block = MultiHeadQKCV(config, rng)
        x, c = rng.standard_normal((2, 8, 64)), rng.standard_normal((2, 64))
        assert expand_static(Tensor(c), 8, 4, 16).shape == (2, 8, 4, 16)
        y, scores = multi_head_qkcv(x, c, block, config)
        assert y.shape == (2, 8, 64) and scores.shape == (2, 4, 8, 8)

    @pytest.mark.parametrize("variant", ["v2", "v3"])
    def test_single_head_equals_direct_call(self, rng, variant):
        config = AttentionConfig(variant, 1, 6)
        block = MultiHeadQKCV(config, rng)
        x, c = Tensor(rng.standard_normal((2, 5, 6))), Tensor(rng.standard_normal((2, 6)))
        y, _ = multi_head_qkcv(x, c, block, config)

        def heads(t):
            return transpose(reshape(t, (2, 5, 1, 6)), (0, 2, 1, 3))

        out, _ = qkcv_attention(heads(block.wq(x)), heads(block.wk(x)), heads(block.wv(x)),
                                expand_static(c, 5, 1, 6), config, block.combiner)
        ref = block.wo(reshape(transpose(out, (0, 2, 1, 3)), (2, 5, 6)))
        assert np.abs(y.data - ref.data).max() < 1e-12

    def test_width_must_equal_heads_times_dim(self, rng):
        config = AttentionConfig("vanilla", 2, 4)
        with pytest.raises(ConfigurationError):
            multi_head_qkcv(rng.standard_normal((1, 3, 10)), None, MultiHeadQKCV(config, rng), config)

    def test_output_shape_random_configs(self):
        for seed in range(5):
            rng = np.random.default_rng(seed)
            H, D, L, B = (int(v) for v in rng.integers(1, 5, size=4))
            config = AttentionConfig("v3", H, D)
            y, _ = MultiHeadQKCV(config, rng)(rng.standard_normal((B, L, H * D)), rng.standard_normal((B, H * D)))
            assert y.shape == (B, L, H * D)

    def test_batch_permutation_equivariance(self, rng):
        config = AttentionConfig("v1", 2, 4)
        block = MultiHeadQKCV(config, rng)
        x, c = rng.standard_normal((4, 5, 8)), rng.standard_normal((4, 8))
        perm = np.array([2, 0, 3, 1])
        y, _ = block(x, c)
        y_perm, _ = block(x[perm], c[perm])
        np.testing.assert_allclose(y_perm.data, y.data[perm], atol=1e-12)

    @pytest.mark.parametrize("variant, context", [("v1", "auto"), ("v2", "auto"), ("v3", "none")])
    def test_modulation_constant_over_time(self, rng, variant, context):
        config = AttentionConfig(variant, 2, 4, combiner_context=context)
        block = MultiHeadQKCV(config, rng)
        _, _, modulation = multi_head_qkcv(rng.standard_normal((3, 6, 8)), rng.standard_normal((3, 8)),
                                           block, config, return_modulation=True)
        assert modulation.is_time_constant()
        v = modulation.values.data
        assert np.array_equal(v[:, 0], v[:, 5])

    def test_additive_modulation_varies_over_keys(self, rng):
        config = AttentionConfig("v3", 2, 4)
        block = MultiHeadQKCV(config, rng)
        _, _, modulation = multi_head_qkcv(rng.standard_normal((3, 6, 8)), rng.standard_normal((3, 8)),
                                           block, config, return_modulation=True)
        assert block.combiner.context is not None
        assert not modulation.is_time_constant()

    @pytest.mark.parametrize("context, moves", [("none", False), ("position", True)])
    def test_additive_category_reaches_scores_only_with_position_context(self, rng, context, moves):
        # a key-constant additive term shifts each logit row uniformly, which softmax cancels
        config = AttentionConfig("v3", 2, 4, combiner_context=context)
        block = MultiHeadQKCV(config, rng)
        x = rng.standard_normal((1, 6, 8))
        _, first = block(x, rng.standard_normal((1, 8)))
        _, second = block(x, rng.standard_normal((1, 8)))
        assert (not np.allclose(first.values.data, second.values.data, rtol=0.0, atol=1e-12)) is moves

    def test_position_code_shape_and_range(self):
        code = position_code(7, 5)
        assert code.shape == (7, 5)
        np.testing.assert_allclose(code[0], [0.0, 1.0, 0.0, 1.0, 0.0])
        assert np.abs(code).max() <= 1.0
        assert len({tuple(row) for row in np.round(code, 12)}) == 7

    def test_unknown_combiner_context(self):
        with pytest.raises(ConfigurationError):
            AttentionConfig("v3", 2, 4, combiner_context="time")

    @pytest.mark.parametrize("variant", ["vanilla", "v1", "v2", "v3"])
    def test_gradient_reaches_c_only_for_qkcv(self, rng, variant):
        config = AttentionConfig(variant, 2, 4)
        block = MultiHeadQKCV(config, rng)
        x = Tensor(rng.standard_normal((2, 5, 8)), requires_grad=True)
        c = Tensor(rng.standard_normal((2, 8)), requires_grad=True)
        y, _ = block(x, c)
        g = grad_of((y * y).sum(), [c])[c].data
        if variant == "vanilla":
            assert np.array_equal(g, np.zeros_like(g))
        else:
            assert np.abs(g).max() > 0

    def test_identity_init(self, rng):
        for variant, expected in (("v1", 1.0), ("v2", 1.0 - 1e-3), ("v3", 0.0)):
            config = AttentionConfig(variant, 2, 4)
            block = MultiHeadQKCV(config, rng)
            block.init_identity_modulation()
            _, _, modulation = multi_head_qkcv(rng.standard_normal((2, 3, 8)), rng.standard_normal((2, 8)),
                                               block, config, return_modulation=True)
            np.testing.assert_allclose(modulation.values.data, expected, atol=1e-12)

    def test_full_block_gradcheck(self):
        results = {r.op: r for r in check_composites(seeds=(0,))}
        for variant in ("vanilla", "v1", "v2", "v3"):
            assert results[f"qkcv_{variant}"].passed, results[f"qkcv_{variant}"]


class TestScoreMatrix:
    """Tests for score export."""

    def test_heatmap_round_trip_validates(self, rng):
        config = AttentionConfig("v1", 2, 4)
        _, scores = MultiHeadQKCV(config, rng)(rng.standard_normal((3, 5, 8)), rng.standard_normal((3, 8)))
        frame = scores.to_heatmap_frame(["a", "b", "c"])
        assert list(frame.columns[:2]) == ["sample", "h0_q0_k0"]
        rebuilt = ScoreMatrix.from_heatmap_frame(frame)
        assert np.array_equal(rebuilt.values.data, scores.values.data)

    def test_rejects_broken_rows(self, rng):
        config = AttentionConfig("vanilla", 1, 2)
        _, scores = MultiHeadQKCV(config, rng)(rng.standard_normal((1, 3, 2)))
        frame = scores.to_heatmap_frame()
        frame.iloc[0, 0] += 0.5
        with pytest.raises(ContractError):
            ScoreMatrix.from_heatmap_frame(frame)

    def test_modulation_frame(self, rng):
        modulation = Modulation("additive", rng.standard_normal((2, 3, 1, 2)))
        frame = modulation.to_frame(["a", "b"], "entity_id")
        assert list(frame.columns) == ["entity_id", "position", "h0_d0", "h0_d1"]
        assert list(frame["position"]) == [0, 1, 2, 0, 1, 2]
        np.testing.assert_array_equal(frame.iloc[4, 2:].to_numpy(dtype=float), modulation.values.data[1, 1, 0])
        constant = Modulation.identity((2, 3, 1, 2), "v1").to_frame(["a", "b"])
        assert list(constant["sample"]) == ["a", "b"] and (constant["position"] == 0).all()

    def test_long_frame(self, rng):
        config = AttentionConfig("vanilla", 1, 2)
        _, scores = MultiHeadQKCV(config, rng)(rng.standard_normal((2, 3, 2)))
        assert len(scores.to_frame()) == 2 * 1 * 3 * 3

    def test_variant_parse(self):
        assert AttentionVariant.parse("v3") is AttentionVariant.V3
        with pytest.raises(ContractError):
            AttentionVariant.parse("v9")
