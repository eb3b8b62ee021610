"""Encoder tests: concatenated-key attention against a loop oracle, sequence
reduction identities and complexity counts, temporal merging, word masking,
and full-stack shape contracts."""

import numpy as np
import pytest

from momentloc import autodiff as ad, instrument
from momentloc.attention import VARIANTS
from momentloc.autodiff import Tensor, finite_difference_check
from momentloc.data import MASK_TOKEN_ID
from momentloc.encoder import (
    CrossModalAttention,
    CrossModalLayer,
    Encoder,
    EncoderConfig,
    InputEmbedder,
    TemporalMerge,
    mask_words,
    merged_length,
    temporal_merge,
)
from momentloc.nn import sinusoidal_positions


def softmax_np(a, axis=-1):
    e = np.exp(a - a.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def attend_loop_oracle(layer: CrossModalAttention, own, other):
    """Naive per-head transcription of the concatenated-key attention."""
    def proj(lin, x):
        return x @ lin.weight.data + lin.bias.data

    q = proj(layer.proj_q, own)
    k_cat = np.concatenate([proj(layer.proj_k_other, other),
                            proj(layer.proj_k_own, own)], axis=0)
    v_cat = np.concatenate([proj(layer.proj_v_other, other),
                            proj(layer.proj_v_own, own)], axis=0)
    dk = layer.d_head
    outs = []
    for h in range(layer.n_heads):
        sl = slice(h * dk, (h + 1) * dk)
        scores = q[:, sl] @ k_cat[:, sl].T / np.sqrt(dk)
        outs.append(softmax_np(scores) @ v_cat[:, sl])
    return proj(layer.proj_out, np.concatenate(outs, axis=1))


def make_attention(d=8, heads=2, seed=0, reduction=None, video_side="own"):
    rng = np.random.default_rng(seed)
    return CrossModalAttention(d, heads, rng, 0.0, video_side, reduction,
                               ("lv_scores", "vv_scores"))


class TestCrossModalAttention:
    def test_equal_logits_mean_of_two_values(self):
        layer = make_attention()
        layer.proj_q.weight.data[:] = 0.0
        layer.proj_q.bias.data[:] = 0.0
        rng = np.random.default_rng(1)
        own = Tensor(rng.standard_normal((1, 8)))
        other = Tensor(rng.standard_normal((1, 8)))
        out, weights = layer.attend(own, other, return_weights=True)
        np.testing.assert_allclose(weights, 0.5, atol=1e-15)
        np.testing.assert_allclose(out.data, attend_loop_oracle(layer, own.data, other.data),
                                   atol=1e-12)

    def test_zero_keys_give_uniform_attention(self):
        layer = make_attention(seed=2)
        for lin in (layer.proj_k_other, layer.proj_k_own):
            lin.weight.data[:] = 0.0
            lin.bias.data[:] = 0.0
        rng = np.random.default_rng(3)
        own = Tensor(rng.standard_normal((3, 8)))
        other = Tensor(rng.standard_normal((2, 8)))
        _, weights = layer.attend(own, other, return_weights=True)
        np.testing.assert_allclose(weights, 1.0 / 5, atol=1e-15)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_loop_oracle(self, seed):
        layer = make_attention(seed=seed)
        rng = np.random.default_rng(100 + seed)
        own = rng.standard_normal((3, 8))
        other = rng.standard_normal((2, 8))
        out = layer.attend(Tensor(own), Tensor(other))
        np.testing.assert_allclose(out.data, attend_loop_oracle(layer, own, other),
                                   atol=1e-10)

    @pytest.mark.parametrize("seed", range(3))
    def test_block_gradients(self, seed):
        layer = make_attention(d=6, heads=2, seed=seed)
        rng = np.random.default_rng(seed)
        other = Tensor(rng.standard_normal((2, 6)))
        own = Tensor(rng.standard_normal((3, 6)), requires_grad=True)

        def f(t):
            out = layer(t, other)
            return (out * out).sum()

        report = finite_difference_check(f, own)
        assert report.passed, str(report)


class TestSequenceReduction:
    def _identity_reduced(self, base: CrossModalAttention, reduction: int):
        reduced = make_attention(reduction=reduction, seed=99)
        for (name, p_to), (_, p_from) in zip(
                sorted(reduced.named_parameters()),
                sorted(base.named_parameters())):
            if "reduce" not in name:
                p_to.data = p_from.data.copy()
        reduced.reduce_weight.data[:] = np.eye(8)[None]
        reduced.reduce_bias.data[:] = 0.0
        return reduced

    def test_r1_identity_conv_equals_base(self):
        base = make_attention(seed=5)
        reduced = self._identity_reduced(base, reduction=1)
        rng = np.random.default_rng(6)
        own = Tensor(rng.standard_normal((6, 8)))
        other = Tensor(rng.standard_normal((3, 8)))
        out_base = base.attend(own, other)
        out_reduced = reduced.attend(own, other)
        np.testing.assert_allclose(out_reduced.data, out_base.data, atol=1e-12)

    def test_reduced_key_length_shapes(self):
        layer = make_attention(reduction=4, seed=7)
        rng = np.random.default_rng(8)
        own = Tensor(rng.standard_normal((8, 8)))
        other = Tensor(rng.standard_normal((3, 8)))
        _, weights = layer.attend(own, other, return_weights=True)
        assert weights.shape == (2, 8, 3 + 2)  # keys: M text + ceil(8/4) video

    def test_ragged_length_pads_and_keeps_all_windows(self):
        layer = make_attention(reduction=4, seed=9)
        rng = np.random.default_rng(10)
        own = Tensor(rng.standard_normal((10, 8)))   # ceil(10/4) = 3 windows
        other = Tensor(rng.standard_normal((2, 8)))
        _, weights = layer.attend(own, other, return_weights=True)
        assert weights.shape == (2, 10, 2 + 3)
        np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-12)

    def test_mac_count_formula(self):
        layer = make_attention(d=8, heads=2, reduction=4, seed=11)
        rng = np.random.default_rng(12)
        own = Tensor(rng.standard_normal((16, 8)))
        other = Tensor(rng.standard_normal((3, 8)))
        instrument.enable()
        instrument.reset()
        try:
            layer.attend(own, other)
            got = instrument.count("vv_scores")
        finally:
            instrument.enable(False)
        n, d_head, heads = 16, 4, 2
        assert got == n * (n // 4) * d_head * heads

    def test_mac_reduction_factor_vs_base(self):
        rng = np.random.default_rng(13)
        own = Tensor(rng.standard_normal((32, 8)))
        other = Tensor(rng.standard_normal((3, 8)))
        counts = {}
        for label, reduction in (("base", None), ("reduced", 4)):
            layer = make_attention(reduction=reduction, seed=14)
            instrument.enable()
            instrument.reset()
            try:
                layer.attend(own, other)
                counts[label] = instrument.count("vv_scores")
            finally:
                instrument.enable(False)
        assert counts["base"] == 4 * counts["reduced"]


class TestTemporalMerge:
    def test_adjacent_pair_means(self):
        x = Tensor(np.array([[1.0], [2.0], [3.0]]))
        w = Tensor(np.full((2, 1, 1), 0.5))
        out = temporal_merge(x, w, None, stride=1)
        np.testing.assert_allclose(out.data, [[1.5], [2.5]])

    def test_length_formula(self):
        x = Tensor(np.random.default_rng(0).standard_normal((7, 4)))
        w = Tensor(np.random.default_rng(1).standard_normal((3, 4, 4)))
        out = temporal_merge(x, w, None, stride=2)
        assert out.shape[0] == 3 == merged_length(7, 3, 2)

    def test_constant_input_sum_to_one_weights(self):
        const_row = np.arange(4.0)
        x = Tensor(np.tile(const_row, (6, 1)))
        w = Tensor(np.eye(4)[None].repeat(3, axis=0) / 3.0)
        out = temporal_merge(x, w, None, stride=2)
        for row in out.data:
            np.testing.assert_allclose(row, const_row, atol=1e-12)

    def test_overlap_required(self):
        x = Tensor(np.ones((6, 2)))
        w = Tensor(np.ones((2, 2, 2)))
        with pytest.raises(ValueError, match="kernel > stride"):
            temporal_merge(x, w, None, stride=2)

    def test_kernel_longer_than_sequence(self):
        x = Tensor(np.ones((2, 2)))
        w = Tensor(np.ones((3, 2, 2)))
        with pytest.raises(ValueError, match="exceeds"):
            temporal_merge(x, w, None, stride=1)

    def test_module_gradients(self):
        rng = np.random.default_rng(2)
        merge = TemporalMerge(3, kernel=3, stride=2, rng=rng)
        x = Tensor(rng.standard_normal((7, 3)), requires_grad=True)
        report = finite_difference_check(
            lambda t: (merge(t) * merge(t)).sum(), x)
        assert report.passed, str(report)


class TestMaskWords:
    def test_zero_rate_masks_nothing(self):
        ids = np.array([5, 6, 7])
        masked, positions = mask_words(ids, 0.0, np.random.default_rng(0))
        np.testing.assert_array_equal(masked, ids)
        assert positions.size == 0

    def test_monte_carlo_mean_count(self):
        rng = np.random.default_rng(1)
        ids = np.arange(4, 24)
        counts = [mask_words(ids, 0.15, rng)[1].size for _ in range(10_000)]
        assert abs(np.mean(counts) - 3.0) < 0.1

    def test_single_token_always_masked(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            masked, positions = mask_words(np.array([9]), 0.15, rng)
            assert masked[0] == MASK_TOKEN_ID and positions.tolist() == [0]

    def test_masked_positions_use_mask_id(self):
        rng = np.random.default_rng(3)
        ids = np.arange(4, 16)
        masked, positions = mask_words(ids, 0.5, rng)
        assert (masked[positions] == MASK_TOKEN_ID).all()
        untouched = np.setdiff1d(np.arange(ids.size), positions)
        np.testing.assert_array_equal(masked[untouched], ids[untouched])


def small_config(**kw):
    defaults = dict(d_model=8, n_heads=2, vocab_size=12, d_video_in=5,
                    layer_plan="RB", reduction=2, merge_after=(0,),
                    merge_kernel=3, merge_stride=2, scale_indices=(0, 1))
    defaults.update(kw)
    return EncoderConfig(**defaults)


class TestInputEmbedder:
    def test_position_zero_pattern(self):
        pe = sinusoidal_positions(4, 6)
        np.testing.assert_allclose(pe[0, 0::2], 0.0)
        np.testing.assert_allclose(pe[0, 1::2], 1.0)

    def test_zero_inputs_zero_weights_give_pe(self):
        emb = InputEmbedder(small_config(), np.random.default_rng(0))
        emb.video_proj.weight.data[:] = 0.0
        emb.video_proj.bias.data[:] = 0.0
        video, _ = emb(np.zeros((5, 5)), [4, 5])
        np.testing.assert_allclose(video.data, sinusoidal_positions(5, 8))

    def test_identity_projection_adds_pe(self):
        cfg = small_config(d_video_in=8)
        emb = InputEmbedder(cfg, np.random.default_rng(1))
        emb.video_proj.weight.data[:] = np.eye(8)
        emb.video_proj.bias.data[:] = 0.0
        raw = np.random.default_rng(2).standard_normal((4, 8))
        video, _ = emb(raw, [4])
        np.testing.assert_allclose(video.data, raw + sinusoidal_positions(4, 8))

    def test_empty_sequence_rejected(self):
        emb = InputEmbedder(small_config(), np.random.default_rng(3))
        with pytest.raises(ValueError, match="nonempty"):
            emb(np.zeros((0, 5)), [4])


class TestEncoderStack:
    def test_config_validation(self):
        with pytest.raises(ValueError, match="R/B"):
            small_config(layer_plan="RX")
        with pytest.raises(ValueError, match="strictly increasing"):
            small_config(scale_indices=(1, 0))
        with pytest.raises(ValueError, match="kernel > stride"):
            small_config(merge_kernel=2, merge_stride=2)
        with pytest.raises(ValueError, match="between layers"):
            small_config(merge_after=(1,))

    def test_scale_lengths_strictly_decrease_and_text_preserved(self):
        cfg = small_config(layer_plan="RRB", merge_after=(0, 1),
                           scale_indices=(0, 1, 2))
        enc = Encoder(cfg, np.random.default_rng(0))
        rng = np.random.default_rng(1)
        out = enc.encode(rng.standard_normal((16, 5)), [4, 5, 6])
        lengths = [s.shape[0] for s in out.scales]
        assert lengths == enc.scale_lengths(16)
        assert all(a > b for a, b in zip(lengths, lengths[1:]))
        assert out.text_final.shape == (3, 8)
        assert out.word_logits.shape == (3, 12)
        assert out.span_logits.shape == (lengths[-1],)

    def test_desk_default_lengths(self):
        # Five layers, merges after the first two: 64 -> 31 -> 15.
        cfg = EncoderConfig(d_model=8, n_heads=2, vocab_size=12, d_video_in=5,
                            layer_plan="RRBBB")
        enc = Encoder(cfg, np.random.default_rng(0))
        assert cfg.scale_indices == (0, 1, 4)
        assert enc.scale_lengths(64) == [64, 31, 15]

    def test_long_video_plan_rrbbb_monotone(self):
        cfg = EncoderConfig(d_model=8, n_heads=2, vocab_size=12, d_video_in=5,
                            layer_plan="RRBBB")
        enc = Encoder(cfg, np.random.default_rng(0))
        lengths = enc.scale_lengths(512)
        assert lengths[0] == 512
        assert all(a > b for a, b in zip(lengths, lengths[1:]))

    def test_single_layer_single_scale(self):
        cfg = EncoderConfig(d_model=8, n_heads=2, vocab_size=12, d_video_in=5,
                            layer_plan="B", merge_after=(), scale_indices=(0,))
        enc = Encoder(cfg, np.random.default_rng(0))
        out = enc.encode(np.random.default_rng(1).standard_normal((6, 5)), [4])
        assert len(out.scales) == 1 and out.scales[0].shape == (6, 8)

    def test_reduced_stack_with_identity_conv_equals_base_stack(self):
        base_cfg = small_config(layer_plan="BB", merge_after=(),
                                scale_indices=(0, 1))
        red_cfg = small_config(layer_plan="RR", reduction=1, merge_after=(),
                               scale_indices=(0, 1))
        base = Encoder(base_cfg, np.random.default_rng(3))
        red = Encoder(red_cfg, np.random.default_rng(4))
        base_params = dict(base.named_parameters())
        for name, p in red.named_parameters():
            if "reduce_weight" in name:
                p.data = np.eye(8)[None]
            elif "reduce_bias" in name:
                p.data = np.zeros(8)
            else:
                p.data = base_params[name].data.copy()
        rng = np.random.default_rng(5)
        feats, ids = rng.standard_normal((9, 5)), [4, 7]
        out_base = base.encode(feats, ids)
        out_red = red.encode(feats, ids)
        np.testing.assert_allclose(out_red.scales[-1].data,
                                   out_base.scales[-1].data, atol=1e-12)
        np.testing.assert_allclose(out_red.span_logits.data,
                                   out_base.span_logits.data, atol=1e-12)

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_zoo_variants_swap_through_same_harness(self, variant):
        cfg = small_config(layer_plan="BB", block_variant=variant,
                           merge_after=(0,), scale_indices=(0, 1))
        enc = Encoder(cfg, np.random.default_rng(6))
        rng = np.random.default_rng(7)
        out = enc.encode(rng.standard_normal((10, 5)), [4, 5])
        assert [s.shape[0] for s in out.scales] == enc.scale_lengths(10)
        assert out.text_final.shape == (2, 8)

    def test_zoo_variant_rejects_reduction_plan(self):
        with pytest.raises(ValueError, match="sequence reduction"):
            small_config(layer_plan="RB", block_variant="self")

    def test_query_fusion_mode_shapes(self):
        cfg = small_config(use_query_fusion=True)
        enc = Encoder(cfg, np.random.default_rng(8))
        out = enc.encode(np.random.default_rng(9).standard_normal((8, 5)), [4, 5, 6])
        assert out.scales[-1].shape[1] == 8

    @pytest.mark.parametrize("seed", range(2))
    def test_full_encoder_gradients(self, seed):
        cfg = small_config(d_model=4, n_heads=2, layer_plan="RB")
        enc = Encoder(cfg, np.random.default_rng(seed))
        feats = np.random.default_rng(seed + 10).standard_normal((6, 5))
        target = enc.layers[0].visual.proj_q.weight

        def f(_):
            out = enc.encode(feats, [4, 5])
            total = (out.span_logits * out.span_logits).sum()
            return total + (out.word_logits * out.word_logits).mean()

        report = finite_difference_check(f, target)
        assert report.passed, str(report)
