"""Multi-scale cross-modal encoder.

Each layer updates both streams: the video stream attends over the
concatenation [text; video] and the text stream over [video; text], so every
query position weighs both modalities in a single softmax. Layers marked 'R'
in the plan shrink the video-side keys/values with a non-overlapping
convolution of factor R before attending; overlapped merge convolutions
between layers shrink the video resolution itself, producing a pyramid of
text-enhanced video features.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad, instrument
from .attention import VARIANTS as ZOO_VARIANTS, BlockConfig, make_block
from .autodiff import Tensor
from .data import MASK_TOKEN_ID
from .nn import (
    Dropout,
    Embedding,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    sinusoidal_positions,
)
from .vqi import CqaWeights, fuse_video_with_query


@dataclass
class EncoderConfig:
    d_model: int
    n_heads: int
    vocab_size: int
    d_video_in: int
    layer_plan: str = "RRBBB"
    reduction: int = 2
    merge_after: tuple = (0, 1)
    merge_kernel: int = 3
    merge_stride: int = 2
    scale_indices: tuple | None = None
    mask_rate: float = 0.15
    dropout: float = 0.0
    block_variant: str = "cross_modal"
    use_query_fusion: bool = False

    @property
    def n_layers(self) -> int:
        return len(self.layer_plan)

    def __post_init__(self):
        if set(self.layer_plan) - {"R", "B"}:
            raise ValueError(f"layer_plan may only contain R/B: {self.layer_plan!r}")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.reduction < 1:
            raise ValueError("reduction factor must be >= 1")
        if len(set(self.merge_after)) != len(self.merge_after):
            raise ValueError("duplicate merge indices")
        if self.scale_indices is None:
            if self.n_layers >= 3 and self.merge_after:
                self.scale_indices = (0, 1, self.n_layers - 1)
            else:
                self.scale_indices = tuple(range(self.n_layers))
        self.scale_indices = tuple(self.scale_indices)
        if list(self.scale_indices) != sorted(set(self.scale_indices)):
            raise ValueError("scale_indices must be strictly increasing")
        if self.scale_indices and self.scale_indices[-1] >= self.n_layers:
            raise ValueError("scale_indices out of range")
        self.merge_after = tuple(self.merge_after)
        if any(i >= self.n_layers - 1 for i in self.merge_after):
            raise ValueError("merges sit between layers; index must be < n_layers-1")
        if self.merge_kernel <= self.merge_stride:
            raise ValueError("temporal merge requires kernel > stride")
        if not 0.0 <= self.mask_rate < 1.0:
            raise ValueError("mask_rate must be in [0, 1)")
        if self.block_variant != "cross_modal":
            if self.block_variant not in ZOO_VARIANTS:
                raise ValueError(f"unknown block variant {self.block_variant!r}")
            if "R" in self.layer_plan:
                raise ValueError("sequence reduction only applies to cross_modal layers")


@dataclass
class EncoderOutput:
    scales: list           # C video feature tensors, decreasing temporal length
    text_final: Tensor     # (M, d)
    span_logits: Tensor    # (N_last,)
    word_logits: Tensor    # (M, vocab)


class CrossModalAttention(Module):
    """One stream's update: queries from `own`, keys/values over the
    concatenation of both streams, with optional conv reduction of whichever
    side carries the video."""

    def __init__(self, d: int, n_heads: int, rng, dropout: float,
                 video_side: str, reduction: int | None, mac_tags: tuple):
        assert video_side in ("own", "other")
        self.n_heads = n_heads
        self.d_head = d // n_heads
        self.video_side = video_side
        self.reduction = reduction
        self.mac_tags = mac_tags  # (other-block tag, own-block tag)
        self.norm_own = LayerNorm(d)
        self.norm_other = LayerNorm(d)
        self.proj_q = Linear(d, d, rng)
        self.proj_k_other = Linear(d, d, rng)
        self.proj_v_other = Linear(d, d, rng)
        self.proj_k_own = Linear(d, d, rng)
        self.proj_v_own = Linear(d, d, rng)
        self.proj_out = Linear(d, d, rng)
        if reduction is not None and reduction >= 1:
            self.reduce_weight = ad.parameter(
                np.eye(d)[None].repeat(reduction, axis=0) / reduction)
            self.reduce_bias = ad.parameter(np.zeros(d))
        self.norm_ff = LayerNorm(d)
        self.ff = FeedForward(d, 2 * d, d, rng, dropout)
        self.drop = Dropout(dropout)

    def _reduce_video(self, video: Tensor):
        """Non-overlapping conv of kernel=stride=R after zero right-padding to
        a multiple of R; windows with no real frame would be masked out (the
        ceil padding never produces one)."""
        r = self.reduction
        n = video.shape[0]
        n_out = -(-n // r)
        pad = n_out * r - n
        if pad:
            video = ad.concat(
                [video, ad.constant(np.zeros((pad, video.shape[1])))], axis=0)
        reduced = ad.conv1d(video, self.reduce_weight, self.reduce_bias, stride=r)
        valid = (np.arange(n_out) * r) < n
        return reduced, valid

    def _split(self, t: Tensor, length: int) -> Tensor:
        return ad.transpose(ad.reshape(t, (length, self.n_heads, self.d_head)), (1, 0, 2))

    def attend(self, own: Tensor, other: Tensor, return_weights: bool = False):
        """Concatenated-key attention; inputs are already normalized."""
        len_own = own.shape[0]
        own_kv, other_kv = own, other
        valid = None
        if self.reduction is not None:
            if self.video_side == "own":
                own_kv, v_valid = self._reduce_video(own)
            else:
                other_kv, v_valid = self._reduce_video(other)
            if not v_valid.all():
                is_own = self.video_side == "own"
                valid = np.concatenate([
                    np.ones(other_kv.shape[0], bool) if is_own else v_valid,
                    v_valid if is_own else np.ones(own_kv.shape[0], bool)])
        h, dk = self.n_heads, self.d_head
        q = self._split(self.proj_q(own), len_own)
        k_other = self._split(self.proj_k_other(other_kv), other_kv.shape[0])
        v_other = self._split(self.proj_v_other(other_kv), other_kv.shape[0])
        k_own = self._split(self.proj_k_own(own_kv), own_kv.shape[0])
        v_own = self._split(self.proj_v_own(own_kv), own_kv.shape[0])
        scale = 1.0 / np.sqrt(dk)
        scores_other = ad.scalar_mul(q @ ad.transpose(k_other, (0, 2, 1)), scale)
        scores_own = ad.scalar_mul(q @ ad.transpose(k_own, (0, 2, 1)), scale)
        if instrument.enabled():
            instrument.record(self.mac_tags[0], h * len_own * other_kv.shape[0] * dk)
            instrument.record(self.mac_tags[1], h * len_own * own_kv.shape[0] * dk)
        scores = ad.concat([scores_other, scores_own], axis=-1)
        if valid is not None:
            scores = scores + ad.constant(np.where(valid, 0.0, -1e30))
        weights = ad.softmax(scores, axis=-1)
        values = ad.concat([v_other, v_own], axis=1)
        out = self.drop(weights) @ values
        out = self.proj_out(ad.reshape(ad.transpose(out, (1, 0, 2)), (len_own, h * dk)))
        if return_weights:
            return out, weights.data
        return out

    def __call__(self, own: Tensor, other: Tensor) -> Tensor:
        out = self.attend(self.norm_own(own), self.norm_other(other))
        own = own + self.drop(out)
        return own + self.drop(self.ff(self.norm_ff(own)))


class CrossModalLayer(Module):
    """Simultaneous visual and linguistic updates reading the layer inputs."""

    def __init__(self, d: int, n_heads: int, rng, dropout: float,
                 reduction: int | None):
        self.visual = CrossModalAttention(
            d, n_heads, rng, dropout, "own", reduction, ("lv_scores", "vv_scores"))
        self.linguistic = CrossModalAttention(
            d, n_heads, rng, dropout, "other", reduction, ("vl_scores", "ll_scores"))

    def __call__(self, video: Tensor, text: Tensor):
        return self.visual(video, text), self.linguistic(text, video)


def temporal_merge(video: Tensor, weight: Tensor, bias: Tensor | None,
                   stride: int) -> Tensor:
    """Overlapped conv along time; kernel > stride so windows share frames."""
    kernel = weight.shape[0]
    if kernel <= stride:
        raise ValueError(f"temporal merge needs kernel > stride, got {kernel} <= {stride}")
    if kernel > video.shape[0]:
        raise ValueError(
            f"merge kernel {kernel} exceeds sequence length {video.shape[0]}")
    return ad.conv1d(video, weight, bias, stride=stride, padding=0)


class TemporalMerge(Module):
    def __init__(self, d: int, kernel: int, stride: int, rng):
        self.stride = stride
        # Near-average init keeps early training scale-stable.
        base = np.eye(d)[None].repeat(kernel, axis=0) / kernel
        self.weight = ad.parameter(base + rng.normal(0, 0.01, size=base.shape))
        self.bias = ad.parameter(np.zeros(d))

    def __call__(self, video: Tensor) -> Tensor:
        return temporal_merge(video, self.weight, self.bias, self.stride)


def merged_length(n: int, kernel: int, stride: int) -> int:
    return (n - kernel) // stride + 1


def mask_words(token_ids, mask_rate: float, rng: np.random.Generator):
    """Independently mask positions; at least one is forced whenever masking
    is on. Masked positions take the dedicated mask-token id."""
    token_ids = np.asarray(token_ids, dtype=np.int64)
    m = token_ids.shape[0]
    if mask_rate <= 0.0 or m == 0:
        return token_ids.copy(), np.array([], dtype=np.int64)
    picked = rng.random(m) < mask_rate
    if not picked.any():
        picked[rng.integers(m)] = True
    masked = token_ids.copy()
    masked[picked] = MASK_TOKEN_ID
    return masked, np.flatnonzero(picked)


class InputEmbedder(Module):
    """Per-modality affine projection to d plus fixed positional encoding."""

    def __init__(self, cfg: EncoderConfig, rng):
        d = cfg.d_model
        self.d_model = d
        self.video_proj = Linear(cfg.d_video_in, d, rng)
        self.token_embed = Embedding(cfg.vocab_size, d, rng)
        self.text_proj = Linear(d, d, rng)

    def __call__(self, video_feats: np.ndarray, token_ids):
        n, m = video_feats.shape[0], len(token_ids)
        if n < 1 or m < 1:
            raise ValueError("both sequences must be nonempty")
        video = self.video_proj(ad.constant(video_feats))
        video = video + ad.constant(sinusoidal_positions(n, self.d_model))
        text = self.text_proj(self.token_embed(token_ids))
        text = text + ad.constant(sinusoidal_positions(m, self.d_model))
        return video, text


class Encoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.d_model
        self.embed = InputEmbedder(cfg, rng)
        if cfg.block_variant == "cross_modal":
            self.layers = [
                CrossModalLayer(d, cfg.n_heads, rng, cfg.dropout,
                                cfg.reduction if flag == "R" else None)
                for flag in cfg.layer_plan
            ]
        else:
            block_cfg = BlockConfig(d, cfg.n_heads, cfg.block_variant, cfg.dropout)
            self.layers = [make_block(block_cfg, rng) for _ in cfg.layer_plan]
        self.merges = [TemporalMerge(d, cfg.merge_kernel, cfg.merge_stride, rng)
                       for _ in cfg.merge_after]
        self.span_head = FeedForward(d, d, 1, rng)
        self.word_head = Linear(d, cfg.vocab_size, rng)
        if cfg.use_query_fusion:
            self.fusion_video = CqaWeights(d, rng)
            self.fusion_query = CqaWeights(d, rng)

    def scale_lengths(self, n: int) -> list[int]:
        """Video lengths collected at scale_indices for an input of length n."""
        merge_at = dict(zip(self.cfg.merge_after, self.merges))
        lengths, current = {}, n
        for i in range(self.cfg.n_layers):
            lengths[i] = current
            if i in merge_at:
                current = merged_length(current, self.cfg.merge_kernel,
                                        self.cfg.merge_stride)
        return [lengths[i] for i in self.cfg.scale_indices]

    def encode(self, video_feats: np.ndarray, token_ids) -> EncoderOutput:
        cfg = self.cfg
        video, text = self.embed(video_feats, token_ids)
        merge_at = dict(zip(cfg.merge_after, self.merges))
        scale_set = set(cfg.scale_indices)
        scales = []
        for i, layer in enumerate(self.layers):
            video, text = layer(video, text)
            if i == cfg.n_layers - 1 and cfg.use_query_fusion:
                video = ad.transpose(fuse_video_with_query(
                    ad.transpose(video), ad.transpose(text),
                    self.fusion_video, self.fusion_query))
            if i in scale_set:
                scales.append(video)
            if i in merge_at:
                video = merge_at[i](video)
                video = video + ad.constant(
                    sinusoidal_positions(video.shape[0], cfg.d_model))
        span_logits = ad.reshape(self.span_head(video), (video.shape[0],))
        word_logits = self.word_head(text)
        return EncoderOutput(scales=scales, text_final=text,
                             span_logits=span_logits, word_logits=word_logits)

    __call__ = encode
