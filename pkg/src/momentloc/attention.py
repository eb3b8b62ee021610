"""Two-stream transformer block variants behind one interface.

Every block maps (video_seq, text_seq) -> (video_out, text_out) with unchanged
shapes, so the encoder and the ablation harness can swap wiring without
touching anything else. Variants:

  self            per-modality self-attention towers
  cross           co-attention, each modality attends to the other
  self_cross      self tower feeding a co-attention tower
  cross_self      co-attention tower feeding a self tower
  parallel        self- and cross-attention branches fused by a learned gate,
                  feed-forward head
  gated_parallel  as parallel, but the feed-forward head is replaced by a
                  confidence-scaling head
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Dropout, FeedForward, LayerNorm, Linear, Module, MultiHeadAttention

VARIANTS = ("self", "cross", "self_cross", "cross_self", "parallel", "gated_parallel")


@dataclass
class BlockConfig:
    d_model: int
    n_heads: int
    variant: str = "self"
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown block variant {self.variant!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")


class _SelfStream(Module):
    """Pre-norm self-attention + feed-forward for one sequence."""

    def __init__(self, cfg: BlockConfig, rng):
        d = cfg.d_model
        self.norm_attn = LayerNorm(d)
        self.attn = MultiHeadAttention(d, cfg.n_heads, rng, cfg.dropout_rate)
        self.norm_ff = LayerNorm(d)
        self.ff = FeedForward(d, 2 * d, d, rng)
        self.drop = Dropout(cfg.dropout_rate)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.norm_attn(x)
        x = x + self.drop(self.attn(h, h, h))
        return x + self.drop(self.ff(self.norm_ff(x)))


class SelfAttentionBlock(Module):
    def __init__(self, cfg: BlockConfig, rng):
        self.video = _SelfStream(cfg, rng)
        self.text = _SelfStream(cfg, rng)

    def __call__(self, video: Tensor, text: Tensor):
        return self.video(video), self.text(text)


class CrossAttentionBlock(Module):
    """Each modality attends to the other; both updates read the inputs."""

    def __init__(self, cfg: BlockConfig, rng):
        d = cfg.d_model
        self.norm_video = LayerNorm(d)
        self.norm_text = LayerNorm(d)
        self.video_attn = MultiHeadAttention(d, cfg.n_heads, rng, cfg.dropout_rate)
        self.text_attn = MultiHeadAttention(d, cfg.n_heads, rng, cfg.dropout_rate)
        self.norm_video_ff = LayerNorm(d)
        self.norm_text_ff = LayerNorm(d)
        self.video_ff = FeedForward(d, 2 * d, d, rng)
        self.text_ff = FeedForward(d, 2 * d, d, rng)
        self.drop = Dropout(cfg.dropout_rate)

    def __call__(self, video: Tensor, text: Tensor):
        vn, tn = self.norm_video(video), self.norm_text(text)
        video = video + self.drop(self.video_attn(vn, tn, tn))
        text = text + self.drop(self.text_attn(tn, vn, vn))
        video = video + self.drop(self.video_ff(self.norm_video_ff(video)))
        text = text + self.drop(self.text_ff(self.norm_text_ff(text)))
        return video, text


class CascadeBlock(Module):
    """Self and cross towers in sequence, in either order."""

    def __init__(self, cfg: BlockConfig, rng, cross_first: bool):
        self.cross_first = cross_first
        self.self_stage = SelfAttentionBlock(cfg, rng)
        self.cross_stage = CrossAttentionBlock(cfg, rng)

    def __call__(self, video: Tensor, text: Tensor):
        if self.cross_first:
            video, text = self.cross_stage(video, text)
            return self.self_stage(video, text)
        video, text = self.self_stage(video, text)
        return self.cross_stage(video, text)


class _ParallelStream(Module):
    """One modality of the parallel block: self and cross attention run side
    by side, a sigmoid gate mixes them, then either a feed-forward head or a
    confidence-scaling head refines the fused state."""

    def __init__(self, cfg: BlockConfig, rng, self_guided: bool):
        d = cfg.d_model
        self.self_guided = self_guided
        self.norm = LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, cfg.n_heads, rng, cfg.dropout_rate)
        self.cross_attn = MultiHeadAttention(d, cfg.n_heads, rng, cfg.dropout_rate)
        self.gate = Linear(2 * d, d, rng)
        self.norm_head = LayerNorm(d)
        if self_guided:
            self.confidence = Linear(d, d, rng)
            self.content = Linear(d, d, rng)
        else:
            self.ff = FeedForward(d, 2 * d, d, rng)
        self.drop = Dropout(cfg.dropout_rate)

    def fuse(self, own_normed: Tensor, other_normed: Tensor) -> Tensor:
        branch_self = self.self_attn(own_normed, own_normed, own_normed)
        branch_cross = self.cross_attn(own_normed, other_normed, other_normed)
        gate = ad.sigmoid(self.gate(ad.concat([branch_self, branch_cross], axis=1)))
        ones = ad.constant(np.ones(gate.shape))
        return gate * branch_self + (ones - gate) * branch_cross

    def head(self, x: Tensor) -> Tensor:
        h = self.norm_head(x)
        if self.self_guided:
            return ad.sigmoid(self.confidence(h)) * self.content(h)
        return self.ff(h)

    def __call__(self, x: Tensor, own_normed: Tensor, other_normed: Tensor) -> Tensor:
        x = x + self.drop(self.fuse(own_normed, other_normed))
        return x + self.drop(self.head(x))


class ParallelAttentionBlock(Module):
    def __init__(self, cfg: BlockConfig, rng, self_guided: bool):
        self.video = _ParallelStream(cfg, rng, self_guided)
        self.text = _ParallelStream(cfg, rng, self_guided)

    def __call__(self, video: Tensor, text: Tensor):
        vn, tn = self.video.norm(video), self.text.norm(text)
        return self.video(video, vn, tn), self.text(text, tn, vn)


def make_block(cfg: BlockConfig, rng: np.random.Generator) -> Module:
    if cfg.variant == "self":
        return SelfAttentionBlock(cfg, rng)
    if cfg.variant == "cross":
        return CrossAttentionBlock(cfg, rng)
    if cfg.variant == "self_cross":
        return CascadeBlock(cfg, rng, cross_first=False)
    if cfg.variant == "cross_self":
        return CascadeBlock(cfg, rng, cross_first=True)
    if cfg.variant == "parallel":
        return ParallelAttentionBlock(cfg, rng, self_guided=False)
    if cfg.variant == "gated_parallel":
        return ParallelAttentionBlock(cfg, rng, self_guided=True)
    raise ValueError(f"unknown block variant {cfg.variant!r}")


def run_block(video: Tensor, text: Tensor, block: Module):
    """Uniform entry point: every variant returns (video_out, text_out)."""
    return block(video, text)
