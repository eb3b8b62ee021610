"""Anchor-guided moment decoder.

A fixed set of learned templates, each paired with a (center, width) anchor,
is refined layer by layer: self-attention mixes the moment states, anchor
content pooled from the encoder pyramid steers a highlight attention over the
last video scale, and two heads emit anchor offsets and score logits. Anchors
used for pooling are treated as constants within a layer; the sigmoid-logit
update is the only path that moves them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import (
    Dropout,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    clamp01,
)

ANCHOR_EPS = 1e-6


@dataclass(frozen=True)
class Anchor:
    center: float
    width: float

    def __post_init__(self):
        if not 0.0 <= self.center <= 1.0:
            raise ValueError(f"anchor center {self.center} outside [0, 1]")
        if not 0.0 < self.width <= 1.0:
            raise ValueError(f"anchor width {self.width} outside (0, 1]")


@dataclass(frozen=True)
class MomentPrediction:
    start: float
    end: float
    score: float
    layer: int
    template: int


class TemplateSet(Module):
    """Learned template vectors plus their current anchors."""

    def __init__(self, templates: Tensor, anchors: list[Anchor], group_tag: str):
        if templates.shape[0] != len(anchors):
            raise ValueError("one anchor per template required")
        self.templates = templates
        self.anchors = anchors
        self.group_tag = group_tag


def init_templates_anchors(n_templates: int, d: int,
                           rng: np.random.Generator) -> TemplateSet:
    """Anchors tile the video uniformly so any ground truth of width >= 1/N_q
    overlaps at least one of them; templates start near zero."""
    if n_templates < 1:
        raise ValueError("need at least one template")
    templates = ad.parameter(rng.normal(0.0, 0.02, size=(n_templates, d)))
    anchors = [Anchor((k + 0.5) / n_templates, 1.0 / n_templates)
               for k in range(n_templates)]
    return TemplateSet(templates, anchors, "main")


def _interp_matrix(anchors: list[Anchor], n_bins: int, length: int) -> np.ndarray:
    """Sparse sampling matrix: rows are (template, bin) sample points inside
    each anchor span, interpolating on the fractional index grid t*(L-1)."""
    centers = np.array([a.center for a in anchors])[:, None]
    widths = np.array([a.width for a in anchors])[:, None]
    lo = np.clip(centers - widths / 2.0, 0.0, 1.0)
    hi = np.clip(centers + widths / 2.0, 0.0, 1.0)
    offsets = ((np.arange(n_bins) + 0.5) / n_bins)[None, :]
    xs = ((lo + offsets * (hi - lo)) * (length - 1)).reshape(-1)
    i0 = np.clip(np.floor(xs).astype(np.int64), 0, length - 1)
    i1 = np.minimum(i0 + 1, length - 1)
    frac = xs - i0
    rows = np.zeros((len(anchors) * n_bins, length))
    r = np.arange(rows.shape[0])
    np.add.at(rows, (r, i0), 1.0 - frac)
    np.add.at(rows, (r, i1), frac)
    return rows


def roi_extract(anchors: list[Anchor], scales: list[Tensor], n_bins: int,
                fuse: Linear) -> Tensor:
    """Pool each anchor's span from every scale by linear interpolation and
    fuse the concatenated bins into one vector per anchor. Anchors from
    several template groups may be passed flattened."""
    if n_bins < 1:
        raise ValueError("bins_per_scale must be >= 1")
    n_rows = len(anchors)
    pooled = []
    for scale in scales:
        interp = ad.constant(_interp_matrix(anchors, n_bins, scale.data.shape[0]))
        bins = interp @ scale                      # (rows * bins, d)
        pooled.append(ad.reshape(bins, (n_rows, n_bins * scale.data.shape[1])))
    return fuse(ad.concat(pooled, axis=1))


class AnchorHighlightAttention(Module):
    """Cross attention whose queries carry pooled anchor content, pushing
    weight toward video regions that resemble the current moment."""

    def __init__(self, d: int, n_heads: int, rng, dropout: float):
        self.attn = MultiHeadAttention(d, n_heads, rng, dropout)

    def __call__(self, moments: Tensor, anchor_content: Tensor,
                 video: Tensor, return_weights: bool = False):
        if moments.shape != anchor_content.shape:
            raise ad.ShapeMismatchError(
                "anchor_highlight_attention", moments.shape, anchor_content.shape)
        return self.attn(moments + anchor_content, video, video,
                         return_weights=return_weights)


def _logit(p: np.ndarray) -> np.ndarray:
    p = np.clip(p, ANCHOR_EPS, 1.0 - ANCHOR_EPS)
    return np.log(p / (1.0 - p))


def refine_anchor(anchor: Anchor, d_center: float, d_width: float) -> Anchor:
    """Additive update in sigmoid-logit space; output always lands in (0,1).
    Saturated float64 sigmoids are nudged back inside the open interval."""
    center = 1.0 / (1.0 + np.exp(-(d_center + _logit(np.float64(anchor.center)))))
    width = 1.0 / (1.0 + np.exp(-(d_width + _logit(np.float64(anchor.width)))))
    center = min(max(float(center), ANCHOR_EPS), 1.0 - ANCHOR_EPS)
    width = min(max(float(width), ANCHOR_EPS), 1.0 - ANCHOR_EPS)
    return Anchor(center, width)


def refine_anchor_batch(centers: np.ndarray, widths: np.ndarray,
                        d_centers: np.ndarray, d_widths: np.ndarray):
    """Vectorized refine_anchor over arrays; returns clamped (centers, widths)."""
    c = 1.0 / (1.0 + np.exp(-(d_centers + _logit(centers))))
    w = 1.0 / (1.0 + np.exp(-(d_widths + _logit(widths))))
    return (np.clip(c, ANCHOR_EPS, 1.0 - ANCHOR_EPS),
            np.clip(w, ANCHOR_EPS, 1.0 - ANCHOR_EPS))


def anchor_to_span(anchor: Anchor) -> tuple[float, float]:
    """(center, width) -> truncated (start, end) with 0 <= start <= end <= 1."""
    start = min(max(anchor.center - anchor.width / 2.0, 0.0), 1.0)
    end = min(max(anchor.center + anchor.width / 2.0, 0.0), 1.0)
    return start, end


@dataclass
class DecoderLayerOutput:
    """Differentiable per-layer predictions, stacked over template groups:
    every tensor is (G, N_q)."""

    centers: Tensor
    widths: Tensor
    starts: Tensor
    ends: Tensor
    scores: Tensor
    anchors: list       # per group: refined anchors fed to the next layer

    @property
    def n_groups(self) -> int:
        return self.starts.data.shape[0]

    def spans(self, group: int = 0) -> np.ndarray:
        return np.stack([self.starts.data[group], self.ends.data[group]], axis=1)

    def predictions(self, layer: int, group: int = 0) -> list[MomentPrediction]:
        return [MomentPrediction(float(s), float(e), float(o), layer, k)
                for k, (s, e, o) in enumerate(
                    zip(self.starts.data[group], self.ends.data[group],
                        self.scores.data[group]))]


class DecoderLayer(Module):
    def __init__(self, d: int, n_heads: int, n_bins: int, n_scales: int,
                 rng, dropout: float):
        self.n_bins = n_bins
        self.norm_self = LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, n_heads, rng, dropout)
        self.norm_cross = LayerNorm(d)
        self.roi_fuse = Linear(n_scales * n_bins * d, d, rng)
        self.highlight = AnchorHighlightAttention(d, n_heads, rng, dropout)
        self.norm_ff = LayerNorm(d)
        self.ff = FeedForward(d, 2 * d, d, rng, dropout)
        self.offset_head = FeedForward(d, d, 2, rng)
        self.score_head = FeedForward(d, d, 1, rng)
        self.drop = Dropout(dropout)
        # Zero final offset layer: anchors stay put until training moves them.
        self.offset_head.outer.weight.data[:] = 0.0
        self.offset_head.outer.bias.data[:] = 0.0

    def __call__(self, state: Tensor, anchors_per_group: list[list[Anchor]],
                 scales: list[Tensor], use_highlight: bool = True):
        """state is (G, N_q, d); groups share weights but never attend to
        each other (the group axis is batched, not mixed)."""
        g, n_q, d = state.data.shape
        h = self.norm_self(state)
        state = state + self.drop(self.self_attn(h, h, h))
        if use_highlight:
            flat = [a for group in anchors_per_group for a in group]
            content = ad.reshape(
                roi_extract(flat, scales, self.n_bins, self.roi_fuse), (g, n_q, d))
        else:
            content = ad.constant(np.zeros(state.data.shape))
        state = state + self.drop(
            self.highlight(self.norm_cross(state), content, scales[-1]))
        state = state + self.drop(self.ff(self.norm_ff(state)))
        offsets = self.offset_head(state)                       # (G, N_q, 2)
        score_logits = self.score_head(state)                   # (G, N_q, 1)
        return state, offsets, ad.sigmoid(ad.reshape(score_logits, (g, n_q)))


class MomentDecoder(Module):
    def __init__(self, d: int, n_heads: int, n_layers: int, n_bins: int,
                 n_scales: int, rng, dropout: float, use_highlight: bool = True):
        self.d_model = d
        self.use_highlight = use_highlight
        self.layers = [DecoderLayer(d, n_heads, n_bins, n_scales, rng, dropout)
                       for _ in range(n_layers)]

    def decode_groups(self, template_sets: list[TemplateSet],
                      scales: list[Tensor]) -> list[DecoderLayerOutput]:
        """One stacked pass over all template groups."""
        n_q = template_sets[0].templates.data.shape[0]
        g = len(template_sets)
        if g == 1:
            state = ad.reshape(template_sets[0].templates, (1, n_q, self.d_model))
        else:
            state = ad.concat([ad.reshape(ts.templates, (1, n_q, self.d_model))
                               for ts in template_sets], axis=0)
        anchors = [list(ts.anchors) for ts in template_sets]
        outputs = []
        for layer in self.layers:
            state, offsets, scores = layer(state, anchors, scales,
                                           self.use_highlight)
            prev_c = ad.constant(_logit(np.array(
                [[a.center for a in group] for group in anchors])))
            prev_w = ad.constant(_logit(np.array(
                [[a.width for a in group] for group in anchors])))
            key_c = (slice(None), slice(None), slice(0, 1))
            key_w = (slice(None), slice(None), slice(1, 2))
            centers = ad.sigmoid(
                ad.reshape(ad.tslice(offsets, key_c), (g, n_q)) + prev_c)
            widths = ad.sigmoid(
                ad.reshape(ad.tslice(offsets, key_w), (g, n_q)) + prev_w)
            starts = clamp01(centers - 0.5 * widths)
            ends = clamp01(centers + 0.5 * widths)
            # Next-layer anchors are detached; nudge off exact 0/1 so the
            # Anchor invariant and the next inverse-sigmoid stay valid.
            anchors = [
                [Anchor(min(max(float(c), ANCHOR_EPS), 1.0 - ANCHOR_EPS),
                        min(max(float(w), ANCHOR_EPS), 1.0))
                 for c, w in zip(centers.data[gi], widths.data[gi])]
                for gi in range(g)
            ]
            outputs.append(DecoderLayerOutput(centers, widths, starts, ends,
                                              scores, anchors))
        return outputs

    def decode(self, template_set: TemplateSet,
               scales: list[Tensor]) -> list[DecoderLayerOutput]:
        """Single-group convenience wrapper."""
        return self.decode_groups([template_set], scales)

    __call__ = decode
