"""The full grounding model: encoder, decoder, template groups, and the loss
assembly for one sample."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import TrainConfig
from .data import Sample
from .decoder import (
    ANCHOR_EPS,
    Anchor,
    MomentDecoder,
    MomentPrediction,
    TemplateSet,
    init_templates_anchors,
)
from .encoder import Encoder, EncoderConfig, mask_words
from .losses import (
    grouped_boundary_losses,
    grouped_total_loss,
    masked_word_loss,
    span_labels,
    span_loss,
)
from .nn import Module


def _logit(p: float) -> float:
    p = min(max(p, ANCHOR_EPS), 1.0 - ANCHOR_EPS)
    return float(np.log(p / (1.0 - p)))


def jittered_anchor(gt_span, rng: np.random.Generator,
                    amplitude: float = 0.1) -> Anchor:
    """Ground-truth anchor with logit-space noise proportional to its width."""
    center = 0.5 * (gt_span[0] + gt_span[1])
    width = max(gt_span[1] - gt_span[0], ANCHOR_EPS)
    scale = amplitude * width
    c = 1.0 / (1.0 + np.exp(-(_logit(center) + rng.uniform(-scale, scale))))
    w = 1.0 / (1.0 + np.exp(-(_logit(width) + rng.uniform(-scale, scale))))
    return Anchor(float(np.clip(c, ANCHOR_EPS, 1 - ANCHOR_EPS)),
                  float(np.clip(w, ANCHOR_EPS, 1.0)))


class GroundingModel(Module):
    def __init__(self, cfg: TrainConfig, vocab_size: int, d_video: int,
                 rng: np.random.Generator):
        self.cfg = cfg
        enc_cfg = EncoderConfig(
            d_model=cfg.d_model,
            n_heads=cfg.n_heads,
            vocab_size=vocab_size,
            d_video_in=d_video,
            layer_plan=cfg.layer_plan,
            reduction=cfg.reduction,
            merge_after=cfg.merge_after,
            merge_kernel=cfg.merge_kernel,
            merge_stride=cfg.merge_stride,
            scale_indices=cfg.scale_indices,
            mask_rate=cfg.mask_rate,
            dropout=cfg.dropout,
            block_variant=cfg.block_variant,
            use_query_fusion=cfg.use_query_fusion,
        )
        self.encoder = Encoder(enc_cfg, rng)
        self.decoder = MomentDecoder(
            cfg.d_model, cfg.n_heads, cfg.n_decoder_layers, cfg.bins_per_scale,
            n_scales=len(enc_cfg.scale_indices), rng=rng, dropout=cfg.dropout,
            use_highlight=cfg.use_anchor_highlight)
        self.main_group = init_templates_anchors(cfg.n_templates, cfg.d_model, rng)
        self.denoise_templates = [
            ad.parameter(rng.normal(0.0, 0.02, size=(cfg.n_templates, cfg.d_model)))
            for _ in range(cfg.denoise_groups)
        ]
        self.weights = cfg.loss_weights()

    def forward_train(self, sample: Sample, mask_rng: np.random.Generator,
                      noise_rng: np.random.Generator) -> Tensor:
        gt = sample.gt.as_tuple()
        token_ids = np.asarray(sample.query, dtype=np.int64)
        masked_ids, positions = mask_words(token_ids, self.cfg.mask_rate, mask_rng)
        enc = self.encoder.encode(sample.features.astype(np.float64), masked_ids)

        n_last = enc.span_logits.shape[0]
        span_term = span_loss(ad.sigmoid(enc.span_logits), span_labels(n_last, gt),
                              self.weights.focal_gamma)
        if positions.size:
            logits = ad.tslice(enc.word_logits, (positions,))
            word_term = masked_word_loss(logits, token_ids[positions])
        else:
            word_term = ad.constant(np.zeros(()))

        template_sets = [self.main_group]
        for g, templates in enumerate(self.denoise_templates):
            anchors = [jittered_anchor(gt, noise_rng)
                       for _ in range(self.cfg.n_templates)]
            template_sets.append(TemplateSet(templates, anchors, f"denoise{g}"))
        layer_outputs = self.decoder.decode_groups(template_sets, enc.scales)
        per_layer = [grouped_boundary_losses(out.starts, out.ends, out.scores,
                                             gt, self.weights)
                     for out in layer_outputs]
        return grouped_total_loss(span_term, word_term, per_layer, self.weights,
                                  len(template_sets))

    def forward_infer(self, sample: Sample) -> list[MomentPrediction]:
        """Main group only, last decoder layer only, ranked by score."""
        enc = self.encoder.encode(sample.features.astype(np.float64),
                                  np.asarray(sample.query, dtype=np.int64))
        layer_outputs = self.decoder.decode(self.main_group, enc.scales)
        last = layer_outputs[-1]
        preds = last.predictions(layer=len(layer_outputs) - 1, group=0)
        order = np.argsort(-last.scores.data[0], kind="stable")
        return [preds[i] for i in order]
