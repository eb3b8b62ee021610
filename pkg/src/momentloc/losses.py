"""Training objectives: span focal loss, masked-word cross-entropy, positive
assignment by IoU, and the boundary (L1 + truncated-IoU focal) losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import absolute, clamp_range, log_softmax, power

PROB_FLOOR = 1e-7


@dataclass
class LossWeights:
    span: float = 1.0
    mask: float = 1.0
    iou: float = 1.0
    l1: float = 1.0
    truncation: float = 0.5      # IoU targets below this collapse to 0
    focal_gamma: float = 2.0

    def __post_init__(self):
        if min(self.span, self.mask, self.iou, self.l1) < 0:
            raise ValueError("loss weights must be nonnegative")
        if not 0.0 <= self.truncation < 1.0:
            raise ValueError("truncation threshold must be in [0, 1)")
        if self.focal_gamma < 0:
            raise ValueError("focal exponent must be nonnegative")


def span_loss(span_probs: Tensor, labels: np.ndarray, gamma: float = 2.0,
              printed_form: bool = False) -> Tensor:
    """Binary focal loss over per-segment within-moment probabilities.

    `printed_form` switches to the one-sided (log P * Y)(P - Y)^2 variant for
    study; the focal form is the training default.
    """
    labels = np.asarray(labels, dtype=np.float64)
    if span_probs.shape != labels.shape:
        raise ad.ShapeMismatchError("span_loss", span_probs.shape, labels.shape)
    p = clamp_range(span_probs, PROB_FLOOR, 1.0 - PROB_FLOOR)
    y = ad.constant(labels)
    if printed_form:
        diff = p - y
        return (ad.log(p) * y * diff * diff).mean()
    one = ad.constant(np.ones(labels.shape))
    pos = y * power(one - p, gamma) * ad.log(p)
    neg = (one - y) * power(p, gamma) * ad.log(one - p)
    return -(pos + neg).mean()


def masked_word_loss(word_logits: Tensor, target_ids) -> Tensor:
    """Mean cross-entropy at masked positions; zero when nothing is masked."""
    target_ids = np.asarray(target_ids, dtype=np.int64)
    if target_ids.size == 0:
        return ad.constant(np.zeros(()))
    n, vocab = word_logits.shape
    if n != target_ids.shape[0]:
        raise ad.ShapeMismatchError("masked_word_loss", word_logits.shape,
                                    target_ids.shape)
    if target_ids.min() < 0 or target_ids.max() >= vocab:
        raise IndexError(
            f"masked_word_loss: target id outside vocabulary of {vocab}")
    onehot = np.zeros((n, vocab))
    onehot[np.arange(n), target_ids] = 1.0
    picked = log_softmax(word_logits, axis=-1) * ad.constant(onehot)
    return ad.scalar_mul(picked.sum(), -1.0 / n)


def temporal_iou(span_a, span_b) -> float:
    """Intersection over union of two (start, end) intervals in [0, 1]."""
    (a_s, a_e), (b_s, b_e) = span_a, span_b
    if a_s > a_e or b_s > b_e:
        raise ValueError("spans must satisfy start <= end")
    inter = max(0.0, min(a_e, b_e) - max(a_s, b_s))
    union = (a_e - a_s) + (b_e - b_s) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def assign_positive(spans: np.ndarray, gt_span) -> int:
    """Index of the prediction with the largest IoU; ties -> lowest index."""
    if len(spans) < 1:
        raise ValueError("need at least one prediction")
    ious = np.array([temporal_iou(s, gt_span) for s in spans])
    return int(np.argmax(ious))


def truncated_iou(iou: float, index: int, positive_index: int,
                  threshold: float) -> float:
    """Score target: the positive gets 1, weak negatives collapse to 0."""
    if index == positive_index:
        return 1.0
    return 0.0 if iou < threshold else iou


def soft_focal(targets: np.ndarray, scores: Tensor, gamma: float) -> Tensor:
    """Quality-focal term for continuous targets t in [0,1] vs scores o:
    |t - o|^gamma * BCE(t, o), averaged over entries."""
    o = clamp_range(scores, PROB_FLOOR, 1.0 - PROB_FLOOR)
    t = ad.constant(np.asarray(targets, dtype=np.float64))
    one = ad.constant(np.ones(scores.shape))
    bce = -(t * ad.log(o) + (one - t) * ad.log(one - o))
    return (power(absolute(t - o), gamma) * bce).mean()


def boundary_losses(starts: Tensor, ends: Tensor, scores: Tensor, gt_span,
                    positive_index: int, weights: LossWeights):
    """L1 on the positive prediction's boundaries plus the truncated-IoU
    focal over all scores. Targets are computed from detached spans."""
    spans = np.stack([starts.data, ends.data], axis=1)
    targets = np.array([
        truncated_iou(temporal_iou(s, gt_span), k, positive_index, weights.truncation)
        for k, s in enumerate(spans)
    ])
    i = positive_index
    pos_start = ad.tslice(starts, (slice(i, i + 1),))
    pos_end = ad.tslice(ends, (slice(i, i + 1),))
    gt_s = ad.constant(np.array([gt_span[0]]))
    gt_e = ad.constant(np.array([gt_span[1]]))
    l1 = ad.scalar_mul((absolute(pos_start - gt_s) + absolute(pos_end - gt_e)).sum(), 0.5)
    iou_term = soft_focal(targets, scores, weights.focal_gamma)
    return l1, iou_term


def total_loss(span_term: Tensor, word_term: Tensor,
               boundary_terms_per_group, weights: LossWeights) -> Tensor:
    """Weighted sum per template group, layer terms summed, then the group
    losses are averaged."""
    groups = list(boundary_terms_per_group)
    if not groups:
        raise ValueError("at least one template group required")
    group_losses = []
    for layer_terms in groups:
        acc = weights.span * span_term + weights.mask * word_term
        for l1, iou_term in layer_terms:
            acc = acc + weights.iou * iou_term + weights.l1 * l1
        group_losses.append(acc)
    total = group_losses[0]
    for other in group_losses[1:]:
        total = total + other
    return ad.scalar_mul(total, 1.0 / len(group_losses))


def batched_iou(starts: np.ndarray, ends: np.ndarray, gt_span) -> np.ndarray:
    """Vectorized temporal_iou of many spans against one interval."""
    gs, ge = gt_span
    inter = np.maximum(0.0, np.minimum(ends, ge) - np.maximum(starts, gs))
    union = (ends - starts) + (ge - gs) - inter
    return np.where(union > 0.0, inter / np.maximum(union, 1e-300), 0.0)


def grouped_boundary_losses(starts: Tensor, ends: Tensor, scores: Tensor,
                            gt_span, weights: LossWeights):
    """Vectorized boundary losses over stacked groups: inputs are (G, N_q)
    tensors, outputs are (G,) tensors. Agrees with boundary_losses applied
    per group."""
    g, n_q = starts.data.shape
    ious = batched_iou(starts.data, ends.data, gt_span)
    positives = np.argmax(ious, axis=1)
    targets = np.where(ious < weights.truncation, 0.0, ious)
    pos_mask = np.zeros((g, n_q))
    pos_mask[np.arange(g), positives] = 1.0
    targets[np.arange(g), positives] = 1.0
    gt_s = ad.constant(np.full((g, n_q), gt_span[0]))
    gt_e = ad.constant(np.full((g, n_q), gt_span[1]))
    residual = absolute(starts - gt_s) + absolute(ends - gt_e)
    l1 = ad.scalar_mul((ad.constant(pos_mask) * residual).sum(axis=1), 0.5)

    o = clamp_range(scores, PROB_FLOOR, 1.0 - PROB_FLOOR)
    t = ad.constant(targets)
    one = ad.constant(np.ones((g, n_q)))
    bce = -(t * ad.log(o) + (one - t) * ad.log(one - o))
    iou_term = (power(absolute(t - o), weights.focal_gamma) * bce).mean(axis=1)
    return l1, iou_term


def grouped_total_loss(span_term: Tensor, word_term: Tensor,
                       per_layer_grouped, weights: LossWeights,
                       n_groups: int) -> Tensor:
    """Stacked-group counterpart of total_loss: per-layer (G,) terms summed,
    averaged over groups, plus the shared auxiliary terms."""
    acc = None
    for l1_vec, iou_vec in per_layer_grouped:
        term = weights.iou * iou_vec + weights.l1 * l1_vec
        acc = term if acc is None else acc + term
    boundary = acc.mean() if acc is not None else ad.constant(np.zeros(()))
    return weights.span * span_term + weights.mask * word_term + boundary


def span_labels(n_segments: int, gt_span) -> np.ndarray:
    """Per-segment binary targets: 1 where the segment center falls inside
    the ground-truth interval."""
    centers = (np.arange(n_segments) + 0.5) / n_segments
    return ((centers >= gt_span[0]) & (centers <= gt_span[1])).astype(np.float64)
