"""Video-query integration: bilinear context-query attention, additive
sentence pooling, and the fused joint representation.

Sequences here are column-major (features x positions), matching how the
fusion output feeds per-position heads.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import FeedForward, Linear, Module


class CqaWeights(Module):
    """Learned weights for one direction of context-query fusion."""

    def __init__(self, d: int, rng: np.random.Generator):
        self.d = d
        self.bilinear = ad.parameter(rng.standard_normal((d, d)) / np.sqrt(d))
        self.pool_score = ad.parameter(rng.standard_normal((1, d)) / np.sqrt(d))
        self.fuse = Linear(2 * d, d, rng)
        self.ffn = FeedForward(4 * d, d, d, rng)


def similarity_matrix(x_seq: Tensor, y_seq: Tensor, bilinear: Tensor) -> Tensor:
    """Pairwise bilinear similarities; x_seq (d, Nx), y_seq (d, Ny) -> (Nx, Ny)."""
    if x_seq.shape[0] != y_seq.shape[0] or bilinear.shape != (x_seq.shape[0],) * 2:
        raise ad.ShapeMismatchError("similarity_matrix", x_seq.shape, y_seq.shape)
    return ad.transpose(x_seq) @ bilinear @ y_seq


def context_query_attend(x_seq: Tensor, y_seq: Tensor, weights: CqaWeights) -> Tensor:
    """Fuse y into x via row/column-normalized bilinear attention.

    Returns the fused sequence with x's shape (d, Nx).
    """
    sim = similarity_matrix(x_seq, y_seq, weights.bilinear)
    row_norm = ad.softmax(sim, axis=1)
    col_norm = ad.softmax(sim, axis=0)
    x_to_y = row_norm @ ad.transpose(y_seq)                    # (Nx, d)
    y_to_x = row_norm @ ad.transpose(col_norm) @ ad.transpose(x_seq)
    x_rows = ad.transpose(x_seq)
    fused = ad.concat([x_rows, x_to_y, x_rows * x_to_y, x_rows * y_to_x], axis=1)
    return ad.transpose(weights.ffn(fused))


def additive_pool(token_seq: Tensor, pool_score: Tensor) -> Tensor:
    """Collapse (d, M) token features into one d-vector by learned attention."""
    if token_seq.ndim != 2 or token_seq.shape[1] < 1:
        raise ValueError(f"additive_pool needs (d, M>=1), got {token_seq.shape}")
    scores = pool_score @ token_seq                            # (1, M)
    alpha = ad.softmax(scores, axis=1)
    return ad.reshape(token_seq @ ad.transpose(alpha), (token_seq.shape[0],))


def integrate(video_seq: Tensor, sentence: Tensor, fuse: Linear) -> Tensor:
    """Append the sentence vector to every video column and project back to d."""
    d, n = video_seq.shape
    if sentence.shape != (d,):
        raise ad.ShapeMismatchError("integrate", video_seq.shape, sentence.shape)
    tiled = ad.reshape(sentence, (d, 1)) @ ad.constant(np.ones((1, n)))
    stacked = ad.concat([video_seq, tiled], axis=0)            # (2d, n)
    return ad.transpose(fuse(ad.transpose(stacked)))


def fuse_video_with_query(video_seq: Tensor, query_seq: Tensor,
                          video_weights: CqaWeights,
                          query_weights: CqaWeights) -> Tensor:
    """Full pipeline: query-aware video, video-aware query, pooled sentence,
    and the final per-position fusion. Shapes are column-major (d, N)/(d, M)."""
    query_aware_video = context_query_attend(video_seq, query_seq, video_weights)
    video_aware_query = context_query_attend(query_seq, video_seq, query_weights)
    sentence = additive_pool(video_aware_query, video_weights.pool_score)
    return integrate(query_aware_video, sentence, video_weights.fuse)
