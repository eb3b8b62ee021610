"""Context-query fusion against explicit-loop oracles and edge cases."""

import numpy as np
import pytest

from momentloc import autodiff as ad
from momentloc.autodiff import Tensor, finite_difference_check
from momentloc.vqi import (
    CqaWeights,
    additive_pool,
    context_query_attend,
    fuse_video_with_query,
    integrate,
    similarity_matrix,
)


def softmax_np(a, axis):
    e = np.exp(a - a.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def cqa_loop_oracle(X, Y, weights):
    """Direct numpy transcription of the fusion chain."""
    S = X.T @ weights.bilinear.data @ Y
    S_r = softmax_np(S, axis=1)
    S_c = softmax_np(S, axis=0)
    A_xy = S_r @ Y.T
    A_yx = S_r @ S_c.T @ X.T
    feats = np.concatenate([X.T, A_xy, X.T * A_xy, X.T * A_yx], axis=1)
    inner = np.maximum(feats @ weights.ffn.inner.weight.data + weights.ffn.inner.bias.data, 0)
    return (inner @ weights.ffn.outer.weight.data + weights.ffn.outer.bias.data).T


class TestSimilarityMatrix:
    def test_identity_weight_unit_vectors(self):
        e0 = np.zeros((3, 1))
        e0[0] = 1.0
        out = similarity_matrix(Tensor(e0), Tensor(e0), Tensor(np.eye(3)))
        np.testing.assert_array_equal(out.data, [[1.0]])

    def test_zero_weight_zero_similarity(self):
        rng = np.random.default_rng(0)
        out = similarity_matrix(Tensor(rng.standard_normal((3, 2))),
                                Tensor(rng.standard_normal((3, 4))),
                                Tensor(np.zeros((3, 3))))
        np.testing.assert_array_equal(out.data, np.zeros((2, 4)))

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_triple_loop(self, seed):
        rng = np.random.default_rng(seed)
        X, Y, W = (rng.standard_normal(s) for s in ((3, 2), (3, 2), (3, 3)))
        out = similarity_matrix(Tensor(X), Tensor(Y), Tensor(W))
        ref = np.zeros((2, 2))
        for i in range(2):
            for j in range(2):
                for k in range(3):
                    for m in range(3):
                        ref[i, j] += X[k, i] * W[k, m] * Y[m, j]
        np.testing.assert_allclose(out.data, ref, atol=1e-12)

    def test_dim_mismatch(self):
        with pytest.raises(ad.ShapeMismatchError):
            similarity_matrix(Tensor(np.ones((3, 2))), Tensor(np.ones((4, 2))),
                              Tensor(np.eye(3)))


class TestContextQueryAttend:
    def test_single_y_stacks_that_row(self):
        rng = np.random.default_rng(1)
        w = CqaWeights(4, rng)
        X = rng.standard_normal((4, 3))
        Y = rng.standard_normal((4, 1))
        sim = similarity_matrix(Tensor(X), Tensor(Y), w.bilinear)
        row_norm = ad.softmax(sim, axis=1)
        np.testing.assert_allclose(row_norm.data, np.ones((3, 1)), atol=1e-15)
        out = context_query_attend(Tensor(X), Tensor(Y), w)
        np.testing.assert_allclose(out.data, cqa_loop_oracle(X, Y, w), atol=1e-10)

    def test_single_x_returns_x_for_reverse_path(self):
        # With Nx == 1 the column softmax is all-ones, so the y-to-x attended
        # features collapse to x itself.
        rng = np.random.default_rng(2)
        w = CqaWeights(4, rng)
        X, Y = rng.standard_normal((4, 1)), rng.standard_normal((4, 3))
        sim = similarity_matrix(Tensor(X), Tensor(Y), w.bilinear)
        row_norm = ad.softmax(sim, axis=1)
        col_norm = ad.softmax(sim, axis=0)
        y_to_x = (row_norm @ ad.transpose(col_norm) @ ad.transpose(Tensor(X)))
        np.testing.assert_allclose(y_to_x.data, X.T, atol=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        w = CqaWeights(5, rng)
        X, Y = rng.standard_normal((5, 4)), rng.standard_normal((5, 3))
        out = context_query_attend(Tensor(X), Tensor(Y), w)
        np.testing.assert_allclose(out.data, cqa_loop_oracle(X, Y, w), atol=1e-10)

    def test_softmax_normalizations(self):
        rng = np.random.default_rng(3)
        S = rng.standard_normal((6, 5)) * 4
        np.testing.assert_allclose(softmax_np(S, 1).sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(softmax_np(S, 0).sum(axis=0), 1.0, atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_position_permutation_equivariance(self, seed):
        rng = np.random.default_rng(seed)
        w = CqaWeights(4, rng)
        X, Y = rng.standard_normal((4, 5)), rng.standard_normal((4, 3))
        perm = rng.permutation(5)
        out = context_query_attend(Tensor(X), Tensor(Y), w)
        out_perm = context_query_attend(Tensor(X[:, perm]), Tensor(Y), w)
        np.testing.assert_allclose(out_perm.data, out.data[:, perm], atol=1e-12)


class TestAdditivePool:
    def test_single_token_is_identity(self):
        rng = np.random.default_rng(4)
        q = rng.standard_normal((3, 1))
        out = additive_pool(Tensor(q), Tensor(rng.standard_normal((1, 3))))
        np.testing.assert_allclose(out.data, q[:, 0], atol=1e-15)

    def test_zero_scores_give_column_mean(self):
        rng = np.random.default_rng(5)
        q = rng.standard_normal((3, 4))
        out = additive_pool(Tensor(q), Tensor(np.zeros((1, 3))))
        np.testing.assert_allclose(out.data, q.mean(axis=1), atol=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_loop(self, seed):
        rng = np.random.default_rng(seed)
        q, wa = rng.standard_normal((3, 4)), rng.standard_normal((1, 3))
        out = additive_pool(Tensor(q), Tensor(wa))
        alpha = softmax_np((wa @ q)[0], axis=-1)
        ref = sum(alpha[i] * q[:, i] for i in range(4))
        np.testing.assert_allclose(out.data, ref, atol=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            additive_pool(Tensor(np.ones((3, 0))), Tensor(np.zeros((1, 3))))


class TestIntegrate:
    def make_fuse(self, d, weight):
        rng = np.random.default_rng(0)
        from momentloc.nn import Linear
        fuse = Linear(2 * d, d, rng)
        fuse.weight.data[:] = weight.T  # Linear maps rows; spec weight is (d, 2d)
        fuse.bias.data[:] = 0.0
        return fuse

    def test_projection_identity_keeps_video(self):
        d = 3
        rng = np.random.default_rng(6)
        V, q = rng.standard_normal((d, 4)), rng.standard_normal(d)
        fuse = self.make_fuse(d, np.concatenate([np.eye(d), np.zeros((d, d))], axis=1))
        out = integrate(Tensor(V), Tensor(q), fuse)
        np.testing.assert_allclose(out.data, V, atol=1e-12)

    def test_projection_selects_sentence(self):
        d = 3
        rng = np.random.default_rng(7)
        V, q = rng.standard_normal((d, 4)), rng.standard_normal(d)
        fuse = self.make_fuse(d, np.concatenate([np.zeros((d, d)), np.eye(d)], axis=1))
        out = integrate(Tensor(V), Tensor(q), fuse)
        for col in out.data.T:
            np.testing.assert_allclose(col, q, atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_loop(self, seed):
        d = 3
        rng = np.random.default_rng(seed)
        V, q = rng.standard_normal((d, 4)), rng.standard_normal(d)
        W, b = rng.standard_normal((d, 2 * d)), rng.standard_normal(d)
        fuse = self.make_fuse(d, W)
        fuse.bias.data[:] = b
        out = integrate(Tensor(V), Tensor(q), fuse)
        ref = np.stack([W @ np.concatenate([V[:, i], q]) + b for i in range(4)], axis=1)
        np.testing.assert_allclose(out.data, ref, atol=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_full_pipeline_gradients(seed):
    rng = np.random.default_rng(seed)
    vw, qw = CqaWeights(4, rng), CqaWeights(4, rng)
    query = Tensor(rng.standard_normal((4, 3)))
    video = Tensor(rng.standard_normal((4, 5)), requires_grad=True)

    def f(v):
        out = fuse_video_with_query(v, query, vw, qw)
        return (out * out).sum()

    report = finite_difference_check(f, video)
    assert report.passed, str(report)
