import numpy as np
import pytest

from mgfc import tensor as T
from mgfc.errors import ParameterError, ShapeError
from mgfc.fusion import (LayerFusionParams, QueryFusionParams,
                         aggregate_queries, fuse_layer_features, fuse_queries,
                         token_to_query)
from mgfc.tuners import FeatureMap


def fmap(arr, h, w):
    return FeatureMap(T.Tensor(arr), h, w)


def qfm(c, c_q, seed=0, scale=0.5):
    return QueryFusionParams.create(c, c_q, np.random.default_rng(seed), scale)


class TestFuseLayerFeatures:
    def test_block_selection(self):
        # w_lin that copies only the middle (second branch) block
        c = 3
        w = np.zeros((3 * c, c))
        w[c:2 * c] = np.eye(c)
        p = LayerFusionParams(w_lin=T.Tensor(w), b_lin=T.zeros(1, c))
        rng = np.random.default_rng(0)
        a, b, d = (rng.normal(size=(4, c)) for _ in range(3))
        out = fuse_layer_features(fmap(a, 2, 2), fmap(b, 2, 2), fmap(d, 2, 2), p)
        assert np.allclose(out.values.data, b, atol=1e-6)

    def test_bias_only(self):
        c = 2
        bias = np.array([[5.0, -3.0]])
        p = LayerFusionParams(w_lin=T.zeros(3 * c, c), b_lin=T.Tensor(bias))
        out = fuse_layer_features(fmap(np.ones((4, c)), 2, 2),
                                  fmap(np.ones((4, c)), 2, 2),
                                  fmap(np.ones((4, c)), 2, 2), p)
        assert np.allclose(out.values.data, np.tile(bias, (4, 1)))

    def test_matches_straight_line_oracle(self):
        with T.precision(64):
            rng = np.random.default_rng(1)
            c, d = 4, 5
            p = LayerFusionParams.create(c, d, rng)
            a, b, f = (rng.normal(size=(6, c)) for _ in range(3))
            out = fuse_layer_features(fmap(a, 2, 3), fmap(b, 2, 3), fmap(f, 2, 3), p)
            want = np.hstack([a, b, f]) @ p.w_lin.data + p.b_lin.data
            assert np.abs(out.values.data - want).max() < 1e-9

    def test_identity_leaning_init_near_branch_mean(self):
        rng = np.random.default_rng(2)
        c = 8
        p = LayerFusionParams.create(c, c, rng, scale=0.0)
        a, b, f = (rng.normal(size=(5, c)) for _ in range(3))
        out = fuse_layer_features(fmap(a, 1, 5), fmap(b, 1, 5), fmap(f, 1, 5), p)
        assert np.abs(out.values.data - (a + b + f) / 3).max() < 1e-6

    def test_shape_mismatch_rejected(self):
        p = LayerFusionParams.create(3, 3, np.random.default_rng(0))
        with pytest.raises(ShapeError):
            fuse_layer_features(fmap(np.ones((4, 3)), 2, 2),
                                fmap(np.ones((4, 3)), 2, 2),
                                fmap(np.ones((4, 2)), 2, 2), p)


class TestFuseQueries:
    def test_zero_fine_token_is_coarse_identity(self):
        # with t_f = 0 the attention payload is 0, so the residual dominates
        rng = np.random.default_rng(3)
        c, m = 4, 3
        t_c = T.Tensor(rng.normal(size=(m, c)))
        t_m = T.Tensor(rng.normal(size=(m, c)))
        out = fuse_queries(t_c, t_m, T.zeros(m, c), qfm(c, c, 3))
        assert np.allclose(out.data, t_c.data, atol=1e-6)

    def test_single_token_is_sum(self):
        # m = 1: softmax over one key is 1, so output = t_c + t_f exactly
        rng = np.random.default_rng(4)
        c = 5
        t_c = T.Tensor(rng.normal(size=(1, c)))
        t_m = T.Tensor(rng.normal(size=(1, c)))
        t_f = T.Tensor(rng.normal(size=(1, c)))
        out = fuse_queries(t_c, t_m, t_f, qfm(c, c, 4))
        assert np.abs(out.data - (t_c.data + t_f.data)).max() < 1e-6

    def test_matches_straight_line_oracle(self):
        with T.precision(64):
            rng = np.random.default_rng(5)
            c, m = 4, 6
            p = qfm(c, c, 5)
            t_c, t_m, t_f = (rng.normal(size=(m, c)) for _ in range(3))
            out = fuse_queries(T.Tensor(t_c), T.Tensor(t_m), T.Tensor(t_f), p)
            scores = (np.hstack([t_c, t_m]) @ p.w_q6.data) @ t_f.T / np.sqrt(c)
            e = np.exp(scores - scores.max(axis=1, keepdims=True))
            want = t_c + (e / e.sum(axis=1, keepdims=True)) @ t_f
            assert np.abs(out.data - want).max() < 1e-9

    def test_residual_offset_in_fine_hull(self):
        rng = np.random.default_rng(6)
        c, m = 3, 5
        t_c, t_m, t_f = (T.Tensor(rng.normal(size=(m, c))) for _ in range(3))
        out = fuse_queries(t_c, t_m, t_f, qfm(c, c, 6))
        offset = out.data - t_c.data
        lo = t_f.data.min(axis=0) - 1e-6
        hi = t_f.data.max(axis=0) + 1e-6
        assert (offset >= lo).all() and (offset <= hi).all()


class TestTokenToQuery:
    def test_zero_weights_give_bias(self):
        c, c_q = 3, 4
        p = qfm(c, c_q, 0, scale=0.0)
        p.mlp_b2 = T.Tensor(np.array([[1.0, 2.0, 3.0, 4.0]]))
        out = token_to_query(T.Tensor(np.random.default_rng(0).normal(size=(5, c))), p)
        assert np.allclose(out.data, np.tile(p.mlp_b2.data, (5, 1)))

    def test_matches_straight_line_oracle(self):
        with T.precision(64):
            rng = np.random.default_rng(7)
            c, c_q, m = 4, 3, 5
            p = qfm(c, c_q, 7)
            t = rng.normal(size=(m, c))
            out = token_to_query(T.Tensor(t), p)
            hidden = np.maximum(t @ p.mlp_w1.data + p.mlp_b1.data, 0.0)
            want = hidden @ p.mlp_w2.data + p.mlp_b2.data
            assert np.abs(out.data - want).max() < 1e-9


class TestAggregateQueries:
    def test_single_layer_collapses(self):
        # with one layer, max = mean = last, so the concat is [q, q, q]
        rng = np.random.default_rng(8)
        c_q, m = 3, 4
        p = qfm(c_q, c_q, 8)
        q = rng.normal(size=(m, c_q))
        out = aggregate_queries([T.Tensor(q)], p)
        want = np.hstack([q, q, q]) @ p.w_q.data + p.b_q.data
        assert np.abs(out.data - want).max() < 1e-6

    def test_matches_per_element_loop_oracle(self):
        with T.precision(64):
            rng = np.random.default_rng(9)
            c_q, m, layers = 3, 4, 5
            p = qfm(c_q, c_q, 9)
            qs = [rng.normal(size=(m, c_q)) for _ in range(layers)]
            out = aggregate_queries([T.Tensor(q) for q in qs], p)
            q_max = np.empty((m, c_q))
            q_avg = np.empty((m, c_q))
            for i in range(m):
                for j in range(c_q):
                    col = [q[i, j] for q in qs]
                    q_max[i, j] = max(col)
                    q_avg[i, j] = sum(col) / layers
            want = np.hstack([q_max, q_avg, qs[-1]]) @ p.w_q.data + p.b_q.data
            assert np.abs(out.data - want).max() < 1e-9

    def test_permutation_of_earlier_layers_invariant(self):
        # max and mean are symmetric; only the last layer is order-sensitive
        rng = np.random.default_rng(10)
        p = qfm(3, 3, 10)
        qs = [T.Tensor(rng.normal(size=(4, 3))) for _ in range(4)]
        base = aggregate_queries(qs, p)
        shuffled = aggregate_queries([qs[2], qs[0], qs[1], qs[3]], p)
        assert np.allclose(base.data, shuffled.data, atol=1e-6)

    def test_empty_rejected(self):
        with pytest.raises(ParameterError):
            aggregate_queries([], qfm(3, 3))

    def test_gradient_reaches_every_layer(self):
        qs = [T.Tensor(np.random.default_rng(s).normal(size=(3, 2)),
                       requires_grad=True) for s in range(3)]
        out = aggregate_queries(qs, qfm(2, 2, 11))
        T.tsum(out * out).backward()
        for q in qs:
            assert q.grad is not None
            assert np.abs(q.grad).max() > 0

    def test_gradient_matches_finite_differences(self):
        with T.precision(64):
            rng = np.random.default_rng(12)
            p = qfm(3, 3, 12)
            proj = T.Tensor(rng.normal(size=(4, 3)))
            inputs = {f"q{i}": T.Tensor(rng.normal(size=(4, 3)),
                                        requires_grad=True) for i in range(3)}

            def run(q0, q1, q2):
                return T.tsum(aggregate_queries([q0, q1, q2], p) * proj)
            report = T.finite_diff_check(run, inputs, tol=1e-4)
            assert report.passed
