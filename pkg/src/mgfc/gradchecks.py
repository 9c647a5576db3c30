"""Finite-difference verification suite covering every differentiable
operation and each composed forward, run in 64-bit mode."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .cluster import ClusterAssignment, cluster_instance_norm
from .fusion import (LayerFusionParams, QueryFusionParams, aggregate_queries,
                     fuse_layer_features, fuse_queries, token_to_query)
from .seghead import HeadParams, cross_entropy, predict_pixel_logits
from .tuners import (FeatureMap, TunerParams, cgt_forward, fgt_forward,
                     mgt_forward, text_embed, token_calibrate)

# tiny default shapes: c=8, m=4, HW=16
C, M, H, W = 8, 4, 4, 4
HW = H * W


def _corrupted_matmul(a: T.Tensor, b: T.Tensor) -> T.Tensor:
    # test hook: deliberately wrong backward rule
    out = T.Tensor(a.data @ b.data, _parents=(a, b))

    def bwd(g):
        if a.requires_grad:
            a._accum_grad(1.01 * (g @ b.data.T))
        if b.requires_grad:
            b._accum_grad(a.data.T @ g)
    out._backward = bwd
    return out


def _weighted_sum(out: T.Tensor) -> T.Tensor:
    # fixed random projection to a scalar so no gradient component is masked;
    # freshly seeded per call so repeated evaluations stay bit-identical
    r = T.Tensor(np.random.default_rng(12345).normal(0.0, 1.0, out.data.shape))
    return T.tsum(out * r)


def build_checks(seed: int = 0, corrupt: str | None = None) -> dict:
    """Named scalar-valued functions with their differentiable inputs."""
    rng = np.random.default_rng(seed)

    def t(*dims, positive=False, grad=True):
        a = rng.normal(0.0, 1.0, dims)
        if positive:
            a = np.abs(a) + 0.5
        return T.Tensor(a, requires_grad=grad)

    mm = _corrupted_matmul if corrupt == "matmul" else T.matmul
    checks: dict[str, tuple] = {}

    def register(name, fn, **inputs):
        checks[name] = (fn, inputs)

    register("matmul", lambda a, b: _weighted_sum(mm(a, b)),
             a=t(3, 5), b=t(5, 2))
    register("add_row_broadcast", lambda a, b: _weighted_sum(a + b),
             a=t(4, 3), b=t(1, 3))
    register("sub", lambda a, b: _weighted_sum(a - b), a=t(4, 3), b=t(4, 3))
    register("mul", lambda a, b: _weighted_sum(a * b), a=t(4, 3), b=t(4, 3))
    register("div_col_broadcast", lambda a, b: _weighted_sum(a / b),
             a=t(4, 3), b=t(4, 1, positive=True))
    register("sqrt", lambda a: _weighted_sum(T.sqrt(a)), a=t(4, 3, positive=True))
    register("relu", lambda a: _weighted_sum(T.relu(a)), a=t(4, 3))
    register("sigmoid", lambda a: _weighted_sum(T.sigmoid(a)), a=t(4, 3))
    register("log", lambda a: _weighted_sum(T.log(a)), a=t(4, 3, positive=True))
    register("transpose", lambda a: _weighted_sum(a.T), a=t(3, 5))
    register("reshape", lambda a: _weighted_sum(T.reshape(a, 5, 3)), a=t(3, 5))
    register("concat", lambda a, b: _weighted_sum(T.concat([a, b], axis=1)),
             a=t(4, 3), b=t(4, 2))
    register("softmax_rows", lambda a: _weighted_sum(T.softmax_rows(a)),
             a=t(4, 5))
    register("log_softmax_rows",
             lambda a: _weighted_sum(T.log_softmax_rows(a)), a=t(4, 5))
    register("mean_axis0", lambda a: _weighted_sum(T.mean_axis0(a)), a=t(6, 3))
    register("mean_axis1", lambda a: _weighted_sum(T.mean_axis1(a)), a=t(6, 3))
    register("max_axis0",
             lambda a: T.tsum(T.max_axis0(T.stack([a]))), a=t(4, 3))
    register("select_scatter",
             lambda a: _weighted_sum(
                 T.scatter_rows(T.select_rows(a, np.array([0, 2, 3])),
                                np.array([1, 0, 4]), 6)),
             a=t(6, 3))

    # composed forwards (Eqs. 1-6, head, loss)
    fixed_f = FeatureMap(t(HW, C, grad=False), H, W)
    assignment = ClusterAssignment(labels=np.arange(HW) % 3, num_clusters=3,
                                   method="fixed")
    register("cluster_instance_norm",
             lambda f: _weighted_sum(cluster_instance_norm(f, assignment)),
             f=t(HW, C))

    def calib_inputs():
        return dict(f=t(HW, C), token=t(M, C), w1=t(C, C), b1=t(1, C),
                    w2=t(C, C), b2=t(1, C))

    def run_calibrate(f, token, w1, b1, w2, b2):
        fmap = FeatureMap(f, H, W)
        out, _ = token_calibrate(fmap, TunerParams(token, w1, b1, w2, b2))
        return _weighted_sum(out.values)
    register("token_calibrate", run_calibrate, **calib_inputs())

    def run_cgt(token, w1, b1, w2, b2):
        out = cgt_forward(fixed_f, TunerParams(token, w1, b1, w2, b2),
                          method="kmeans", k=2, seed=seed)
        return _weighted_sum(out.values)
    register("cgt_forward", run_cgt, token=t(M, C), w1=t(C, C), b1=t(1, C),
             w2=t(C, C), b2=t(1, C))

    text = text_embed(["a", "b", "c"], C, seed=seed)

    def run_mgt(f, token, w1, b1, w2, b2):
        out = mgt_forward(FeatureMap(f, H, W), text,
                          TunerParams(token, w1, b1, w2, b2))
        return _weighted_sum(out.values)
    register("mgt_forward", run_mgt, **calib_inputs())

    def run_fgt(f, token, w1, b1, w2, b2):
        out = fgt_forward(FeatureMap(f, H, W),
                          TunerParams(token, w1, b1, w2, b2))
        return _weighted_sum(out.values)
    register("fgt_forward", run_fgt, **calib_inputs())

    def run_fuse_layer(fc, fm, ff, w, b):
        out = fuse_layer_features(FeatureMap(fc, H, W), FeatureMap(fm, H, W),
                                  FeatureMap(ff, H, W),
                                  LayerFusionParams(w, b))
        return _weighted_sum(out.values)
    register("fuse_layer_features", run_fuse_layer,
             fc=t(HW, C), fm=t(HW, C), ff=t(HW, C), w=t(3 * C, C), b=t(1, C))

    # frozen filler params for the QFM pieces not under test in each check
    frozen_qfm = QueryFusionParams(
        w_q6=t(2 * C, C, grad=False),
        mlp_w1=t(C, C, grad=False), mlp_b1=t(1, C, grad=False),
        mlp_w2=t(C, C, grad=False), mlp_b2=t(1, C, grad=False),
        w_q=t(3 * C, C, grad=False), b_q=t(1, C, grad=False))

    def run_fuse_queries(tc, tm, tf, w_q6):
        p = QueryFusionParams(w_q6, frozen_qfm.mlp_w1, frozen_qfm.mlp_b1,
                              frozen_qfm.mlp_w2, frozen_qfm.mlp_b2,
                              frozen_qfm.w_q, frozen_qfm.b_q)
        return _weighted_sum(fuse_queries(tc, tm, tf, p))
    register("fuse_queries", run_fuse_queries,
             tc=t(M, C), tm=t(M, C), tf=t(M, C), w_q6=t(2 * C, C))

    def run_token_to_query(tf, mw1, mb1, mw2, mb2):
        p = QueryFusionParams(frozen_qfm.w_q6, mw1, mb1, mw2, mb2,
                              frozen_qfm.w_q, frozen_qfm.b_q)
        return _weighted_sum(token_to_query(tf, p))
    register("token_to_query", run_token_to_query,
             tf=t(M, C), mw1=t(C, C), mb1=t(1, C), mw2=t(C, C), mb2=t(1, C))

    def run_aggregate(q1, q2, w_q, b_q):
        p = QueryFusionParams(frozen_qfm.w_q6, frozen_qfm.mlp_w1,
                              frozen_qfm.mlp_b1, frozen_qfm.mlp_w2,
                              frozen_qfm.mlp_b2, w_q, b_q)
        return _weighted_sum(aggregate_queries([q1, q2], p))
    register("aggregate_queries", run_aggregate,
             q1=t(M, C), q2=t(M, C), w_q=t(3 * C, C), b_q=t(1, C))

    def run_head(q, f, w_cls, b_cls):
        out = predict_pixel_logits(q, FeatureMap(f, H, W),
                                   HeadParams(w_cls, b_cls))
        return _weighted_sum(out)
    register("predict_pixel_logits", run_head,
             q=t(M, C), f=t(HW, C), w_cls=t(C, 4), b_cls=t(1, 4))

    ce_labels = np.random.default_rng(seed + 9).integers(0, 4, HW)
    register("cross_entropy", lambda x: cross_entropy(x, ce_labels),
             x=t(HW, 4))
    return checks


def run_suite(seeds=(0, 1, 2, 3, 4), tol: float = 1e-3, h: float = 1e-5,
              corrupt: str | None = None) -> list[tuple[str, float, bool]]:
    """Run every check over the given seeds; returns (name, worst error,
    passed) per operation."""
    worst: dict[str, float] = {}
    with T.precision(64):
        for seed in seeds:
            for name, (f, inputs) in build_checks(seed, corrupt=corrupt).items():
                report = T.finite_diff_check(f, inputs, h=h, tol=tol)
                worst[name] = max(worst.get(name, 0.0), report.max_error)
    return [(name, err, err < tol) for name, err in worst.items()]
