"""Per-layer fusion of the three branch outputs and the query fusion module
that turns per-layer tokens into the head's query set."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ParameterError, ShapeError
from .tuners import FeatureMap


@dataclass
class LayerFusionParams:
    """Affine map applied to the channel-concat of the three branch outputs."""
    w_lin: T.Tensor   # 3c x d_fuse
    b_lin: T.Tensor   # 1 x d_fuse

    @staticmethod
    def create(c: int, d_fuse: int, rng: np.random.Generator,
               scale: float = 0.02) -> "LayerFusionParams":
        # identity-leaning init: average the three blocks so the fused map
        # starts close to the branch mean instead of noise
        w = rng.normal(0.0, scale, (3 * c, d_fuse))
        if d_fuse == c:
            for blk in range(3):
                w[blk * c:(blk + 1) * c] += np.eye(c) / 3.0
        return LayerFusionParams(
            w_lin=T.Tensor(w, requires_grad=True),
            b_lin=T.Tensor(rng.normal(0.0, scale, (1, d_fuse)), requires_grad=True))

    def named(self, prefix: str) -> dict[str, T.Tensor]:
        return {f"{prefix}.w_lin": self.w_lin, f"{prefix}.b_lin": self.b_lin}


@dataclass
class QueryFusionParams:
    """Token fusion (query-side 2c->c projection), token->query MLP, and the
    cross-layer aggregation affine; shared across layers."""
    w_q6: T.Tensor     # 2c x c
    mlp_w1: T.Tensor   # c x c
    mlp_b1: T.Tensor   # 1 x c
    mlp_w2: T.Tensor   # c x c_q
    mlp_b2: T.Tensor   # 1 x c_q
    w_q: T.Tensor      # 3c_q x c_q
    b_q: T.Tensor      # 1 x c_q

    @staticmethod
    def create(c: int, c_q: int, rng: np.random.Generator,
               scale: float = 0.5) -> "QueryFusionParams":
        # larger scale than the tuners: with tiny queries the head's
        # pixel-to-query attention starts uniform and barely trains
        def p(*dims):
            return T.Tensor(rng.normal(0.0, scale, dims), requires_grad=True)
        return QueryFusionParams(w_q6=p(2 * c, c),
                                 mlp_w1=p(c, c), mlp_b1=p(1, c),
                                 mlp_w2=p(c, c_q), mlp_b2=p(1, c_q),
                                 w_q=p(3 * c_q, c_q), b_q=p(1, c_q))

    def named(self, prefix: str) -> dict[str, T.Tensor]:
        return {f"{prefix}.w_q6": self.w_q6,
                f"{prefix}.mlp_w1": self.mlp_w1, f"{prefix}.mlp_b1": self.mlp_b1,
                f"{prefix}.mlp_w2": self.mlp_w2, f"{prefix}.mlp_b2": self.mlp_b2,
                f"{prefix}.w_q": self.w_q, f"{prefix}.b_q": self.b_q}


def fuse_layer_features(f_c: FeatureMap, f_m: FeatureMap, f_f: FeatureMap,
                        p: LayerFusionParams) -> FeatureMap:
    """Channel-concat the three calibrated maps, then project to d_fuse."""
    if not (f_c.values.data.shape == f_m.values.data.shape == f_f.values.data.shape):
        raise ShapeError("fuse_layer_features: branch outputs disagree: "
                         f"{f_c.values.data.shape}, {f_m.values.data.shape}, "
                         f"{f_f.values.data.shape}")
    cat = T.concat([f_c.values, f_m.values, f_f.values], axis=1)
    return f_c.like(cat @ p.w_lin + p.b_lin)


def fuse_queries(t_c: T.Tensor, t_m: T.Tensor, t_f: T.Tensor,
                 p: QueryFusionParams) -> T.Tensor:
    """Residual cross-attention of the coarse+medium concat onto the fine
    token. The 2c-wide concat is projected to c on the query side so the
    attention is well-typed; keys and values stay the raw fine token."""
    c = t_c.data.shape[1]
    t_cm = T.concat([t_c, t_m], axis=1)
    scale = T.Tensor(1.0 / math.sqrt(c))
    attn = T.softmax_rows(((t_cm @ p.w_q6) @ t_f.T) * scale)
    return t_c + attn @ t_f


def token_to_query(t_fuse: T.Tensor, p: QueryFusionParams) -> T.Tensor:
    hidden = T.relu(t_fuse @ p.mlp_w1 + p.mlp_b1)
    return hidden @ p.mlp_w2 + p.mlp_b2


def aggregate_queries(queries: list[T.Tensor], p: QueryFusionParams) -> T.Tensor:
    """Concat of [elementwise max, elementwise mean, last layer] over the
    layer axis, followed by an affine map."""
    if len(queries) == 0:
        raise ParameterError("aggregate_queries: need at least one layer")
    stacked = T.stack(queries)
    q_max = T.max_axis0(stacked)
    q_avg = T.reshape(T.mean_axis0(stacked), *queries[0].data.shape)
    cat = T.concat([q_max, q_avg, queries[-1]], axis=1)
    return cat @ p.w_q + p.b_q
