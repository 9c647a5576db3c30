"""Frozen desk-scale transformer encoder and the full-model forward pass:
per-layer branch calibration, fusion, layer chaining, and query aggregation.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .fusion import (LayerFusionParams, QueryFusionParams, aggregate_queries,
                     fuse_layer_features, fuse_queries, token_to_query)
from .seghead import HeadParams
from .tuners import (FeatureMap, TextEmbeddings, TunerParams, cgt_forward,
                     fgt_forward, mgt_forward, text_embed)

ALL_BRANCHES = ("cgt", "mgt", "fgt")


@dataclass
class BackboneConfig:
    layers: int = 4
    channels: int = 64
    patch: int = 4
    image_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.image_size % self.patch != 0:
            raise ShapeError(
                f"image size {self.image_size} not divisible by patch {self.patch}")
        if self.layers < 1:
            raise ShapeError("backbone needs at least one layer")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch


class FrozenEncoder:
    """Randomly initialized, permanently frozen pre-norm transformer.

    Parameters are a pure function of (config, seed); a content hash over
    their bytes guards against drift.
    """

    def __init__(self, cfg: BackboneConfig):
        self.cfg = cfg
        c = cfg.channels
        rng = np.random.default_rng(cfg.seed)
        scale = 0.02
        self.arrays: dict[str, np.ndarray] = {}

        def frozen(name, *dims, init="normal"):
            if init == "normal":
                a = rng.normal(0.0, scale, dims)
            elif init == "ones":
                a = np.ones(dims)
            else:
                a = np.zeros(dims)
            self.arrays[name] = a.astype(np.float32)

        frozen("patch.w", cfg.patch * cfg.patch * 3, c)
        frozen("patch.b", 1, c, init="zeros")
        for i in range(cfg.layers):
            for w in ("wq", "wk", "wv", "wo", "mlp_w1"):
                frozen(f"layer{i}.{w}", c, c)
            frozen(f"layer{i}.mlp_w2", c, c)
            frozen(f"layer{i}.mlp_b1", 1, c, init="zeros")
            frozen(f"layer{i}.mlp_b2", 1, c, init="zeros")
            for ln in ("ln1", "ln2"):
                frozen(f"layer{i}.{ln}_g", 1, c, init="ones")
                frozen(f"layer{i}.{ln}_b", 1, c, init="zeros")

    def content_hash(self) -> bytes:
        h = hashlib.sha256()
        for name in sorted(self.arrays):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.arrays[name], dtype="<f4").tobytes())
        return h.digest()

    def _t(self, name: str) -> T.Tensor:
        return T.Tensor(self.arrays[name])


def _layer_norm_rows(x: T.Tensor, gamma: T.Tensor, beta: T.Tensor) -> T.Tensor:
    mu = T.mean_axis1(x)
    dev = x - mu
    var = T.mean_axis1(dev * dev)
    return (dev / T.sqrt(var + T.Tensor(1e-5))) * gamma + beta


def patch_embed(image: np.ndarray, enc: FrozenEncoder) -> FeatureMap:
    """Flatten non-overlapping P x P patches and map them to c channels.

    The image itself never needs gradients, so the patch extraction runs in
    plain numpy and enters the graph as a constant.
    """
    cfg = enc.cfg
    expect = (cfg.image_size, cfg.image_size, 3)
    if image.shape != expect:
        raise ShapeError(f"image shape {image.shape}, expected {expect}")
    g, p = cfg.grid, cfg.patch
    patches = (image.reshape(g, p, g, p, 3)
               .transpose(0, 2, 1, 3, 4)
               .reshape(g * g, p * p * 3))
    out = T.Tensor(patches) @ enc._t("patch.w") + enc._t("patch.b")
    return FeatureMap(out, g, g)


def encoder_layer(fmap: FeatureMap, i: int, enc: FrozenEncoder) -> FeatureMap:
    """Pre-norm block: x + Attn(LN(x)), then x + MLP(LN(x))."""
    c = fmap.channels
    x = fmap.values
    t = enc._t
    h = _layer_norm_rows(x, t(f"layer{i}.ln1_g"), t(f"layer{i}.ln1_b"))
    q = h @ t(f"layer{i}.wq")
    k = h @ t(f"layer{i}.wk")
    v = h @ t(f"layer{i}.wv")
    attn = T.softmax_rows((q @ k.T) * T.Tensor(1.0 / math.sqrt(c)))
    x = x + (attn @ v) @ t(f"layer{i}.wo")
    h2 = _layer_norm_rows(x, t(f"layer{i}.ln2_g"), t(f"layer{i}.ln2_b"))
    x = x + T.relu(h2 @ t(f"layer{i}.mlp_w1") + t(f"layer{i}.mlp_b1")) \
        @ t(f"layer{i}.mlp_w2") + t(f"layer{i}.mlp_b2")
    return fmap.like(x)


@dataclass
class ClusterConfig:
    method: str = "dbscan"
    eps: object = "auto"
    min_pts: int = 4
    k: int = 5


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    tokens_m: int = 16
    c_q: int | None = None          # defaults to channels
    num_classes: int = 4
    categories: tuple[str, ...] = ("background", "circle", "square", "triangle")
    enabled: tuple[str, ...] = ALL_BRANCHES
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    param_seed: int = 1

    def __post_init__(self):
        if self.c_q is None:
            self.c_q = self.backbone.channels
        bad = set(self.enabled) - set(ALL_BRANCHES)
        if bad:
            raise ShapeError(f"unknown tuner branches: {sorted(bad)}")


class MGFCModel:
    """The frozen encoder plus every trainable piece: per-layer branch tuners,
    per-layer fusion, the shared query fusion module, and the head.

    With no branches enabled this degrades to the frozen-backbone baseline:
    plain layer chaining and a directly trainable query matrix.
    """

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.encoder = FrozenEncoder(cfg.backbone)
        c = cfg.backbone.channels
        m = cfg.tokens_m
        rng = np.random.default_rng(cfg.param_seed)
        self.tuners: list[dict[str, TunerParams]] = []
        self.fusion: list[LayerFusionParams] = []
        self.qfm: QueryFusionParams | None = None
        self.queries: T.Tensor | None = None
        if cfg.enabled:
            for _ in range(cfg.backbone.layers):
                self.tuners.append({b: TunerParams.create(m, c, rng)
                                    for b in cfg.enabled})
                self.fusion.append(LayerFusionParams.create(c, c, rng))
            self.qfm = QueryFusionParams.create(c, cfg.c_q, rng)
        else:
            self.queries = T.Tensor(rng.normal(0.0, 0.5, (m, cfg.c_q)),
                                    requires_grad=True)
        self.head = HeadParams.create(cfg.c_q, cfg.num_classes, rng)
        self.text = text_embed(list(cfg.categories), c, seed=cfg.backbone.seed) \
            if "mgt" in cfg.enabled else None

    # ---- parameters ---------------------------------------------------

    def trainable_params(self) -> dict[str, T.Tensor]:
        params: dict[str, T.Tensor] = {}
        for i, layer_tuners in enumerate(self.tuners):
            for branch, p in layer_tuners.items():
                params.update(p.named(f"tuner.{i}.{branch}"))
        for i, f in enumerate(self.fusion):
            params.update(f.named(f"fusion.{i}"))
        if self.qfm is not None:
            params.update(self.qfm.named("qfm"))
        if self.queries is not None:
            params["queries"] = self.queries
        params.update(self.head.named("head"))
        return params

    def frozen_hash(self) -> bytes:
        return self.encoder.content_hash()

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        from .errors import ConfigError, IntegrityError
        params = self.trainable_params()
        for name, p in params.items():
            if name not in state:
                raise IntegrityError(f"checkpoint is missing tensor '{name}'")
            if tuple(state[name].shape) != p.data.shape:
                raise ConfigError(
                    f"tensor '{name}' shape {tuple(state[name].shape)} does not "
                    f"match model shape {p.data.shape}")
            p.data = np.asarray(state[name], dtype=T.default_dtype()).copy()

    # ---- forward ------------------------------------------------------

    def _branch(self, name: str, fmap: FeatureMap, layer: int) -> FeatureMap:
        if name not in self.cfg.enabled:
            return fmap   # disabled branch passes the raw layer feature through
        p = self.tuners[layer][name]
        if name == "cgt":
            cc = self.cfg.cluster
            return cgt_forward(fmap, p, method=cc.method, eps=cc.eps,
                               min_pts=cc.min_pts, k=cc.k,
                               seed=self.cfg.backbone.seed)
        if name == "mgt":
            return mgt_forward(fmap, self.text, p)
        return fgt_forward(fmap, p)

    def _zero_token(self) -> T.Tensor:
        return T.zeros(self.cfg.tokens_m, self.cfg.backbone.channels)

    def forward(self, image: np.ndarray) -> tuple[FeatureMap, T.Tensor]:
        """Run the calibrated encoder stack; returns the final fused feature
        map and the aggregated query matrix."""
        enc = self.encoder
        x = patch_embed(image, enc)
        per_layer_queries: list[T.Tensor] = []
        for i in range(self.cfg.backbone.layers):
            f_i = encoder_layer(x, i, enc)
            if not self.cfg.enabled:
                x = f_i
                continue
            f_c = self._branch("cgt", f_i, i)
            f_m = self._branch("mgt", f_i, i)
            f_f = self._branch("fgt", f_i, i)
            x = fuse_layer_features(f_c, f_m, f_f, self.fusion[i])
            tok = {b: (self.tuners[i][b].token if b in self.cfg.enabled
                       else self._zero_token()) for b in ALL_BRANCHES}
            t_fuse = fuse_queries(tok["cgt"], tok["mgt"], tok["fgt"], self.qfm)
            per_layer_queries.append(token_to_query(t_fuse, self.qfm))
        if self.cfg.enabled:
            q = aggregate_queries(per_layer_queries, self.qfm)
        else:
            q = self.queries
        return x, q
