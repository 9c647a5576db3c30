"""The three granularity tuners: coarse (cluster+IN), medium (text-guided),
fine (high-frequency self-attention), sharing one token-calibration core.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .cluster import ClusterAssignment, auto_eps, cluster_instance_norm, dbscan, kmeans
from .errors import ParameterError, ResourceError, ShapeError

ATTENTION_CAP = 4096

SOBEL_GX = np.array([[-1.0, 0.0, 1.0],
                     [-2.0, 0.0, 2.0],
                     [-1.0, 0.0, 1.0]])
SOBEL_GY = SOBEL_GX.T
SOBEL_EPS = 1e-12


@dataclass
class FeatureMap:
    """Patch features as an HW x c tensor plus the spatial grid it came from."""
    values: T.Tensor
    height: int
    width: int

    def __post_init__(self):
        hw, _ = self.values.data.shape
        if hw != self.height * self.width:
            raise ShapeError(
                f"FeatureMap rows {hw} != H*W = {self.height}*{self.width}")

    @property
    def channels(self) -> int:
        return self.values.data.shape[1]

    def like(self, values: T.Tensor) -> "FeatureMap":
        return FeatureMap(values, self.height, self.width)


@dataclass
class TunerParams:
    """Learnable token plus the two-layer calibration MLP for one branch."""
    token: T.Tensor    # m x c
    w1: T.Tensor       # c x c
    b1: T.Tensor       # 1 x c
    w2: T.Tensor       # c x c
    b2: T.Tensor       # 1 x c

    @staticmethod
    def create(m: int, c: int, rng: np.random.Generator, scale: float = 0.02) -> "TunerParams":
        def p(*dims):
            return T.Tensor(rng.normal(0.0, scale, dims), requires_grad=True)
        return TunerParams(token=p(m, c), w1=p(c, c), b1=p(1, c),
                           w2=p(c, c), b2=p(1, c))

    def named(self, prefix: str) -> dict[str, T.Tensor]:
        return {f"{prefix}.token": self.token, f"{prefix}.w1": self.w1,
                f"{prefix}.b1": self.b1, f"{prefix}.w2": self.w2,
                f"{prefix}.b2": self.b2}


def token_calibrate(fmap: FeatureMap, p: TunerParams) -> tuple[FeatureMap, T.Tensor]:
    """Shared calibration core: residual token-MLP refinement.

    S = softmax(F Tᵀ / sqrt(c)); out = F + (S (T W1 + b1) + F) W2 + b2.
    With zero MLP weights this is exactly the identity on F.
    """
    c = fmap.channels
    if p.token.data.shape[1] != c:
        raise ShapeError(
            f"token width {p.token.data.shape[1]} != feature channels {c}")
    f = fmap.values
    scale = T.Tensor(1.0 / math.sqrt(c))
    s = T.softmax_rows((f @ p.token.T) * scale)
    projected = (p.token @ p.w1) + p.b1
    out = f + ((s @ projected) + f) @ p.w2 + p.b2
    return fmap.like(out), s


def cluster_features(fmap: FeatureMap, method: str, eps="auto",
                     min_pts: int = 4, k: int = 5, seed: int = 0) -> ClusterAssignment:
    pts = fmap.values.data
    if method == "kmeans":
        return kmeans(pts, k=min(k, pts.shape[0]), seed=seed)
    if method == "dbscan":
        radius = auto_eps(pts) if eps == "auto" else float(eps)
        return dbscan(pts, eps=radius, min_pts=min_pts)
    raise ParameterError(f"unknown clustering method '{method}'")


def cgt_forward(fmap: FeatureMap, p: TunerParams, *, method: str = "dbscan",
                eps="auto", min_pts: int = 4, k: int = 5,
                seed: int = 0) -> FeatureMap:
    """Coarse branch: cluster tokens spatially, instance-normalize each
    cluster, then calibrate with the coarse token."""
    assignment = cluster_features(fmap, method, eps=eps, min_pts=min_pts,
                                  k=k, seed=seed)
    normed = cluster_instance_norm(fmap.values, assignment)
    out, _ = token_calibrate(fmap.like(normed), p)
    return out


# ---- medium branch ----------------------------------------------------

def _fnv1a64(s: str) -> int:
    h = 0xcbf29ce484222325
    for byte in s.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001b3) & 0xFFFFFFFFFFFFFFFF
    return h


@dataclass
class TextEmbeddings:
    """Frozen per-category embeddings; a deterministic stand-in for a
    pretrained text encoder. Row j depends only on (name_j, seed, c)."""
    categories: list[str]
    values: T.Tensor   # n x c, rows unit-norm, requires_grad False
    seed: int


def text_embed(categories: list[str], c: int, seed: int = 0) -> TextEmbeddings:
    if not categories:
        raise ParameterError("text_embed: empty category list")
    if len(set(categories)) != len(categories):
        raise ParameterError("text_embed: duplicate category names")
    rows = np.empty((len(categories), c), dtype=np.float64)
    for j, name in enumerate(categories):
        rng = np.random.default_rng(_fnv1a64(name) ^ (seed & 0xFFFFFFFFFFFFFFFF))
        v = rng.standard_normal(c)
        rows[j] = v / np.linalg.norm(v)
    return TextEmbeddings(categories=list(categories),
                          values=T.Tensor(rows), seed=seed)


def text_cross_attention(fmap: FeatureMap, text: TextEmbeddings) -> FeatureMap:
    """Features attend over the frozen text rows; each output row is a convex
    combination of text embeddings."""
    c = fmap.channels
    if text.values.data.shape[1] != c:
        raise ShapeError(
            f"text width {text.values.data.shape[1]} != feature channels {c}")
    scale = T.Tensor(1.0 / math.sqrt(c))
    attn = T.softmax_rows((fmap.values @ text.values.T) * scale)
    return fmap.like(attn @ text.values)


def mgt_forward(fmap: FeatureMap, text: TextEmbeddings, p: TunerParams) -> FeatureMap:
    attended = text_cross_attention(fmap, text)
    out, _ = token_calibrate(attended, p)
    return out


# ---- fine branch ------------------------------------------------------

def _conv3x3_replicate(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    # img: (C, H, W); correlation with replicate padding
    padded = np.pad(img, ((0, 0), (1, 1), (1, 1)), mode="edge")
    h, w = img.shape[1], img.shape[2]
    out = np.zeros_like(img)
    for u in range(3):
        for v in range(3):
            out += kernel[u, v] * padded[:, u:u + h, v:v + w]
    return out


def _conv3x3_replicate_adjoint(g: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    # adjoint of the padded correlation; folds padded-border gradient
    # back onto the edge pixels that replication copied from
    h, w = g.shape[1], g.shape[2]
    gpad = np.zeros((g.shape[0], h + 2, w + 2), dtype=g.dtype)
    for u in range(3):
        for v in range(3):
            gpad[:, u:u + h, v:v + w] += kernel[u, v] * g
    out = gpad[:, 1:h + 1, 1:w + 1].copy()
    out[:, 0, :] += gpad[:, 0, 1:w + 1]
    out[:, -1, :] += gpad[:, h + 1, 1:w + 1]
    out[:, :, 0] += gpad[:, 1:h + 1, 0]
    out[:, :, -1] += gpad[:, 1:h + 1, w + 1]
    out[:, 0, 0] += gpad[:, 0, 0]
    out[:, 0, -1] += gpad[:, 0, w + 1]
    out[:, -1, 0] += gpad[:, h + 1, 0]
    out[:, -1, -1] += gpad[:, h + 1, w + 1]
    return out


def sobel(fmap: FeatureMap) -> FeatureMap:
    """Per-channel gradient magnitude sqrt(Gx^2 + Gy^2 + eps) with replicate
    padding; the eps keeps it differentiable on flat regions."""
    h, w, c = fmap.height, fmap.width, fmap.channels
    x = fmap.values
    img = x.data.reshape(h, w, c).transpose(2, 0, 1)
    gx = _conv3x3_replicate(img, SOBEL_GX.astype(img.dtype))
    gy = _conv3x3_replicate(img, SOBEL_GY.astype(img.dtype))
    mag = np.sqrt(gx * gx + gy * gy + SOBEL_EPS)
    out_vals = mag.transpose(1, 2, 0).reshape(h * w, c)
    out = T.Tensor(out_vals, _parents=(x,))

    def bwd(grad):
        if x.requires_grad:
            g = grad.reshape(h, w, c).transpose(2, 0, 1)
            dgx = g * gx / mag
            dgy = g * gy / mag
            dimg = (_conv3x3_replicate_adjoint(dgx, SOBEL_GX.astype(g.dtype))
                    + _conv3x3_replicate_adjoint(dgy, SOBEL_GY.astype(g.dtype)))
            x._accum_grad(dimg.transpose(1, 2, 0).reshape(h * w, c))
    out._backward = bwd
    return fmap.like(out)


def high_freq_self_attention(fmap: FeatureMap,
                             attention_cap: int = ATTENTION_CAP) -> FeatureMap:
    """Sobel response queries attend over the raw features (HW x HW)."""
    hw = fmap.values.data.shape[0]
    if hw > attention_cap:
        raise ResourceError(
            f"high_freq_self_attention: HW={hw} exceeds cap {attention_cap}")
    c = fmap.channels
    q = sobel(fmap)
    scale = T.Tensor(1.0 / math.sqrt(c))
    attn = T.softmax_rows((q.values @ fmap.values.T) * scale)
    return fmap.like(attn @ fmap.values)


def fgt_forward(fmap: FeatureMap, p: TunerParams,
                attention_cap: int = ATTENTION_CAP) -> FeatureMap:
    attended = high_freq_self_attention(fmap, attention_cap=attention_cap)
    out, _ = token_calibrate(attended, p)
    return out
