"""Spatial-token clustering (DBSCAN, K-Means) and per-cluster instance norm.

Cluster assignment is discrete and runs outside the autodiff graph; only the
normalization that follows it is differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ParameterError

# normalization stabilizer; post-norm variance is v / (v + EPS_NORM), so this
# must sit far below any group variance the invariant checks (> 1e-8)
EPS_NORM = 1e-12


@dataclass
class ClusterAssignment:
    """Per-token labels; -1 marks noise, clusters are 0..K-1 and non-empty."""
    labels: np.ndarray
    num_clusters: int
    method: str
    params: dict = field(default_factory=dict)

    def groups(self) -> list[np.ndarray]:
        """Index arrays per group; DBSCAN noise forms one extra pseudo-group."""
        out = [np.flatnonzero(self.labels == k) for k in range(self.num_clusters)]
        noise = np.flatnonzero(self.labels == -1)
        if noise.size:
            out.append(noise)
        return out


def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    m = points.shape[0]
    centroids = np.empty((k, points.shape[1]), dtype=np.float64)
    centroids[0] = points[rng.integers(m)]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(m)
        else:
            idx = int(np.searchsorted(np.cumsum(d2 / total), rng.random()))
            idx = min(idx, m - 1)
        centroids[j] = points[idx]
        d2 = np.minimum(d2, ((points - centroids[j]) ** 2).sum(axis=1))
    return centroids


def kmeans(points, k: int, seed: int = 0, max_iters: int = 50,
           objective_trace: list | None = None) -> ClusterAssignment:
    """Lloyd iterations with kmeans++ seeding.

    Empty clusters are refilled with the point currently farthest from its
    centroid. The within-cluster squared-distance objective is non-increasing
    per iteration; pass ``objective_trace`` to capture it.
    """
    pts = np.asarray(points.data if isinstance(points, T.Tensor) else points,
                     dtype=np.float64)
    m = pts.shape[0]
    if not 1 <= k <= m:
        raise ParameterError(f"kmeans: need 1 <= k <= {m}, got k={k}")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp_init(pts, k, rng)
    labels = np.zeros(m, dtype=np.int64)
    for _ in range(max_iters):
        d2 = ((pts[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        labels = d2.argmin(axis=1)
        # refill empties before recomputing centroids
        for j in range(k):
            if not (labels == j).any():
                worst = d2[np.arange(m), labels].argmax()
                labels[worst] = j
        new_centroids = np.stack([pts[labels == j].mean(axis=0) for j in range(k)])
        obj = float(((pts - new_centroids[labels]) ** 2).sum())
        if objective_trace is not None:
            objective_trace.append(obj)
        if np.allclose(new_centroids, centroids, rtol=0, atol=1e-12):
            centroids = new_centroids
            break
        centroids = new_centroids
    return ClusterAssignment(labels=labels, num_clusters=k, method="kmeans",
                             params={"k": k, "seed": seed})


def dbscan(points, eps: float, min_pts: int) -> ClusterAssignment:
    """Standard DBSCAN over the Euclidean metric.

    Deterministic: tokens are visited in index order and border points join
    the first core cluster that reaches them.
    """
    pts = np.asarray(points.data if isinstance(points, T.Tensor) else points,
                     dtype=np.float64)
    if eps <= 0:
        raise ParameterError(f"dbscan: eps must be > 0, got {eps}")
    if min_pts < 1:
        raise ParameterError(f"dbscan: min_pts must be >= 1, got {min_pts}")
    m = pts.shape[0]
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
    neighbors = [np.flatnonzero(d2[i] <= eps * eps) for i in range(m)]
    core = np.array([len(n) >= min_pts for n in neighbors])

    labels = np.full(m, -2, dtype=np.int64)  # -2 = unvisited
    cluster = 0
    for i in range(m):
        if labels[i] != -2:
            continue
        if not core[i]:
            labels[i] = -1
            continue
        labels[i] = cluster
        frontier = list(neighbors[i])
        pos = 0
        while pos < len(frontier):
            j = frontier[pos]
            pos += 1
            if labels[j] == -1:
                labels[j] = cluster  # border point reclaimed from noise
            if labels[j] != -2:
                continue
            labels[j] = cluster
            if core[j]:
                frontier.extend(neighbors[j])
        cluster += 1
    return ClusterAssignment(labels=labels, num_clusters=cluster, method="dbscan",
                             params={"eps": eps, "min_pts": min_pts})


def auto_eps(points) -> float:
    """Default DBSCAN radius: half the median pairwise Euclidean distance."""
    pts = np.asarray(points.data if isinstance(points, T.Tensor) else points,
                     dtype=np.float64)
    m = pts.shape[0]
    if m < 2:
        return 1.0
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
    iu = np.triu_indices(m, k=1)
    med = float(np.median(np.sqrt(d2[iu])))
    return 0.5 * med if med > 0 else 1.0


def cluster_instance_norm(values: T.Tensor, assignment: ClusterAssignment) -> T.Tensor:
    """Per-group per-channel standardization (population variance, no affine).

    Differentiable: gradients flow through the group means and variances.
    Singleton groups normalize to zero by construction.
    """
    num_rows = values.data.shape[0]
    out = None
    for idx in assignment.groups():
        group = T.select_rows(values, idx)
        mu = T.mean_axis0(group)
        dev = group - mu
        var = T.mean_axis0(dev * dev)
        normed = dev / T.sqrt(var + T.Tensor(np.full((1, values.data.shape[1]),
                                                     EPS_NORM)))
        placed = T.scatter_rows(normed, idx, num_rows)
        out = placed if out is None else out + placed
    return out
