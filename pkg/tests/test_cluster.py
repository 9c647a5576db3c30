import numpy as np
import pytest

from mgfc import tensor as T
from mgfc.cluster import (ClusterAssignment, auto_eps, cluster_instance_norm,
                          dbscan, kmeans)
from mgfc.errors import ParameterError


def reference_dbscan(points, eps, min_pts):
    """Independent O(n^2) DBSCAN: core graph + BFS over connected components."""
    m = len(points)
    d = np.sqrt(((points[:, None] - points[None, :]) ** 2).sum(axis=2))
    neigh = [set(np.flatnonzero(d[i] <= eps)) for i in range(m)]
    core = [len(neigh[i]) >= min_pts for i in range(m)]
    labels = np.full(m, -1)
    cluster = 0
    for i in range(m):
        if not core[i] or labels[i] != -1:
            continue
        queue = [i]
        labels[i] = cluster
        while queue:
            j = queue.pop()
            if not core[j]:
                continue
            for nb in sorted(neigh[j]):
                if labels[nb] == -1:
                    labels[nb] = cluster
                    if core[nb]:
                        queue.append(nb)
        cluster += 1
    return labels


def partitions_equal(a, b):
    """Same partition up to relabeling; noise must match exactly."""
    if not np.array_equal(a == -1, b == -1):
        return False
    mapping = {}
    for la, lb in zip(a, b):
        if la == -1:
            continue
        if mapping.setdefault(la, lb) != lb:
            return False
    return len(set(mapping.values())) == len(mapping)


class TestKmeans:
    def test_k1_all_one_cluster(self):
        pts = np.random.default_rng(0).normal(size=(10, 3))
        a = kmeans(pts, k=1, seed=0)
        assert a.num_clusters == 1
        assert (a.labels == 0).all()

    def test_k_equals_m_singletons(self):
        pts = np.arange(12, dtype=float).reshape(6, 2) * 10
        a = kmeans(pts, k=6, seed=1)
        assert sorted(a.labels) == list(range(6))

    def test_two_blobs_match_blob_membership(self):
        rng = np.random.default_rng(2)
        blob1 = rng.normal(0, 0.3, (20, 2))
        blob2 = rng.normal(10, 0.3, (20, 2))
        pts = np.vstack([blob1, blob2])
        a = kmeans(pts, k=2, seed=3)
        truth = np.array([0] * 20 + [1] * 20)
        assert partitions_equal(a.labels, truth)
        # achieved objective equals the objective of the true blob split
        def objective(labels):
            return sum(((pts[labels == j] - pts[labels == j].mean(axis=0)) ** 2).sum()
                       for j in set(labels))
        assert np.isclose(objective(a.labels), objective(truth))

    def test_k_too_large_rejected(self):
        with pytest.raises(ParameterError):
            kmeans(np.ones((3, 2)), k=4)

    @pytest.mark.parametrize("seed", range(20))
    def test_objective_non_increasing(self, seed):
        pts = np.random.default_rng(seed).normal(size=(40, 4))
        trace = []
        kmeans(pts, k=5, seed=seed, objective_trace=trace)
        assert all(b <= a + 1e-9 for a, b in zip(trace, trace[1:]))

    def test_every_cluster_nonempty(self):
        pts = np.random.default_rng(9).normal(size=(15, 2))
        a = kmeans(pts, k=7, seed=9)
        for j in range(7):
            assert (a.labels == j).any()


class TestDbscan:
    def test_small_triangle_one_cluster(self):
        pts = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
        a = dbscan(pts, eps=1.5, min_pts=2)
        assert a.num_clusters == 1
        assert (a.labels == 0).all()
        assert partitions_equal(a.labels, reference_dbscan(pts, 1.5, 2))

    def test_isolated_points_are_noise(self):
        a = dbscan(np.array([[0.0, 0.0], [10.0, 10.0]]), eps=1, min_pts=2)
        assert a.num_clusters == 0
        assert (a.labels == -1).all()

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_reference(self, seed):
        rng = np.random.default_rng(seed)
        pts = rng.uniform(0, 10, (100, 2))
        got = dbscan(pts, eps=1.0, min_pts=4)
        assert partitions_equal(got.labels, reference_dbscan(pts, 1.0, 4))

    @pytest.mark.parametrize("seed", range(10))
    def test_permutation_invariant(self, seed):
        rng = np.random.default_rng(seed + 100)
        pts = rng.uniform(0, 5, (60, 2))
        base = dbscan(pts, eps=0.8, min_pts=3)
        perm = rng.permutation(60)
        shuffled = dbscan(pts[perm], eps=0.8, min_pts=3)
        assert partitions_equal(base.labels[perm], shuffled.labels)

    def test_bad_params_rejected(self):
        with pytest.raises(ParameterError):
            dbscan(np.ones((3, 2)), eps=0, min_pts=2)
        with pytest.raises(ParameterError):
            dbscan(np.ones((3, 2)), eps=1, min_pts=0)

    def test_auto_eps_positive(self):
        pts = np.random.default_rng(5).normal(size=(30, 4))
        assert auto_eps(pts) > 0


class TestClusterInstanceNorm:
    def _assign(self, labels):
        labels = np.asarray(labels)
        k = labels.max() + 1 if (labels >= 0).any() else 0
        return ClusterAssignment(labels=labels, num_clusters=int(k), method="fixed")

    def test_constant_cluster_maps_to_zero(self):
        vals = T.Tensor(np.full((4, 3), 7.0))
        out = cluster_instance_norm(vals, self._assign([0, 0, 0, 0]))
        assert np.abs(out.data).max() < 1e-3

    def test_two_point_cluster_symmetric(self):
        vals = T.Tensor(np.array([[1.0], [3.0]]))
        out = cluster_instance_norm(vals, self._assign([0, 0]))
        assert np.abs(out.data - [[-1.0], [1.0]]).max() < 1e-3

    def test_single_cluster_equals_whole_map_in(self):
        rng = np.random.default_rng(6)
        raw = rng.normal(2.0, 3.0, (20, 5))
        out = cluster_instance_norm(T.Tensor(raw), self._assign([0] * 20))
        # independent whole-map instance norm (population variance)
        mu = raw.mean(axis=0)
        var = raw.var(axis=0)
        want = (raw - mu) / np.sqrt(var + 1e-12)
        assert np.abs(out.data - want.astype(np.float32)).max() < 1e-5

    def test_noise_forms_pseudo_group(self):
        rng = np.random.default_rng(7)
        raw = rng.normal(size=(6, 2))
        out = cluster_instance_norm(T.Tensor(raw), self._assign([0, 0, -1, -1, 0, -1]))
        noise = out.data[[2, 3, 5]]
        assert np.abs(noise.mean(axis=0)).max() < 1e-5

    def test_singleton_group_is_zero(self):
        raw = np.array([[5.0, -1.0], [2.0, 2.0], [2.0, 4.0]])
        out = cluster_instance_norm(T.Tensor(raw), self._assign([0, 1, 1]))
        assert np.abs(out.data[0]).max() < 1e-6

    @pytest.mark.parametrize("seed", range(50))
    def test_group_statistics_invariant(self, seed):
        rng = np.random.default_rng(seed)
        n, c = 24, 4
        raw = rng.normal(0, rng.uniform(0.5, 3.0), (n, c))
        labels = rng.permutation(np.arange(n) % 4 - 1)
        assignment = ClusterAssignment(labels=labels, num_clusters=3, method="rand")
        out = cluster_instance_norm(T.Tensor(raw), assignment).data
        for idx in assignment.groups():
            if len(idx) < 2:
                continue
            for ch in range(c):
                if raw[idx, ch].var() <= 1e-8:
                    continue
                assert abs(out[idx, ch].mean()) < 1e-5
                assert abs(out[idx, ch].var() - 1.0) < 1e-3

    def test_output_dims_and_full_coverage(self):
        rng = np.random.default_rng(8)
        raw = rng.normal(size=(10, 3))
        labels = np.array([0, 1, -1, 0, 1, 1, -1, 0, 1, 0])
        assignment = ClusterAssignment(labels=labels, num_clusters=2, method="rand")
        out = cluster_instance_norm(T.Tensor(raw), assignment)
        assert out.data.shape == raw.shape
        covered = np.concatenate(assignment.groups())
        assert sorted(covered) == list(range(10))

    def test_gradient_flows_through_stats(self):
        with T.precision(64):
            rng = np.random.default_rng(9)
            x = T.Tensor(rng.normal(size=(6, 3)), requires_grad=True)
            proj = T.Tensor(rng.normal(size=(6, 3)))
            assignment = self._assign([0, 0, 1, 1, 1, 0])
            report = T.finite_diff_check(
                lambda v: T.tsum(cluster_instance_norm(v, assignment) * proj),
                {"x": x}, tol=1e-6)
            assert report.passed
