import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bigat.cluster import (
    LESS,
    SIGNIFICANT,
    SOURCE_KMEANS,
    SOURCE_UNSET,
    ClusteringError,
    KmeansResult,
    adjusted_rand_index,
    assign_clusters,
    canonical_order,
    cluster_nodes,
    kmeans,
    severity_features,
    swath_severity,
)
from bigat.data import EventDataset
from bigat.graph import grid_graph
from oracles import ari_pairs, best_two_partition_inertia


def test_well_separated_pairs():
    res = kmeans([0, 0.1, 10, 10.1], 2, seed=0)
    assert res.assignments[0] == res.assignments[1] != res.assignments[2] == res.assignments[3]
    assert sorted(res.centroids[:, 0].round(12)) == [0.05, 10.05]
    assert abs(res.inertia - 0.01) < 1e-12


def test_five_point_example_matches_brute_force():
    pts = [0, 1, 2, 9, 10]
    res = kmeans(pts, 2, restarts=10, seed=0)
    assert abs(res.inertia - 2.5) < 1e-12
    assert abs(best_two_partition_inertia(pts) - 2.5) < 1e-12
    groups = {tuple(np.flatnonzero(res.assignments == k)) for k in (0, 1)}
    assert groups == {(0, 1, 2), (3, 4)}


def test_identical_points_do_not_crash():
    res = kmeans(np.ones((6, 2)), 2, seed=3)
    assert res.inertia == 0.0
    assert set(res.assignments.tolist()) == {0, 1}


@settings(max_examples=150, deadline=None)
@given(st.lists(st.floats(-100, 100, allow_nan=False), min_size=2, max_size=8))
def test_kmeans_is_optimal_on_small_1d_instances(points):
    res = kmeans(points, 2, restarts=10, seed=0)
    assert abs(res.inertia - best_two_partition_inertia(points)) < 1e-9 * max(1.0, res.inertia)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 4))
def test_kmeans_invariants(seed, k):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(int(rng.integers(k, 40)), 2))
    res = kmeans(pts, k, restarts=3, seed=seed)
    hist = np.array(res.inertia_history)
    assert np.all(np.diff(hist) <= 1e-9 * max(1.0, hist[0]))
    assert np.bincount(res.assignments, minlength=k).min() >= 1
    recomputed = sum(np.sum((pts[res.assignments == j] - res.centroids[j]) ** 2) for j in range(k))
    assert abs(recomputed - res.inertia) < 1e-9


def test_kmeans_deterministic_in_seed(rng):
    pts = rng.normal(size=(30, 2))
    a, b = kmeans(pts, 3, seed=11), kmeans(pts, 3, seed=11)
    assert np.array_equal(a.assignments, b.assignments) and a.inertia == b.inertia


def test_kmeans_errors():
    with pytest.raises(ClusteringError):
        kmeans([1.0], 2)
    with pytest.raises(ClusteringError):
        kmeans([1.0, np.nan, 3.0], 2)
    with pytest.raises(ClusteringError):
        kmeans([1.0, 2.0], 0)


def _dataset_with(days, swath):
    n = len(days)
    feats = np.zeros((n, 11))
    feats[:, 7:] = swath
    return EventDataset("t", feats, np.asarray(days, dtype=float), grid_graph(1, n), [str(i) for i in range(n)])


def test_swath_severity_weights():
    inside = np.zeros((1, 11))
    inside[0, 10] = 1.0
    outside = np.zeros((1, 11))
    outside[0, 7] = 1.0
    assert swath_severity(inside)[0] == 3.0 and swath_severity(outside)[0] == 0.0


def test_severity_features_recipe():
    sw = np.array([[1, 0, 0, 0], [0, 0, 0, 1], [0, 1, 0, 0], [0, 0, 1, 0]], dtype=float)
    ds = _dataset_with([0.5, 8.0, 1.0, 3.0], sw)
    pts = severity_features(ds, [0, 1, 2, 3])
    raw_d = np.log(np.array([0.5, 8.0, 1.0, 3.0]) + 1 / 24)
    raw_s = np.array([0.0, 3.0, 1.0, 2.0])
    assert np.allclose(pts[:, 0], (raw_d - raw_d.mean()) / raw_d.std(), atol=1e-12)
    assert np.allclose(pts[:, 1], (raw_s - raw_s.mean()) / raw_s.std(), atol=1e-12)
    np.testing.assert_allclose(pts.mean(axis=0), 0, atol=1e-12)


def test_equal_features_give_equal_points():
    sw = np.array([[0, 0, 0, 1], [0, 0, 0, 1], [1, 0, 0, 0]], dtype=float)
    ds = _dataset_with([4.0, 4.0, 0.2], sw)
    pts = severity_features(ds, [0, 1, 2])
    assert np.array_equal(pts[0], pts[1])
    a = cluster_nodes(ds, [0, 1, 2])
    assert a.labels[0] == a.labels[1] == SIGNIFICANT


def test_severity_features_rejects_unlabeled():
    sw = np.tile([1.0, 0, 0, 0], (3, 1))
    ds = _dataset_with([1.0, np.nan, 2.0], sw)
    with pytest.raises(ClusteringError, match=r"\[1\]"):
        severity_features(ds, [0, 1, 2])


def test_canonical_order_rules():
    assert canonical_order(np.array([[0.9, 0.0], [-0.9, 0.0]])) == (0, 1)
    assert canonical_order(np.array([[-0.9, 0.0], [0.9, 0.0]])) == (1, 0)
    # tie on duration: lower severity becomes cluster 2
    assert canonical_order(np.array([[0.3, -1.0], [0.3, 2.0]])) == (1, 0)
    with pytest.raises(ClusteringError):
        canonical_order(np.zeros((3, 2)))


def test_assignment_invariant_to_centroid_order():
    a = KmeansResult(np.array([0, 0, 1, 1]), np.array([[1.1, 0.9], [-0.9, -1.1]]), 0.0, 1)
    b = KmeansResult(np.array([1, 1, 0, 0]), np.array([[-0.9, -1.1], [1.1, 0.9]]), 0.0, 1)
    la, lb = assign_clusters(a, [0, 2, 4, 5], 7), assign_clusters(b, [0, 2, 4, 5], 7)
    assert np.array_equal(la.labels, lb.labels)
    assert la.labels.tolist() == [SIGNIFICANT, 0, SIGNIFICANT, 0, LESS, LESS, 0]
    assert la.source[1] == SOURCE_UNSET and la.source[0] == SOURCE_KMEANS
    assert not la.is_complete()


def test_assignment_invariant_to_restart_seed(default_event):
    nodes = np.arange(default_event.n)
    a = cluster_nodes(default_event, nodes, seed=1)
    b = cluster_nodes(default_event, nodes, seed=2)
    assert np.array_equal(a.labels, b.labels)


def test_cluster1_has_longer_durations(default_event):
    nodes = np.arange(default_event.n)
    a = cluster_nodes(default_event, nodes)
    days = default_event.duration_days
    assert np.median(days[a.labels == SIGNIFICANT]) > np.median(days[a.labels == LESS])
    assert a.centroids[0, 0] > a.centroids[1, 0]


def test_assign_clusters_rejects_k3():
    res = KmeansResult(np.array([0, 1, 2]), np.zeros((3, 2)), 0.0, 1)
    with pytest.raises(ClusteringError):
        assign_clusters(res, [0, 1, 2], 3)


def test_ari_matches_pair_counting_oracle(rng):
    for _ in range(40):
        n = int(rng.integers(2, 30))
        a, b = rng.integers(0, 3, n), rng.integers(0, 4, n)
        assert abs(adjusted_rand_index(a, b) - ari_pairs(a.tolist(), b.tolist())) < 1e-12


def test_ari_basic_values():
    assert adjusted_rand_index([1, 1, 2, 2], [2, 2, 1, 1]) == 1.0
    assert adjusted_rand_index([0, 0, 0], [0, 0, 0]) == 1.0


def test_planted_clusters_recovered(default_event):
    nodes = np.arange(default_event.n)
    a = cluster_nodes(default_event, nodes)
    assert adjusted_rand_index(a.labels, default_event.planted_cluster) >= 0.9
