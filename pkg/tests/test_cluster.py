import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jule3d.cluster import (GDLAgglomerative, KMeans, agglomerate, build_knn_graph, compact_labels,
                            gdl_affinity, kmeans, load_partition, nmi, save_partition)
from jule3d.cluster.gdl import TIE_RTOL
from jule3d.exceptions import (BadTarget, DegenerateFeatures, LengthMismatch, OverlappingClusters,
                               TooFewPoints)


# reference implementations

def greedy_oracle(X, target, n_neighbors, scale=1.0, init=None):
    """Recompute every pairwise affinity from the dense graph before each merge."""
    W = build_knn_graph(X, n_neighbors, scale).to_dense()
    lab = np.arange(len(X)) if init is None else compact_labels(init)[0]
    ids = sorted(set(lab.tolist()))
    while len(ids) > target:
        vals = {}
        for a, b in itertools.combinations(ids, 2):
            A, B = np.flatnonzero(lab == a), np.flatnonzero(lab == b)
            t1 = sum(W[B, i].sum() * W[i, B].sum() for i in A) / len(A) ** 2
            t2 = sum(W[A, j].sum() * W[j, A].sum() for j in B) / len(B) ** 2
            vals[(a, b)] = t1 + t2
        top = max(vals.values())
        if top <= 0:
            a, b = ids[0], ids[1]
        else:
            a, b = min(p for p, v in vals.items() if v >= top - TIE_RTOL * top)
        lab[lab == b] = a
        ids.remove(b)
    return compact_labels(lab)[0]


def best_inertia(X, K):
    best = np.inf
    for assign in itertools.product(range(K), repeat=len(X)):
        assign = np.array(assign)
        if len(set(assign.tolist())) != K:
            continue
        cost = sum(((X[assign == k] - X[assign == k].mean(axis=0)) ** 2).sum() for k in range(K))
        best = min(best, cost)
    return best


# knn graph

def test_two_points_mutual():
    g = build_knn_graph(np.array([[0.0, 0.0], [3.0, 4.0]]), n_neighbors=5, scale=2.0)
    assert g.neighbors.tolist() == [[1], [0]]
    np.testing.assert_allclose(g.weights, np.exp(-1 / 2.0))
    np.testing.assert_allclose(g.sigma2, 25.0)


def test_identical_points_degenerate():
    with pytest.warns(DegenerateFeatures):
        g = build_knn_graph(np.ones((6, 3)), 3)
    assert (g.weights == 1).all()
    # ties go to the lower index
    assert g.neighbors[0].tolist() == [1, 2, 3]
    assert g.neighbors[5].tolist() == [0, 1, 2]


def test_neighbor_sets_match_sort(rng):
    for _ in range(10):
        X = rng.standard_normal((5, 2))
        g = build_knn_graph(X, 2)
        for i in range(5):
            d = [((X[i] - X[j]) ** 2).sum() if j != i else np.inf for j in range(5)]
            assert g.neighbors[i].tolist() == sorted(range(5), key=lambda j: (d[j], j))[:2]


def test_graph_invariants(rng):
    X = rng.standard_normal((30, 4))
    g = build_knn_graph(X, 6)
    assert g.neighbors.shape == (30, 6)
    assert (g.neighbors != np.arange(30)[:, None]).all()
    assert ((g.weights > 0) & (g.weights <= 1)).all()
    smaller = build_knn_graph(X, 5)
    np.testing.assert_array_equal(smaller.neighbors, g.neighbors[:, :5])
    assert build_knn_graph(X[:4], 20).neighbors.shape == (4, 3)


# affinity

def _pair_graph(w_ij, w_ji):
    g = build_knn_graph(np.array([[0.0], [1.0]]), 1)
    return type(g)(g.neighbors, np.array([[w_ij], [w_ji]]), g.sigma2)


def test_affinity_examples(rng):
    assert gdl_affinity(_pair_graph(0.5, 0.5), [0], [1]) == pytest.approx(0.5)
    X = np.vstack([rng.standard_normal((5, 2)), rng.standard_normal((5, 2)) + 100])
    g = build_knn_graph(X, 3)
    assert gdl_affinity(g, range(5), range(5, 10)) == 0
    with pytest.raises(OverlappingClusters):
        gdl_affinity(g, [0, 1], [1, 2])


def test_affinity_symmetric_and_matches_definition(rng):
    X = rng.standard_normal((15, 3))
    g = build_knn_graph(X, 4)
    W = g.to_dense()
    A, B = [0, 3, 5, 7], [1, 2, 9]
    expected = (sum(W[B, i].sum() * W[i, B].sum() for i in A) / 16
                + sum(W[A, j].sum() * W[j, A].sum() for j in B) / 9)
    assert gdl_affinity(g, A, B) == pytest.approx(expected)
    assert gdl_affinity(g, B, A) == pytest.approx(expected)


# agglomeration

def test_agglomerate_identity_and_pairs():
    X = np.array([[0.0, 0.0], [0.1, 0.0], [10.0, 0.0], [10.0, 0.1]])
    np.testing.assert_array_equal(agglomerate(X, 4, 2), np.arange(4))
    np.testing.assert_array_equal(agglomerate(X, 2, 2), [0, 0, 1, 1])
    with pytest.raises(BadTarget):
        agglomerate(X, 5, 2)
    with pytest.raises(BadTarget):
        agglomerate(X, 0, 2)


def test_agglomerate_matches_oracle_n12(rng):
    X = rng.standard_normal((12, 3))
    np.testing.assert_array_equal(agglomerate(X, 3, 4), greedy_oracle(X, 3, 4))


def test_agglomerate_matches_oracle_from_partition(rng):
    for _ in range(5):
        n = int(rng.integers(10, 30))
        X = rng.standard_normal((n, 2))
        init = rng.integers(0, n // 2, n)
        m0 = np.unique(init).size
        target = int(rng.integers(1, m0 + 1))
        np.testing.assert_array_equal(agglomerate(X, target, 5, init_labels=init),
                                      greedy_oracle(X, target, 5, init=init))


def test_agglomerate_disconnected_components():
    # three far-apart groups with in-group edges only: merging down to 1 must cross zero affinity
    X = np.vstack([np.zeros((3, 1)) + [[0.0], [0.1], [0.2]], [[50.0], [50.1], [50.2]], [[99.0], [99.1], [99.2]]])
    labels = agglomerate(X, 1, 2)
    assert (labels == 0).all()
    np.testing.assert_array_equal(agglomerate(X, 2, 2), greedy_oracle(X, 2, 2))


def test_estimators(rng):
    X = np.vstack([rng.standard_normal((20, 2)), rng.standard_normal((20, 2)) + 20])
    est = GDLAgglomerative(n_clusters=2, n_neighbors=10).fit(X)
    assert est.get_params()["n_neighbors"] == 10
    assert nmi(est.labels_, np.repeat([0, 1], 20)) == 1.0
    km = KMeans(n_clusters=2, seed=1).fit(X)
    assert nmi(km.labels_, np.repeat([0, 1], 20)) == 1.0
    np.testing.assert_array_equal(km.predict(X), km.labels_)
    assert km.transform(X).shape == (40, 2)
    assert km.fit_predict(X).shape == (40,)


# k-means

def test_kmeans_single_cluster(rng):
    X = rng.standard_normal((10, 3))
    labels, centers, _ = kmeans(X, 1)
    assert (labels == 0).all()
    np.testing.assert_allclose(centers[0], X.mean(axis=0))


def test_kmeans_pairs():
    X = np.array([[0.0, 0.0], [0.1, 0.0], [10.0, 0.0], [10.1, 0.0]])
    labels, _, _ = kmeans(X, 2, seed=0)
    assert labels[0] == labels[1] != labels[2] == labels[3]


def test_kmeans_six_points_optimal():
    X = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [8.0, 8.0], [9.0, 8.0], [8.0, 9.0]])
    _, _, hist = kmeans(X, 2, seed=0)
    assert hist[-1] == pytest.approx(best_inertia(X, 2))


def test_kmeans_too_few_points():
    with pytest.raises(TooFewPoints):
        kmeans(np.zeros((2, 2)), 3)


def test_kmeans_ties_go_to_lower_centroid():
    # coincident points: both centroids sit on them, so every distance ties
    labels, centers, hist = kmeans(np.array([[1.0], [1.0], [1.0]]), 2, seed=0)
    np.testing.assert_array_equal(centers, [[1.0], [1.0]])
    assert (labels == 0).all()
    assert hist[-1] == 0


def test_kmeans_empty_cluster_repair():
    X = np.array([[0.0], [0.0], [0.0], [10.0]])
    # every initial centroid on the zeros leaves one cluster empty after assignment
    from jule3d.cluster.kmeans import _update
    labels = np.zeros(4, dtype=np.int64)
    dist = np.array([0.0, 0.0, 0.0, 100.0])
    centers = _update(X, labels, dist, 2)
    np.testing.assert_array_equal(labels, [0, 0, 0, 1])
    np.testing.assert_array_equal(centers, [[0.0], [10.0]])


def test_kmeans_deterministic(rng):
    X = rng.standard_normal((50, 3))
    a = kmeans(X, 4, seed=7)
    b = kmeans(X, 4, seed=7)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(3, 8), st.integers(1, 3))
def test_kmeans_small_exhaustive_oracle(seed, n, K):
    gen = np.random.default_rng(seed)
    X = np.round(gen.standard_normal((n, 2)), 1)
    K = min(K, n)
    labels, centers, hist = kmeans(X, K, seed=seed)
    assert hist[-1] >= best_inertia(X, K) - 1e-9
    assert all(b <= a + 1e-9 for a, b in zip(hist, hist[1:]))
    d = ((X[:, None, :] - centers[None]) ** 2).sum(-1)
    assert (d[np.arange(n), labels] <= d.min(axis=1) + 1e-12).all()
    np.testing.assert_allclose(hist[-1], d[np.arange(n), labels].sum(), rtol=1e-9, atol=1e-12)


# NMI

def test_nmi_examples():
    assert nmi([0, 1, 2, 2], [0, 1, 2, 2]) == 1.0
    assert nmi([0, 0, 1, 1], [1, 1, 0, 0]) == 1.0
    assert nmi([0, 0, 1, 1], [0, 1, 0, 1]) == pytest.approx(0.0, abs=1e-12)
    assert nmi([3, 3, 3], [1, 1, 1]) == 1.0
    assert nmi([3, 3, 3], [0, 1, 1]) == 0.0
    with pytest.raises(LengthMismatch):
        nmi([0, 1], [0, 1, 1])


def test_nmi_matches_sklearn(rng):
    from sklearn.metrics import normalized_mutual_info_score
    for _ in range(20):
        a = rng.integers(0, 4, 50)
        b = rng.integers(0, 3, 50)
        assert nmi(a, b) == pytest.approx(normalized_mutual_info_score(a, b, average_method="geometric"))


labelings = st.integers(1, 40).flatmap(
    lambda n: st.tuples(st.lists(st.integers(0, 5), min_size=n, max_size=n),
                        st.lists(st.integers(0, 5), min_size=n, max_size=n)))


@settings(max_examples=1000, deadline=None)
@given(labelings, st.permutations(range(6)))
def test_nmi_properties(pair, perm):
    a, b = (np.array(v) for v in pair)
    score = nmi(a, b)
    assert 0.0 <= score <= 1.0
    assert score == pytest.approx(nmi(b, a), abs=1e-12)
    assert score == pytest.approx(nmi(np.array(perm)[a], b), abs=1e-12)


def test_partition_dump(tmp_path):
    labels = np.array([2, 0, 1, 1, 0])
    save_partition(labels, tmp_path / "p.txt")
    np.testing.assert_array_equal(load_partition(tmp_path / "p.txt"), labels)
    assert (tmp_path / "p.txt").read_text().startswith("# n=5 m=3")
