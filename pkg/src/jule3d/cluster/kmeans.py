"""Seeded k-means (k-means++ initialization, Lloyd iterations)."""

import numpy as np

from ..exceptions import TooFewPoints
from ..validation import check_features

_ROW_CHUNK = 65536


def pairwise_sq_dist(X, C):
    """``||X[i] - C[k]||^2`` by explicit differences, chunked over rows."""
    out = np.empty((X.shape[0], C.shape[0]))
    for s in range(0, X.shape[0], _ROW_CHUNK):
        diff = X[s:s + _ROW_CHUNK, None, :] - C[None, :, :]
        out[s:s + _ROW_CHUNK] = np.einsum("ikd,ikd->ik", diff, diff)
    return out


def _assign(X, C):
    d2 = pairwise_sq_dist(X, C)
    # argmin returns the first minimum, so ties go to the lower centroid index
    labels = np.argmin(d2, axis=1)
    return labels, d2[np.arange(X.shape[0]), labels]


def kmeans_plusplus(X, n_clusters, rng):
    """D^2-weighted seeding; coincident candidates are picked uniformly."""
    n = X.shape[0]
    centers = np.empty((n_clusters, X.shape[1]))
    first = int(rng.integers(n))
    centers[0] = X[first]
    closest = pairwise_sq_dist(X, centers[:1])[:, 0]
    for k in range(1, n_clusters):
        total = closest.sum()
        if total > 0:
            idx = int(rng.choice(n, p=closest / total))
        else:
            idx = int(rng.integers(n))
        centers[k] = X[idx]
        closest = np.minimum(closest, pairwise_sq_dist(X, centers[k:k + 1])[:, 0])
    return centers


def _update(X, labels, dist, n_clusters):
    counts = np.bincount(labels, minlength=n_clusters)
    # an empty cluster takes the point farthest from its own centroid
    for k in np.flatnonzero(counts == 0):
        donors = counts[labels] > 1
        far = int(np.argmax(np.where(donors, dist, -1.0)))
        counts[labels[far]] -= 1
        labels[far] = k
        dist[far] = 0.0
        counts[k] = 1
    sums = np.zeros((n_clusters, X.shape[1]))
    np.add.at(sums, labels, X)
    return sums / counts[:, None]


def kmeans(X, n_clusters, seed=0, max_iter=100):
    """Cluster ``X`` into ``n_clusters`` groups.

    Iterates assignment and mean updates until the assignment stops
    changing or ``max_iter`` updates have run. Returned labels are always
    the nearest-centroid assignment for the returned centroids.

    Returns
    -------
    labels : ndarray of int64, shape (n,)
    centers : ndarray, shape (n_clusters, d)
    inertia : list of float
        Sum of squared distances after every assignment step; non-increasing.
    """
    X = check_features(X).astype(np.float64, copy=False)
    n_clusters = int(n_clusters)
    if n_clusters < 1:
        raise ValueError("n_clusters must be >= 1")
    if X.shape[0] < n_clusters:
        raise TooFewPoints(f"{X.shape[0]} points cannot form {n_clusters} clusters")
    rng = np.random.default_rng(seed)
    centers = kmeans_plusplus(X, n_clusters, rng)
    labels, dist = _assign(X, centers)
    history = [float(dist.sum())]
    for _ in range(max_iter):
        centers = _update(X, labels, dist, n_clusters)
        new_labels, dist = _assign(X, centers)
        history.append(float(dist.sum()))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    else:
        labels, dist = _assign(X, centers)
    return labels.astype(np.int64), centers, history
