"""Directed, weighted k-nearest-neighbour graphs."""

import warnings
from dataclasses import dataclass

import numpy as np

from ..exceptions import DegenerateFeatures
from ..validation import check_features

_ROW_CHUNK = 512


@dataclass(frozen=True, eq=False)
class KnnGraph:
    """Out-neighbour lists with edge weights ``W(i -> neighbors[i, k])``.

    Attributes
    ----------
    neighbors : int ndarray, shape (n, k)
        Row ``i`` lists the ``k`` nearest other samples, nearest first.
    weights : float ndarray, shape (n, k)
    sigma2 : float ndarray, shape (n,)
        Mean squared distance from each node to its neighbours.
    """

    neighbors: np.ndarray
    weights: np.ndarray
    sigma2: np.ndarray

    @property
    def n_nodes(self):
        return self.neighbors.shape[0]

    def to_dense(self):
        """``W[i, j]`` as an ``(n, n)`` array, zero where there is no edge."""
        n = self.n_nodes
        W = np.zeros((n, n))
        rows = np.repeat(np.arange(n), self.neighbors.shape[1])
        W[rows, self.neighbors.ravel()] = self.weights.ravel()
        return W


def squared_distances(X, rows=None):
    """Squared Euclidean distances from ``X[rows]`` to every row of ``X``."""
    Xr = X if rows is None else X[rows]
    sq = np.einsum("ij,ij->i", X, X)
    sqr = sq if rows is None else sq[rows]
    d2 = sqr[:, None] + sq[None, :] - 2.0 * (Xr @ X.T)
    np.maximum(d2, 0.0, out=d2)
    return d2


def build_knn_graph(X, n_neighbors=20, scale=1.0):
    """Weighted KNN graph ``W(i->j) = exp(-||x_i - x_j||^2 / (scale * sigma_i^2))``.

    ``sigma_i^2`` is the mean squared distance from ``i`` to its
    ``n_neighbors`` nearest samples. Ties in distance go to the lower
    index. A node whose neighbours all coincide with it gets weight 1 on
    every edge, with a :class:`DegenerateFeatures` warning.
    """
    X = check_features(X, min_samples=2).astype(np.float64, copy=False)
    n = X.shape[0]
    k = min(int(n_neighbors), n - 1)
    if k < 1:
        raise ValueError("n_neighbors must be >= 1")
    if not scale > 0:
        raise ValueError("scale must be > 0")
    neighbors = np.empty((n, k), dtype=np.intp)
    d2n = np.empty((n, k))
    for s in range(0, n, _ROW_CHUNK):
        rows = np.arange(s, min(n, s + _ROW_CHUNK))
        d2 = squared_distances(X, rows)
        d2[np.arange(rows.size), rows] = np.inf
        # stable sort keeps the lower index first among equal distances
        order = np.argsort(d2, axis=1, kind="stable")[:, :k]
        neighbors[rows] = order
        d2n[rows] = np.take_along_axis(d2, order, axis=1)
    sigma2 = d2n.mean(axis=1)
    degenerate = sigma2 <= 0
    with np.errstate(divide="ignore", invalid="ignore"):
        weights = np.exp(-d2n / (scale * sigma2[:, None]))
    if degenerate.any():
        warnings.warn(f"{int(degenerate.sum())} node(s) coincide with all their neighbours; "
                      "their edge weights are set to 1", DegenerateFeatures, stacklevel=2)
        weights[degenerate] = 1.0
    return KnnGraph(neighbors, weights, sigma2)
