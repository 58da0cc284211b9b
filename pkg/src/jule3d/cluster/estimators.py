"""scikit-learn style wrappers around the clustering functions."""

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ..validation import check_features
from .gdl import agglomerate
from .kmeans import _assign, kmeans, pairwise_sq_dist


class KMeans(ClusterMixin, TransformerMixin, BaseEstimator):
    """k-means++ seeded Lloyd clustering.

    Parameters
    ----------
    n_clusters : int, default=3
    seed : int, default=0
    max_iter : int, default=100

    Attributes
    ----------
    labels_, cluster_centers_, inertia_history_, inertia_
    """

    def __init__(self, n_clusters=3, seed=0, max_iter=100):
        self.n_clusters = n_clusters
        self.seed = seed
        self.max_iter = max_iter

    def fit(self, X, y=None):
        labels, centers, history = kmeans(X, self.n_clusters, self.seed, self.max_iter)
        self.labels_ = labels
        self.cluster_centers_ = centers
        self.inertia_history_ = history
        self.inertia_ = history[-1]
        return self

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        X = check_features(X).astype(np.float64, copy=False)
        return _assign(X, self.cluster_centers_)[0].astype(np.int64)

    def transform(self, X):
        """Euclidean distance to every centroid."""
        check_is_fitted(self, "cluster_centers_")
        X = check_features(X).astype(np.float64, copy=False)
        return np.sqrt(pairwise_sq_dist(X, self.cluster_centers_))


class GDLAgglomerative(ClusterMixin, BaseEstimator):
    """Graph-degree-linkage agglomerative clustering.

    Parameters
    ----------
    n_clusters : int, default=2
    n_neighbors : int, default=20
        Out-degree of the KNN graph.
    scale : float, default=1.0
        Bandwidth multiplier of the edge weights.
    """

    def __init__(self, n_clusters=2, n_neighbors=20, scale=1.0):
        self.n_clusters = n_clusters
        self.n_neighbors = n_neighbors
        self.scale = scale

    def fit(self, X, y=None, init_labels=None):
        self.labels_ = agglomerate(X, self.n_clusters, self.n_neighbors, self.scale, init_labels)
        self.n_clusters_ = int(self.labels_.max()) + 1
        return self
