"""KNN graphs, graph-degree-linkage merging, k-means and NMI."""

from .estimators import GDLAgglomerative, KMeans
from .gdl import agglomerate, compact_labels, gdl_affinity, graph_matrix
from .kmeans import kmeans
from .knn import KnnGraph, build_knn_graph
from .metrics import contingency, load_partition, nmi, save_partition

__all__ = [
    "GDLAgglomerative", "KMeans", "KnnGraph", "agglomerate", "build_knn_graph",
    "compact_labels", "contingency", "gdl_affinity", "graph_matrix", "kmeans",
    "load_partition", "nmi", "save_partition",
]
