"""Agglomerative clustering with graph-degree linkage.

For clusters ``A`` and ``B`` on a directed weighted graph ``W``::

    affinity(A, B) = 1/|A|^2 * sum_{i in A} indeg_B(i) * outdeg_B(i)
                   + 1/|B|^2 * sum_{j in B} indeg_A(j) * outdeg_A(j)

where ``indeg_B(i) = sum_{j in B} W(j -> i)`` and
``outdeg_B(i) = sum_{j in B} W(i -> j)``. Each step merges the pair with
the largest affinity. Near-ties (relative gap below :data:`TIE_RTOL`) go to
the lexicographically smallest ``(a, b)``; when every affinity is zero
the two lowest cluster ids merge. The merged cluster keeps the lower id.
"""

import heapq
from collections import defaultdict

import numpy as np
from scipy import sparse

from ..exceptions import BadTarget, OverlappingClusters
from ..validation import check_labels
from .knn import KnnGraph, build_knn_graph

TIE_RTOL = 1e-12


def graph_matrix(graph):
    """Sparse CSR ``W`` with ``W[i, j] = W(i -> j)``."""
    n, k = graph.neighbors.shape
    rows = np.repeat(np.arange(n), k)
    return sparse.csr_matrix((graph.weights.ravel(), (rows, graph.neighbors.ravel())), shape=(n, n))


def gdl_affinity(graph, A, B):
    """Affinity between two disjoint node sets of ``graph``."""
    A = np.unique(np.asarray(A, dtype=np.intp))
    B = np.unique(np.asarray(B, dtype=np.intp))
    if A.size == 0 or B.size == 0:
        raise ValueError("clusters must be non-empty")
    if np.intersect1d(A, B).size:
        raise OverlappingClusters("the two node sets share members")
    W = graph_matrix(graph)

    def half(P, Q):
        # paths Q -> i -> Q summed over i in P
        indeg = np.asarray(W[Q][:, P].sum(axis=0)).ravel()
        outdeg = np.asarray(W[P][:, Q].sum(axis=1)).ravel()
        return float(indeg @ outdeg) / P.size ** 2

    return half(A, B) + half(B, A)


def compact_labels(labels):
    """Relabel to ``0..m-1`` preserving the order of first ids; returns ``(labels, m)``."""
    uniq, inv = np.unique(np.asarray(labels), return_inverse=True)
    return inv.astype(np.int64), uniq.size


class _MergeState:
    """Incremental degree bookkeeping for greedy merging.

    ``out_w[i][c]`` and ``in_w[i][c]`` are the out/in degrees of node ``i``
    towards cluster ``c``; ``S[c][d]`` is ``sum_{i in c} in_w[i][d] * out_w[i][d]``.
    Merging touches only graph neighbours of the absorbed cluster.
    """

    def __init__(self, graph, labels):
        n, k = graph.neighbors.shape
        self.nbr = graph.neighbors
        self.wts = graph.weights
        in_src = [[] for _ in range(n)]
        for i in range(n):
            for j, w in zip(self.nbr[i].tolist(), self.wts[i].tolist()):
                in_src[j].append((i, w))
        self.in_src = in_src
        self.label = labels.tolist()
        m = int(labels.max()) + 1
        self.members = [[] for _ in range(m)]
        for i, c in enumerate(self.label):
            self.members[c].append(i)
        self.active = np.ones(m, dtype=bool)
        self.out_w = [defaultdict(float) for _ in range(n)]
        self.in_w = [defaultdict(float) for _ in range(n)]
        lab = self.label
        for i in range(n):
            for j, w in zip(self.nbr[i].tolist(), self.wts[i].tolist()):
                self.out_w[i][lab[j]] += w
                self.in_w[j][lab[i]] += w
        self.S = [defaultdict(float) for _ in range(m)]
        for i in range(n):
            S_c = self.S[lab[i]]
            o = self.out_w[i]
            for d, v in self.in_w[i].items():
                if d in o:
                    S_c[d] += v * o[d]
        self.aff = {}
        self.heap = []
        for a in range(m):
            for b in list(self.S[a]):
                if a != b:
                    self._refresh(min(a, b), max(a, b))

    def affinity(self, a, b):
        na, nb = len(self.members[a]), len(self.members[b])
        return self.S[a].get(b, 0.0) / na ** 2 + self.S[b].get(a, 0.0) / nb ** 2

    def _refresh(self, a, b):
        v = self.affinity(a, b)
        self.aff[(a, b)] = v
        heapq.heappush(self.heap, (-v, a, b))

    def _valid(self, entry):
        v, a, b = -entry[0], entry[1], entry[2]
        return self.active[a] and self.active[b] and self.aff.get((a, b)) == v

    def best_pair(self):
        heap = self.heap
        while heap and not self._valid(heap[0]):
            heapq.heappop(heap)
        if not heap or -heap[0][0] <= 0.0:
            a, b = np.flatnonzero(self.active)[:2]
            return int(a), int(b)
        top = -heap[0][0]
        cut = top - TIE_RTOL * top
        tied = []
        while heap and -heap[0][0] >= cut:
            entry = heapq.heappop(heap)
            if self._valid(entry):
                tied.append(entry)
        best = min(tied, key=lambda e: (e[1], e[2]))
        for entry in tied:
            heapq.heappush(heap, entry)
        return best[1], best[2]

    def merge(self, a, b):
        """Absorb cluster ``b`` into ``a`` (``a < b``)."""
        label, out_w, in_w, S = self.label, self.out_w, self.in_w, self.S
        touched = set()
        for i in self.members[b]:
            touched.update(self.nbr[i].tolist())
            touched.update(j for j, _ in self.in_src[i])
        touched_clusters = set()
        for t in touched:
            o, n_in = out_w[t], in_w[t]
            old_a = n_in.get(a, 0.0) * o.get(a, 0.0)
            old_b = n_in.get(b, 0.0) * o.get(b, 0.0)
            if b in o:
                o[a] = o.get(a, 0.0) + o.pop(b)
            if b in n_in:
                n_in[a] = n_in.get(a, 0.0) + n_in.pop(b)
            new_a = n_in.get(a, 0.0) * o.get(a, 0.0)
            c = label[t]
            S_c = S[c]
            if new_a != 0.0 or a in S_c:
                S_c[a] = S_c.get(a, 0.0) + new_a - old_a
            if b in S_c:
                S_c[b] -= old_b
            touched_clusters.add(c)
        for c in touched_clusters:
            S[c].pop(b, None)
        for i in self.members[b]:
            label[i] = a
        self.members[a].extend(self.members[b])
        self.members[b] = []
        S_a = S[a]
        for d, v in S[b].items():
            S_a[d] = S_a.get(d, 0.0) + v
        S[b] = defaultdict(float)
        S_a.pop(a, None)
        S_a.pop(b, None)
        self.active[b] = False
        for c in set(S_a) | touched_clusters:
            if c != a and c != b and self.active[c]:
                self._refresh(min(a, c), max(a, c))


def agglomerate(X, n_clusters, n_neighbors=20, scale=1.0, init_labels=None, graph=None):
    """Greedy graph-degree-linkage merging down to ``n_clusters`` clusters.

    Parameters
    ----------
    X : ndarray, shape (n, d)
        Samples; used to build the KNN graph unless ``graph`` is given.
    n_clusters : int
        Target cluster count, between 1 and the initial count.
    n_neighbors, scale : graph parameters, see :func:`build_knn_graph`.
    init_labels : array of int, optional
        Starting partition; singletons when omitted.
    graph : KnnGraph, optional
        Precomputed graph over the same samples.

    Returns
    -------
    labels : ndarray of int64, shape (n,)
        Compacted to ``0..n_clusters-1`` in order of the lowest surviving id.
    """
    if graph is None:
        graph = build_knn_graph(X, n_neighbors, scale)
    elif not isinstance(graph, KnnGraph):
        raise TypeError("graph must be a KnnGraph")
    n = graph.n_nodes
    if init_labels is None:
        labels = np.arange(n, dtype=np.int64)
        m = n
    else:
        labels, m = compact_labels(check_labels(init_labels, n))
    target = int(n_clusters)
    if not 1 <= target <= m:
        raise BadTarget(f"target {target} must lie in [1, {m}]")
    if target == m:
        return labels
    state = _MergeState(graph, labels)
    for _ in range(m - target):
        a, b = state.best_pair()
        state.merge(a, b)
    return compact_labels(np.asarray(state.label))[0]
