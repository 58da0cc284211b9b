"""Joint unsupervised learning of CNN features and agglomerative clusters.

Each period extracts features with the current network (eval mode),
merges the current partition down to ``max(C, ceil(eta * m))`` clusters on a
freshly built KNN graph, and trains the network on the resulting labels.
After the count reaches ``C`` the network gets one more training bout on
the final labels, so there is always one more training event than merge
periods.
"""

import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .cluster import agglomerate, build_knn_graph
from .exceptions import BadTarget, ConfigInvalid, IoFailure
from .net3d import TrainConfig, TrainState, forward_features, init_params, train_epochs


@dataclass(frozen=True)
class JuleConfig:
    """Loop settings.

    Attributes
    ----------
    n_clusters : int
        Final cluster count ``C``.
    eta : float
        Per-period shrink factor in (0, 1).
    epochs_per_period : int
        Training epochs after every merge period and in the final bout.
    train : TrainConfig
        SGD settings; its ``epochs`` and ``seed`` are overridden per bout.
    n_neighbors, scale : KNN graph settings.
    seed : int
        Base seed for weight init and every training bout.
    feature_batch : int
        Batch size for feature extraction.
    """

    n_clusters: int = 100
    eta: float = 0.9
    epochs_per_period: int = 1
    train: TrainConfig = field(default_factory=TrainConfig)
    n_neighbors: int = 20
    scale: float = 1.0
    seed: int = 0
    feature_batch: int = 64

    def validate(self, n_samples=None):
        if not isinstance(self.n_clusters, (int, np.integer)) or self.n_clusters < 1:
            raise ConfigInvalid(f"n_clusters must be an integer >= 1, got {self.n_clusters!r}")
        if n_samples is not None and self.n_clusters >= n_samples:
            raise ConfigInvalid(f"n_clusters ({self.n_clusters}) must be below the patch count ({n_samples})")
        if not 0 < self.eta < 1:
            raise ConfigInvalid(f"eta must lie in (0, 1), got {self.eta}")
        if self.epochs_per_period < 1:
            raise ConfigInvalid("epochs_per_period must be >= 1")
        if self.n_neighbors < 1:
            raise ConfigInvalid("n_neighbors must be >= 1")
        if not self.scale > 0:
            raise ConfigInvalid("scale must be > 0")
        if self.feature_batch < 1:
            raise ConfigInvalid("feature_batch must be >= 1")
        return self


@dataclass(frozen=True)
class TraceRecord:
    """One training event: ``t`` counts periods from 1, ``final`` marks the extra bout."""

    t: int
    n_clusters: int
    loss: float
    wall_s: float
    final: bool = False

    def to_line(self):
        kind = "final" if self.final else "period"
        return f"t={self.t} m={self.n_clusters} loss={self.loss!r} wall_s={self.wall_s:.3f} event={kind}"

    @classmethod
    def from_line(cls, line):
        kv = dict(tok.split("=", 1) for tok in line.split())
        return cls(int(kv["t"]), int(kv["m"]), float(kv["loss"]), float(kv["wall_s"]), kv["event"] == "final")


def save_trace(trace, path):
    try:
        Path(path).write_text("".join(rec.to_line() + "\n" for rec in trace))
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def load_trace(path):
    """Read records written by :func:`save_trace`; blank and ``#`` lines are skipped."""
    lines = Path(path).read_text().splitlines()
    return [TraceRecord.from_line(ln) for ln in lines if ln.strip() and not ln.lstrip().startswith("#")]


def next_target(m, n_clusters, eta):
    """Cluster count after one period: ``max(C, ceil(eta * m))``."""
    # round before ceil so products like 0.9 * 100 do not land on 90.00000000000001
    return max(int(n_clusters), math.ceil(round(eta * m, 9)))


def period_schedule(n_samples, n_clusters, eta):
    """Cluster counts after each merge period, ending at ``n_clusters``."""
    counts, m = [], n_samples
    while m > n_clusters:
        m = next_target(m, n_clusters, eta)
        counts.append(m)
    return counts


def init_clusters(X):
    """Singleton partition over the rows of ``X``."""
    return np.arange(np.asarray(X).shape[0], dtype=np.int64)


def merge_period(X, labels, target, cfg):
    """Merge ``labels`` down to ``target`` clusters on a graph built from ``X``."""
    m = np.unique(labels).size
    if not cfg.n_clusters <= target < m:
        raise BadTarget(f"period target {target} must lie in [{cfg.n_clusters}, {m})")
    graph = build_knn_graph(X, cfg.n_neighbors, cfg.scale)
    return agglomerate(X, target, init_labels=labels, graph=graph)


def _bout_seed(base, t):
    return int(np.random.SeedSequence([int(base), int(t)]).generate_state(1)[0])


def run_jule(patches, cfg, params=None, callback=None):
    """Run the recurrent merge/train loop on normalized patches.

    Parameters
    ----------
    patches : PatchSet or ndarray, shape (n, 27, 27, 27)
    cfg : JuleConfig
    params : NetParams, optional
        Starting weights; seeded from ``cfg.seed`` when omitted.
    callback : callable, optional
        Called as ``callback(t, params, labels, record)`` after every
        training event, e.g. to checkpoint between periods.

    Returns
    -------
    params : NetParams
    labels : ndarray of int64, values ``0..C-1``
    trace : list of TraceRecord
    """
    n = len(patches)
    cfg.validate(n)
    if params is None:
        params = init_params(cfg.seed)
    state = TrainState()
    labels = None
    trace = []
    t = 0
    m = n
    while True:
        start = time.perf_counter()
        final = m == cfg.n_clusters
        if not final:
            X = forward_features(params, patches, cfg.feature_batch)
            if labels is None:
                labels = init_clusters(X)
            m = next_target(m, cfg.n_clusters, cfg.eta)
            labels = merge_period(X, labels, m, cfg)
        t += 1
        bout = replace(cfg.train, epochs=cfg.epochs_per_period, seed=_bout_seed(cfg.seed, t))
        params, history = train_epochs(params, patches, labels, bout, state)
        record = TraceRecord(t, m, float(np.mean(history)), time.perf_counter() - start, final)
        trace.append(record)
        if callback is not None:
            callback(t, params, labels, record)
        if final:
            return params, labels, trace


class JULE(TransformerMixin, BaseEstimator):
    """Estimator wrapper for :func:`run_jule`.

    ``fit`` learns the network and the final partition from normalized
    patches; ``transform`` maps patches to unit-norm 160-d features.

    Attributes
    ----------
    params_ : NetParams
    labels_ : ndarray of int64
    trace_ : list of TraceRecord
    """

    def __init__(self, n_clusters=100, eta=0.9, epochs_per_period=1, learning_rate=0.01,
                 momentum=0.9, weight_decay=5e-5, batch_size=128, n_neighbors=20, scale=1.0, seed=0):
        self.n_clusters = n_clusters
        self.eta = eta
        self.epochs_per_period = epochs_per_period
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.n_neighbors = n_neighbors
        self.scale = scale
        self.seed = seed

    def _config(self):
        train = TrainConfig(learning_rate=self.learning_rate, momentum=self.momentum,
                            weight_decay=self.weight_decay, batch_size=self.batch_size)
        return JuleConfig(self.n_clusters, self.eta, self.epochs_per_period, train,
                          self.n_neighbors, self.scale, self.seed)

    def fit(self, X, y=None):
        self.params_, self.labels_, self.trace_ = run_jule(X, self._config())
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        return forward_features(self.params_, X)
