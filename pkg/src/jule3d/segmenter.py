"""Volume segmentation from learned patch features, plus intensity baselines.

Learned segmentation clusters the features of every dense-grid patch with
k-means and paints each patch label onto the ``s^3`` block around its
center. Voxels outside every block, and background voxels, keep the
sentinel value 255.
"""

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from .cluster import kmeans, nmi
from .exceptions import ConfigInvalid, IoFailure, NoForeground, NoOverlap, OverlapDetected, WrongPatchSize
from .net3d import PATCH_SIZE, forward_features
from .sampler import dense_grid_centers, extract_patches, normalize_patches, sample_training_patches
from .validation import check_patch_size, check_stride, check_volume
from .volume import SENTINEL, LabelMap

OTSU_BINS = 256
_TIE_RTOL = 1e-12


@dataclass(frozen=True)
class SegmentationConfig:
    """Dense-grid and clustering settings for :func:`segment_volume`."""

    w: int = 27
    stride: int = 5
    n_clusters: int = 3
    threshold: int = 0
    seed: int = 0
    batch_size: int = 256

    def validate(self):
        check_patch_size(self.w)
        check_stride(self.stride, self.w)
        if self.stride % 2 == 0:
            raise ConfigInvalid(f"stride must be odd so each block is centered, got {self.stride}")
        if self.n_clusters < 2:
            raise ConfigInvalid(f"n_clusters must be >= 2, got {self.n_clusters}")
        if self.batch_size < 1:
            raise ConfigInvalid("batch_size must be >= 1")
        return self


def project_labels(centers, labels, s, dims, n_classes=None, spacing=(1.0, 1.0, 1.0)):
    """Paint ``labels[i]`` onto the ``s^3`` cube centered at ``centers[i]``.

    Raises :class:`OverlapDetected` if two cubes share a voxel.
    """
    if s < 1 or s % 2 == 0:
        raise ConfigInvalid(f"block size must be a positive odd integer, got {s}")
    centers = np.asarray(centers, dtype=np.int64).reshape(-1, 3)
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if labels.shape[0] != centers.shape[0]:
        raise ValueError(f"{labels.shape[0]} labels for {centers.shape[0]} centers")
    if n_classes is None:
        n_classes = int(labels.max()) + 1 if labels.size else 0
    h = s // 2
    dims = tuple(int(d) for d in dims)
    out = np.full(dims, SENTINEL, dtype=np.uint8)
    if centers.size:
        if (centers - h < 0).any() or (centers + h >= np.array(dims)).any():
            raise ValueError("a block extends past the volume")
        r = np.arange(-h, h + 1)
        off = np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)
        pts = (centers[:, None, :] + off[None]).reshape(-1, 3)
        flat = np.ravel_multi_index(pts.T, dims)
        if np.unique(flat).size != flat.size:
            raise OverlapDetected("label blocks overlap; the lattice pitch must equal the block size")
        out.reshape(-1)[flat] = np.repeat(labels, off.shape[0]).astype(np.uint8)
    return LabelMap(out, n_classes, spacing)


def dense_features(volume, params, norm_stats, cfg):
    """Centers and features of every lattice patch; patches are cut batch by batch."""
    if cfg.w != PATCH_SIZE:
        raise WrongPatchSize(f"the network takes {PATCH_SIZE}^3 patches, config asks for {cfg.w}")
    centers = dense_grid_centers(volume, cfg.w, cfg.stride, cfg.threshold)
    feats = []
    for s in range(0, centers.shape[0], cfg.batch_size):
        batch = extract_patches(volume, centers[s:s + cfg.batch_size], cfg.w, norm_stats)
        feats.append(forward_features(params, batch))
    return centers, np.concatenate(feats)


def segment_volume(volume, params, norm_stats, cfg=None):
    """Label a volume with k-means over learned patch features."""
    cfg = (cfg or SegmentationConfig()).validate()
    volume = check_volume(volume)
    centers, feats = dense_features(volume, params, norm_stats, cfg)
    if centers.shape[0] < cfg.n_clusters:
        raise NoForeground(f"{centers.shape[0]} lattice patches cannot form {cfg.n_clusters} clusters")
    labels, _, _ = kmeans(feats, cfg.n_clusters, cfg.seed)
    return project_labels(centers, labels, cfg.stride, volume.dims, cfg.n_clusters, volume.spacing)


def _foreground(volume, threshold):
    mask = volume.voxels >= threshold
    if not mask.any():
        raise NoForeground(f"no voxel is >= {threshold}")
    return mask


def baseline_intensity_kmeans(volume, n_clusters=3, threshold=0, seed=0):
    """k-means on raw foreground intensities; labels ordered by centroid intensity."""
    volume = check_volume(volume)
    mask = _foreground(volume, threshold)
    values = volume.voxels[mask].astype(np.float64)[:, None]
    labels, centers, _ = kmeans(values, n_clusters, seed)
    rank = np.empty(n_clusters, dtype=np.int64)
    rank[np.argsort(centers[:, 0], kind="stable")] = np.arange(n_clusters)
    out = np.full(volume.dims, SENTINEL, dtype=np.uint8)
    out[mask] = rank[labels]
    return LabelMap(out, n_clusters, volume.spacing)


def _between_class_variance(hist, levels):
    """Between-class variance for every threshold tuple, indexed by threshold bins (1..bins-1)."""
    bins = hist.size
    p = hist / hist.sum()
    mids = np.arange(bins) + 0.5
    P = np.cumsum(p)
    M = np.cumsum(p * mids)
    mu_t = M[-1]

    def term(w, m):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(w > 1e-15, m * m / w, 0.0)

    t = np.arange(1, bins)
    if levels == 1:
        w0, m0 = P[t - 1], M[t - 1]
        return term(w0, m0) + term(1 - w0, mu_t - m0) - mu_t ** 2
    w0, m0 = P[t - 1][:, None], M[t - 1][:, None]
    w01, m01 = P[t - 1][None, :], M[t - 1][None, :]
    sig = term(w0, m0) + term(w01 - w0, m01 - m0) + term(1 - w01, mu_t - m01) - mu_t ** 2
    # only t1 < t2 is a valid pair
    sig[np.tril_indices(bins - 1)] = -np.inf
    return sig


def otsu_thresholds(hist, levels):
    """Threshold bins maximizing between-class variance over a histogram.

    Returns a tuple of ``levels`` bin indices ``t``; class ``k`` holds
    bins in ``[t_{k-1}, t_k)``. Near-ties go to the lowest tuple.
    """
    if levels not in (1, 2):
        raise ConfigInvalid(f"levels must be 1 or 2, got {levels}")
    hist = np.asarray(hist, dtype=np.float64)
    if hist.size < levels + 1:
        raise ValueError("histogram has too few bins")
    sig = _between_class_variance(hist, levels)
    best = sig.max()
    flat = int(np.flatnonzero(sig.ravel() >= best - _TIE_RTOL * abs(best))[0])
    idx = np.unravel_index(flat, sig.shape)
    return tuple(int(i) + 1 for i in idx)


def intensity_bins(values, bins=OTSU_BINS):
    """Bin index of each value on a uniform grid over ``[min, max]``."""
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        return np.zeros(values.shape, dtype=np.int64), (lo, hi)
    b = np.floor((values - lo) / (hi - lo) * bins).astype(np.int64)
    return np.minimum(b, bins - 1), (lo, hi)


def baseline_otsu(volume, levels=2, threshold=0):
    """Multi-threshold Otsu on a 256-bin foreground histogram; labels ordered by intensity."""
    if levels not in (1, 2):
        raise ConfigInvalid(f"levels must be 1 or 2, got {levels}")
    volume = check_volume(volume)
    mask = _foreground(volume, threshold)
    values = volume.voxels[mask].astype(np.float64)
    b, (lo, hi) = intensity_bins(values)
    out = np.full(volume.dims, SENTINEL, dtype=np.uint8)
    if lo == hi:
        out[mask] = 0
        return LabelMap(out, 1, volume.spacing)
    ts = otsu_thresholds(np.bincount(b, minlength=OTSU_BINS), levels)
    out[mask] = np.searchsorted(np.asarray(ts), b, side="right").astype(np.uint8)
    return LabelMap(out, levels + 1, volume.spacing)


def default_slices(nz, count=7):
    """``count`` evenly spaced interior z-planes."""
    return sorted({int(v) for v in np.linspace(0, nz, count + 2)[1:-1]})


def evaluation_mask(predicted, truth, slice_indices=()):
    if predicted.dims != truth.dims:
        raise ValueError(f"dims differ: {predicted.dims} vs {truth.dims}")
    mask = predicted.labeled() & truth.labeled()
    if len(slice_indices):
        keep = np.zeros(truth.dims[2], dtype=bool)
        keep[np.asarray(slice_indices, dtype=np.int64)] = True
        mask &= keep[None, None, :]
    return mask


def evaluate_nmi(predicted, truth, slice_indices=(), return_count=False):
    """NMI over voxels labeled in both maps, optionally restricted to z-planes.

    With ``return_count`` the number of evaluated voxels is returned too.
    """
    mask = evaluation_mask(predicted, truth, slice_indices)
    count = int(mask.sum())
    if count == 0:
        raise NoOverlap("no voxel is labeled in both maps on the requested slices")
    score = nmi(predicted.labels[mask], truth.labels[mask])
    return (score, count) if return_count else score


def metrics_record(method, n_clusters, score, evaluated_voxels, slices, seed, runtime_s, **extra):
    rec = {"method": method, "K": int(n_clusters), "nmi": float(score),
           "evaluated_voxels": int(evaluated_voxels), "slices": [int(s) for s in slices],
           "seed": int(seed), "runtime_s": float(runtime_s)}
    rec.update(extra)
    return rec


def write_metrics(records, path):
    try:
        Path(path).write_text(json.dumps(records, indent=2) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_metrics(path):
    return json.loads(Path(path).read_text())


class _SegmenterBase(BaseEstimator):
    def fit_predict(self, volume, y=None):
        return self.fit(volume).predict(volume)

    def score(self, volume, truth):
        """NMI against a ground-truth label map."""
        return evaluate_nmi(self.predict(volume), truth)


class JuleSegmenter(_SegmenterBase):
    """Train features on sampled patches, then segment by clustering dense-grid features.

    Parameters
    ----------
    n_samples : int, default=10000
    jule : JuleConfig, optional
    w, stride, n_clusters, threshold, seed : see :class:`SegmentationConfig`.
    """

    def __init__(self, n_samples=10000, jule=None, w=27, stride=5, n_clusters=3, threshold=0, seed=0):
        self.n_samples = n_samples
        self.jule = jule
        self.w = w
        self.stride = stride
        self.n_clusters = n_clusters
        self.threshold = threshold
        self.seed = seed

    def fit(self, volume, y=None):
        from .jule import JuleConfig, run_jule
        volume = check_volume(volume)
        raw = sample_training_patches(volume, self.n_samples, self.w, self.threshold, self.seed)
        patches = normalize_patches(raw)
        cfg = self.jule if self.jule is not None else JuleConfig(seed=self.seed)
        self.params_, self.train_labels_, self.trace_ = run_jule(patches, cfg)
        self.norm_stats_ = patches.norm_stats
        return self

    def predict(self, volume):
        cfg = SegmentationConfig(self.w, self.stride, self.n_clusters, self.threshold, self.seed)
        return segment_volume(volume, self.params_, self.norm_stats_, cfg)


class IntensityKMeansSegmenter(_SegmenterBase):
    def __init__(self, n_clusters=3, threshold=0, seed=0):
        self.n_clusters = n_clusters
        self.threshold = threshold
        self.seed = seed

    def fit(self, volume, y=None):
        return self

    def predict(self, volume):
        return baseline_intensity_kmeans(volume, self.n_clusters, self.threshold, self.seed)


class OtsuSegmenter(_SegmenterBase):
    def __init__(self, levels=2, threshold=0):
        self.levels = levels
        self.threshold = threshold

    def fit(self, volume, y=None):
        return self

    def predict(self, volume):
        return baseline_otsu(volume, self.levels, self.threshold)


def timed(fn, *args, **kwargs):
    """``(result, seconds)`` for one call."""
    start = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - start
