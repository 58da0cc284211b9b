"""Argument and array validation shared by the estimators and functions."""

import numbers

import numpy as np

from .exceptions import ConfigInvalid


def check_patch_size(w):
    if not isinstance(w, numbers.Integral) or w < 1 or w % 2 == 0:
        raise ConfigInvalid(f"patch size must be a positive odd integer, got {w!r}")
    return int(w)


def check_stride(stride, w):
    if not isinstance(stride, numbers.Integral) or not 1 <= stride <= w:
        raise ConfigInvalid(f"stride must be an integer in [1, {w}], got {stride!r}")
    return int(stride)


def check_features(X, min_samples=1):
    """Return ``X`` as a finite 2-D float array with at least ``min_samples`` rows."""
    X = np.asarray(X)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise ValueError(f"expected a 2-D feature matrix, got shape {X.shape}")
    if not np.issubdtype(X.dtype, np.floating):
        X = X.astype(np.float64)
    if X.shape[0] < min_samples:
        raise ValueError(f"need at least {min_samples} samples, got {X.shape[0]}")
    if not np.isfinite(X).all():
        raise ValueError("feature matrix contains non-finite values")
    return X


def check_labels(labels, n=None, name="labels"):
    """1-D integer label array, optionally of length ``n``."""
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {labels.shape}")
    if labels.size and not np.issubdtype(labels.dtype, np.integer):
        if not np.array_equal(labels, np.round(labels)):
            raise ValueError(f"{name} must be integers")
        labels = labels.astype(np.int64)
    if n is not None and labels.shape[0] != n:
        raise ValueError(f"{name} has {labels.shape[0]} entries, expected {n}")
    return labels


def check_volume(volume):
    """Accept a :class:`~jule3d.volume.Volume` or a 3-D integer array."""
    from .volume import Volume
    if isinstance(volume, Volume):
        return volume
    return Volume(np.asarray(volume))
