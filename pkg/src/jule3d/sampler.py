"""Training-patch sampling, dense inference grids and intensity centralization."""

import struct
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import (BadMagic, DegenerateIntensities, IoFailure, NoForeground,
                         TruncatedPayload, VolumeTooSmall)
from .validation import check_patch_size, check_stride

SIGMA_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class PatchSet:
    """A batch of cubic patches cut from one volume.

    Attributes
    ----------
    patches : ndarray, shape (n, w, w, w), float32
    centers : ndarray, shape (n, 3), int64
        Voxel coordinates ``(x, y, z)`` of each patch center.
    norm_stats : tuple of (mean, std) or None
        Statistics the patches were centralized with; None for raw patches.
    grid_stride : int
        Lattice pitch for dense grids, 0 for randomly sampled sets.
    degenerate : bool
        True if the intensity spread was below the floor and std fell back to 1.
    """

    patches: np.ndarray
    centers: np.ndarray
    norm_stats: tuple = None
    grid_stride: int = 0
    degenerate: bool = False

    def __len__(self):
        return self.patches.shape[0]

    @property
    def patch_size(self):
        return self.patches.shape[1]

    @property
    def normalized(self):
        return self.norm_stats is not None


def _cut(voxels, centers, w, dtype=np.float32):
    h = w // 2
    win = sliding_window_view(voxels, (w, w, w))
    c = np.asarray(centers) - h
    return win[c[:, 0], c[:, 1], c[:, 2]].astype(dtype)


def admissible_centers(volume, w, threshold):
    """Flat indices (into the volume) of foreground voxels at least ``w//2`` from every face."""
    w = check_patch_size(w)
    if min(volume.dims) < w:
        raise VolumeTooSmall(f"volume {volume.dims} is smaller than the patch size {w}")
    h = w // 2
    inner = np.zeros(volume.dims, dtype=bool)
    inner[h:volume.dims[0] - h, h:volume.dims[1] - h, h:volume.dims[2] - h] = True
    inner &= volume.voxels >= threshold
    return np.flatnonzero(inner.ravel(order="F"))


def sample_training_patches(volume, n_samples=10000, w=27, threshold=0, seed=0):
    """Draw ``n_samples`` raw patches uniformly (with replacement) over admissible centers.

    A center is admissible if its voxel is ``>= threshold`` and the whole
    ``w``-cube around it lies inside the volume.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    flat = admissible_centers(volume, w, threshold)
    if flat.size == 0:
        raise NoForeground(f"no voxel >= {threshold} admits a full {w}^3 patch")
    rng = np.random.default_rng(seed)
    pick = flat[rng.integers(0, flat.size, size=n_samples)]
    centers = np.stack(np.unravel_index(pick, volume.dims, order="F"), axis=1).astype(np.int64)
    return PatchSet(_cut(volume.voxels, centers, w), centers)


_CHUNK = 256


def _affine(data, mean, std):
    out = np.empty(data.shape, dtype=np.float32)
    for s in range(0, data.shape[0], _CHUNK):
        out[s:s + _CHUNK] = (data[s:s + _CHUNK].astype(np.float64) - mean) / std
    return out


def normalize_patches(patches):
    """Centralize with the mean and std of all voxels of all patches.

    Returns a new :class:`PatchSet` with ``norm_stats=(mean, std)``. When the
    std is below ``1e-12`` it is replaced by 1, the ``degenerate`` flag is set
    and a :class:`DegenerateIntensities` warning is issued.
    """
    data = np.asarray(patches.patches)
    mean = float(data.sum(dtype=np.float64) / data.size)
    sq = 0.0
    for s in range(0, data.shape[0], _CHUNK):
        sq += float(np.square(data[s:s + _CHUNK].astype(np.float64) - mean).sum())
    std = float(np.sqrt(sq / data.size))
    degenerate = std < SIGMA_FLOOR
    if degenerate:
        warnings.warn("patch intensities are constant; using std = 1", DegenerateIntensities, stacklevel=2)
        std = 1.0
    return replace(patches, patches=_affine(data, mean, std), norm_stats=(mean, std), degenerate=degenerate)


def apply_normalization(patches, norm_stats):
    """Centralize ``patches`` with previously computed ``(mean, std)``."""
    mean, std = (float(v) for v in norm_stats)
    return replace(patches, patches=_affine(np.asarray(patches.patches), mean, std), norm_stats=(mean, std))


def dense_grid_centers(volume, w=27, stride=5, threshold=0):
    """Lattice centers with pitch ``stride`` starting at ``w // 2``.

    Only foreground centers whose patch lies fully inside the volume are
    kept. Rows are ``(x, y, z)`` ordered with z slowest and x fastest.
    """
    w = check_patch_size(w)
    stride = check_stride(stride, w)
    if min(volume.dims) < w:
        raise VolumeTooSmall(f"volume {volume.dims} is smaller than the patch size {w}")
    h = w // 2
    axes = [np.arange(h, d - h, stride) for d in volume.dims]
    z, y, x = np.meshgrid(axes[2], axes[1], axes[0], indexing="ij")
    centers = np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1).astype(np.int64)
    keep = volume.voxels[centers[:, 0], centers[:, 1], centers[:, 2]] >= threshold
    centers = centers[keep]
    if centers.shape[0] == 0:
        raise NoForeground(f"no lattice center is >= {threshold}")
    return centers


def extract_patches(volume, centers, w, norm_stats=None):
    """Cut patches at ``centers``; centralize them when ``norm_stats`` is given."""
    raw = PatchSet(_cut(volume.voxels, centers, w), np.asarray(centers, dtype=np.int64))
    return raw if norm_stats is None else apply_normalization(raw, norm_stats)


def dense_patch_grid(volume, w, stride, threshold, norm_stats):
    """All lattice patches of ``volume``, centralized with the training statistics."""
    centers = dense_grid_centers(volume, w, stride, threshold)
    return replace(extract_patches(volume, centers, w, norm_stats), grid_stride=int(stride))


_PATCH_MAGIC = b"PAT3"
_PATCH_HEADER = struct.Struct("<4sIIIdd?")


def save_patchset(patches, path):
    """Debug dump: header, int32 centers, float32 payload. Not a stable format."""
    mean, std = patches.norm_stats if patches.normalized else (float("nan"), float("nan"))
    header = _PATCH_HEADER.pack(_PATCH_MAGIC, len(patches), patches.patch_size,
                                patches.grid_stride, mean, std, patches.normalized)
    try:
        Path(path).write_bytes(header + np.asarray(patches.centers, "<i4").tobytes()
                               + np.asarray(patches.patches, "<f4").tobytes())
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def load_patchset(path):
    data = Path(path).read_bytes()
    if data[:4] != _PATCH_MAGIC:
        raise BadMagic(f"{path}: expected magic {_PATCH_MAGIC!r}")
    _, n, w, stride, mean, std, normalized = _PATCH_HEADER.unpack_from(data)
    pos = _PATCH_HEADER.size
    need = pos + n * 3 * 4 + n * w ** 3 * 4
    if len(data) != need:
        raise TruncatedPayload(f"{path}: {len(data)} bytes, expected {need}")
    centers = np.frombuffer(data, "<i4", n * 3, pos).reshape(n, 3).astype(np.int64)
    patches = np.frombuffer(data, "<f4", n * w ** 3, pos + n * 12).reshape(n, w, w, w).copy()
    return PatchSet(patches, centers, (mean, std) if normalized else None, stride)
