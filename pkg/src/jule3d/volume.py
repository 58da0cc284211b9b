"""Volumes, label maps, VOL3 files and synthetic phantoms.

Arrays are indexed ``[x, y, z]`` and serialized x-fastest (Fortran order),
so ``voxels[1, 1, 1]`` of a 2x2x2 volume is the 8th stored value.
"""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .exceptions import (BadMagic, InvalidSpec, IoFailure, RejectedInvalidLabel,
                         TruncatedPayload, ZeroDim)

MAGIC = b"VOL3"
DTYPE_VOLUME = 1
DTYPE_LABELMAP = 2
SENTINEL = 255
_HEADER = struct.Struct("<4sB3x3I3fI")


def _frozen(arr, dtype):
    arr = np.array(arr, dtype=dtype, copy=True)
    arr.flags.writeable = False
    return arr


def _spacing(values):
    # stored as float32 on disk; quantize up front so round-trips are exact
    return tuple(float(np.float32(v)) for v in values)


def _check_dims(dims):
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3:
        raise ValueError(f"dims must have 3 entries, got {dims}")
    if min(dims) < 1:
        raise ZeroDim(f"every dimension must be >= 1, got {dims}")
    return dims


@dataclass(frozen=True, eq=False)
class Volume:
    """16-bit intensity grid with physical voxel spacing in micrometers."""

    voxels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        vox = np.asarray(self.voxels)
        if vox.ndim != 3:
            raise ValueError(f"voxels must be 3-D, got shape {vox.shape}")
        _check_dims(vox.shape)
        if vox.dtype != np.uint16:
            if vox.size and (vox.min() < 0 or vox.max() > 65535):
                raise ValueError("intensities must fit in 16 bits")
        spacing = _spacing(self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")
        object.__setattr__(self, "voxels", _frozen(vox, np.uint16))
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self):
        return self.voxels.shape

    def __eq__(self, other):
        return (isinstance(other, Volume) and self.spacing == other.spacing
                and np.array_equal(self.voxels, other.voxels))


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Per-voxel class labels; :data:`SENTINEL` (255) marks unlabeled voxels."""

    labels: np.ndarray
    n_classes: int
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 3:
            raise ValueError(f"labels must be 3-D, got shape {lab.shape}")
        _check_dims(lab.shape)
        n_classes = int(self.n_classes)
        if not 0 <= n_classes < SENTINEL:
            raise ValueError(f"n_classes must lie in [0, {SENTINEL}), got {n_classes}")
        lab = _frozen(lab, np.uint8)
        bad = (lab != SENTINEL) & (lab >= n_classes)
        if bad.any():
            raise RejectedInvalidLabel(
                f"label {int(lab[bad][0])} is not below the declared class count {n_classes}")
        object.__setattr__(self, "labels", lab)
        object.__setattr__(self, "n_classes", n_classes)
        object.__setattr__(self, "spacing", _spacing(self.spacing))

    @property
    def dims(self):
        return self.labels.shape

    def labeled(self):
        return self.labels != SENTINEL

    def __eq__(self, other):
        return (isinstance(other, LabelMap) and self.n_classes == other.n_classes
                and np.array_equal(self.labels, other.labels))


def _write(path, code, arr, spacing, n_classes):
    if not str(path):
        raise IoFailure("empty path")
    header = _HEADER.pack(MAGIC, code, *arr.shape, *spacing, n_classes)
    payload = np.asarray(arr, dtype="<u2" if code == DTYPE_VOLUME else "u1").tobytes(order="F")
    try:
        Path(path).write_bytes(header + payload)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def _read(path):
    if not str(path):
        raise IoFailure("empty path")
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if data[:4] != MAGIC:
        raise BadMagic(f"{path}: expected magic {MAGIC!r}, got {data[:4]!r}")
    if len(data) < _HEADER.size:
        raise TruncatedPayload(f"{path}: header is {len(data)} bytes, need {_HEADER.size}")
    _, code, nx, ny, nz, sx, sy, sz, n_classes = _HEADER.unpack_from(data)
    if code not in (DTYPE_VOLUME, DTYPE_LABELMAP):
        raise BadMagic(f"{path}: unknown dtype code {code}")
    dims = _check_dims((nx, ny, nz))
    dtype = np.dtype("<u2") if code == DTYPE_VOLUME else np.dtype("u1")
    expected = nx * ny * nz * dtype.itemsize
    payload = memoryview(data)[_HEADER.size:]
    if len(payload) != expected:
        raise TruncatedPayload(f"{path}: payload is {len(payload)} bytes, header declares {expected}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims, order="F")
    return code, arr, (sx, sy, sz), n_classes


def save_volume(volume, path):
    _write(path, DTYPE_VOLUME, volume.voxels, volume.spacing, 0)


def save_labelmap(labelmap, path):
    _write(path, DTYPE_LABELMAP, labelmap.labels, labelmap.spacing, labelmap.n_classes)


def load_volume(path):
    """Read a VOL3 intensity volume."""
    code, arr, spacing, _ = _read(path)
    if code != DTYPE_VOLUME:
        raise BadMagic(f"{path}: holds a label map, not a volume")
    return Volume(arr, spacing)


def load_labelmap(path):
    """Read a VOL3 label map; labels >= the stored class count are rejected."""
    code, arr, spacing, n_classes = _read(path)
    if code != DTYPE_LABELMAP:
        raise BadMagic(f"{path}: holds a volume, not a label map")
    return LabelMap(arr, n_classes, spacing)


def foreground_mask(volume, threshold):
    """Voxels at or above ``threshold``; returns ``(mask, count)``."""
    mask = volume.voxels >= threshold
    return mask, int(mask.sum())


@dataclass(frozen=True)
class PhantomSpec:
    """Three-class synthetic phantom description.

    ``layout`` is ``"slabs"`` (three equal slabs stacked along z) or
    ``"blobs"`` (class 0 sphere inside a class 1 shell, class 2 elsewhere).
    ``noise_std`` is the per-voxel standard deviation after smoothing.
    """

    dims: tuple = (96, 96, 96)
    layout: str = "slabs"
    means: tuple = (12000.0, 12000.0, 5000.0)
    noise_std: tuple = (300.0, 2500.0, 300.0)
    smoothing_radius: int = 1
    seed: int = 7
    spacing: tuple = (1.0, 1.0, 1.0)

    def validate(self):
        try:
            _check_dims(self.dims)
        except ValueError as exc:
            raise InvalidSpec(str(exc)) from exc
        if self.layout not in ("slabs", "blobs"):
            raise InvalidSpec(f"unknown layout {self.layout!r}")
        if len(self.means) != 3 or len(self.noise_std) != 3:
            raise InvalidSpec("a phantom has exactly 3 classes")
        if min(self.means) < 0 or max(self.means) > 65535:
            raise InvalidSpec("class means must lie in the 16-bit range")
        if min(self.noise_std) < 0:
            raise InvalidSpec("noise standard deviations must be >= 0")
        if self.smoothing_radius < 0:
            raise InvalidSpec("smoothing radius must be >= 0")


def phantom_layout(spec):
    """Ground-truth class index of every voxel (uint8, shape ``spec.dims``)."""
    nx, ny, nz = spec.dims
    x, y, z = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    if spec.layout == "slabs":
        lab = np.minimum(z * 3 // nz, 2)
    else:
        center = (np.array(spec.dims) - 1) / 2.0
        r = np.sqrt((x - center[0]) ** 2 + (y - center[1]) ** 2 + (z - center[2]) ** 2)
        scale = min(spec.dims) / 2.0
        lab = np.where(r < scale * 0.4, 0, np.where(r < scale * 0.8, 1, 2))
    return lab.astype(np.uint8)


def phantom_noise(spec):
    """Unit-variance, box-smoothed Gaussian noise field for ``spec``."""
    rng = np.random.default_rng(spec.seed)
    noise = rng.standard_normal(spec.dims)
    if spec.smoothing_radius > 0:
        noise = ndimage.uniform_filter(noise, size=2 * spec.smoothing_radius + 1, mode="reflect")
        std = noise.std()
        if std > 0:
            noise /= std
    return noise


def generate_phantom(spec):
    """Build ``(Volume, LabelMap)`` for a :class:`PhantomSpec`.

    Each voxel gets ``mean[c] + std[c] * noise`` with ``c`` its class, then
    rounded and clamped to 16 bits. Deterministic for a fixed seed.
    """
    spec.validate()
    labels = phantom_layout(spec)
    means = np.asarray(spec.means, dtype=np.float64)[labels]
    stds = np.asarray(spec.noise_std, dtype=np.float64)[labels]
    values = means + stds * phantom_noise(spec)
    voxels = np.clip(np.rint(values), 0, 65535).astype(np.uint16)
    return Volume(voxels, spec.spacing), LabelMap(labels, 3, spec.spacing)


def label_gray_levels(n_classes):
    """Distinct 8-bit gray per class; unlabeled voxels stay black."""
    lut = np.zeros(256, dtype=np.uint8)
    if n_classes:
        lut[:n_classes] = np.round(np.linspace(255.0 / n_classes, 255.0, n_classes)).astype(np.uint8)
    return lut


def save_pgm_slice(labelmap, z, path):
    """Write z-plane ``z`` of a label map as a binary 8-bit PGM (rows = y, columns = x)."""
    plane = label_gray_levels(labelmap.n_classes)[labelmap.labels[:, :, z].T]
    ny, nx = plane.shape
    try:
        Path(path).write_bytes(f"P5\n{nx} {ny}\n255\n".encode() + np.ascontiguousarray(plane).tobytes())
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def load_pgm(path):
    """Read a binary 8-bit PGM written by :func:`save_pgm_slice`; returns a (rows, cols) array."""
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5" or int(parts[3]) != 255:
        raise BadMagic(f"{path}: not an 8-bit binary PGM")
    nx, ny = int(parts[1]), int(parts[2])
    return np.frombuffer(data[len(data) - nx * ny:], dtype=np.uint8).reshape(ny, nx)
