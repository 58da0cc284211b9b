import struct

import numpy as np
import pytest

from jule3d.exceptions import (BadMagic, InvalidSpec, IoFailure, RejectedInvalidLabel,
                               TruncatedPayload, ZeroDim)
from jule3d.volume import (LabelMap, PhantomSpec, Volume, foreground_mask, generate_phantom, label_gray_levels,
                           load_labelmap, load_pgm, load_volume, phantom_layout, save_labelmap,
                           save_pgm_slice, save_volume)


def _vol3_bytes(code, dims, payload, spacing=(1.0, 1.0, 1.0), n_classes=0, magic=b"VOL3"):
    return struct.pack("<4sB3x3I3fI", magic, code, *dims, *spacing, n_classes) + payload


def test_x_fastest_order(tmp_path):
    path = tmp_path / "v.vol3"
    path.write_bytes(_vol3_bytes(1, (2, 2, 2), np.arange(8, dtype="<u2").tobytes()))
    vol = load_volume(path)
    assert vol.voxels[1, 1, 1] == 7
    assert vol.voxels[1, 0, 0] == 1
    assert vol.voxels[0, 1, 0] == 2
    assert vol.voxels[0, 0, 1] == 4


def test_large_header_dims_expect_full_payload(tmp_path):
    path = tmp_path / "big.vol3"
    path.write_bytes(_vol3_bytes(1, (756, 520, 545), b"\0" * 16, spacing=(27.1,) * 3))
    with pytest.raises(TruncatedPayload, match=str(756 * 520 * 545 * 2)):
        load_volume(path)


@pytest.mark.parametrize("mutate, error", [
    (lambda b: b"XXXX" + b[4:], BadMagic),
    (lambda b: b[:-1], TruncatedPayload),
    (lambda b: b + b"\0", TruncatedPayload),
    (lambda b: b[:10], TruncatedPayload),
])
def test_malformed_files(tmp_path, mutate, error):
    path = tmp_path / "v.vol3"
    good = _vol3_bytes(1, (2, 2, 2), np.arange(8, dtype="<u2").tobytes())
    path.write_bytes(mutate(good))
    with pytest.raises(error):
        load_volume(path)


def test_zero_dim_rejected(tmp_path):
    path = tmp_path / "z.vol3"
    path.write_bytes(_vol3_bytes(1, (0, 2, 2), b""))
    with pytest.raises(ZeroDim):
        load_volume(path)


def test_volume_roundtrip(tmp_path, rng):
    vol = Volume(rng.integers(0, 65536, (5, 3, 4)).astype(np.uint16), (27.1, 27.1, 30.0))
    save_volume(vol, tmp_path / "v.vol3")
    back = load_volume(tmp_path / "v.vol3")
    assert back == vol
    assert back.spacing == pytest.approx((27.1, 27.1, 30.0))


def test_labelmap_roundtrip(tmp_path, rng):
    labels = rng.choice(np.array([0, 1, 2, 255], dtype=np.uint8), size=(3, 3, 3))
    lm = LabelMap(labels, 3)
    save_labelmap(lm, tmp_path / "l.vol3")
    back = load_labelmap(tmp_path / "l.vol3")
    np.testing.assert_array_equal(back.labels, labels)
    assert back.n_classes == 3


def test_invalid_label_rejected(tmp_path):
    labels = np.zeros((3, 3, 3), dtype=np.uint8)
    labels[1, 1, 1] = 7
    with pytest.raises(RejectedInvalidLabel):
        LabelMap(labels, 3)
    path = tmp_path / "bad.vol3"
    path.write_bytes(_vol3_bytes(2, (3, 3, 3), labels.tobytes(order="F"), n_classes=3))
    with pytest.raises(RejectedInvalidLabel):
        load_labelmap(path)


def test_empty_path_is_io_failure():
    with pytest.raises(IoFailure):
        save_labelmap(LabelMap(np.zeros((2, 2, 2), np.uint8), 1), "")
    with pytest.raises(IoFailure):
        load_volume("")


def test_kind_mismatch(tmp_path):
    save_labelmap(LabelMap(np.zeros((2, 2, 2), np.uint8), 1), tmp_path / "l.vol3")
    with pytest.raises(BadMagic):
        load_volume(tmp_path / "l.vol3")


def test_volume_is_immutable(rng):
    vol = Volume(rng.integers(0, 10, (2, 2, 2)))
    with pytest.raises(ValueError):
        vol.voxels[0, 0, 0] = 1


def test_foreground_mask():
    vol = Volume(np.array([3999, 4000, 4001, 0, 65535, 12, 4000, 1], np.uint16).reshape(2, 2, 2))
    mask, count = foreground_mask(vol, 4000)
    assert count == 4
    assert mask.sum() == count and mask[vol.voxels >= 4000].all()
    assert foreground_mask(Volume(np.zeros((3, 3, 3))), 1)[1] == 0
    assert foreground_mask(vol, 0)[1] == 8


def test_foreground_monotone(rng):
    vol = Volume(rng.integers(0, 6000, (6, 6, 6)))
    counts = [foreground_mask(vol, t)[1] for t in range(0, 6001, 250)]
    assert counts == sorted(counts, reverse=True)


def test_phantom_statistics():
    spec = PhantomSpec()
    vol, truth = generate_phantom(spec)
    v = vol.voxels.astype(np.float64)
    for c in range(3):
        vals = v[truth.labels == c]
        assert abs(vals.mean() - spec.means[c]) <= 0.02 * spec.means[c]
        assert vals.std() == pytest.approx(spec.noise_std[c], rel=0.1)
    assert v[truth.labels == 2].mean() < v[truth.labels == 0].mean()
    np.testing.assert_array_equal(truth.labels, phantom_layout(spec))


def test_phantom_deterministic_and_seeded():
    a = generate_phantom(PhantomSpec(dims=(20, 20, 20)))
    b = generate_phantom(PhantomSpec(dims=(20, 20, 20)))
    c = generate_phantom(PhantomSpec(dims=(20, 20, 20), seed=8))
    assert a[0] == b[0] and a[1] == b[1]
    assert not a[0] == c[0]


@pytest.mark.parametrize("layout", ["slabs", "blobs"])
def test_zero_noise_is_piecewise_constant(layout):
    spec = PhantomSpec(dims=(12, 14, 15), layout=layout, noise_std=(0, 0, 0))
    vol, truth = generate_phantom(spec)
    expected = np.asarray(spec.means)[truth.labels]
    np.testing.assert_array_equal(vol.voxels, expected)
    assert set(np.unique(truth.labels)) == {0, 1, 2}


@pytest.mark.parametrize("kwargs", [dict(dims=(0, 4, 4)), dict(layout="rings"), dict(means=(1, 2)),
                                    dict(means=(1, 2, 70000)), dict(noise_std=(1, -1, 1)),
                                    dict(smoothing_radius=-1)])
def test_invalid_phantom_spec(kwargs):
    with pytest.raises(InvalidSpec):
        generate_phantom(PhantomSpec(**kwargs))


def test_pgm_slice(tmp_path):
    labels = np.full((4, 3, 2), 255, np.uint8)
    labels[1, 2, 1] = 0
    labels[3, 0, 1] = 2
    lm = LabelMap(labels, 3)
    save_pgm_slice(lm, 1, tmp_path / "s.pgm")
    img = load_pgm(tmp_path / "s.pgm")
    lut = label_gray_levels(3)
    assert img.shape == (3, 4)
    assert img[2, 1] == lut[0] and img[0, 3] == lut[2] and img[0, 0] == 0
    assert len(set(lut[:3])) == 3 and 0 not in lut[:3]
