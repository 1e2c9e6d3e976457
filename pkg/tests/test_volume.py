import numpy as np
import pytest

from vesselseg.errors import DegenerateInputError, VolumeFormatError
from vesselseg.volume import (
    BinaryVolume,
    ImageVolume,
    load_mask,
    load_stack,
    normalize_percentile,
    pad_reflect,
    resample_isotropic,
    save_mask,
    save_stack,
    to_unit_scale,
)


def test_image_volume_validates_unit_domain():
    ok = ImageVolume(np.zeros((3, 3, 3), dtype=np.float32), (1, 1, 1), "unit")
    assert ok.dims == (3, 3, 3)
    with pytest.raises(ValueError):
        ImageVolume(np.full((3, 3, 3), 1.5, dtype=np.float32), (1, 1, 1), "unit")
    with pytest.raises(ValueError):
        ImageVolume(np.zeros((3, 3), dtype=np.float32), (1, 1, 1), "raw")
    with pytest.raises(ValueError):
        ImageVolume(np.zeros((3, 3, 3), dtype=np.float32), (1, 0, 1), "raw")


def test_tiff_roundtrip_unit_floats(tmp_path):
    rng = np.random.default_rng(0)
    vol = ImageVolume(
        rng.random((9, 7, 5)).astype(np.float32), (1.0, 1.0, 2.0), "unit"
    )
    path = save_stack(vol, tmp_path / "stack.tif")
    back = load_stack(path)
    assert back.dims == vol.dims
    assert back.spacing == vol.spacing
    assert back.domain == "unit"
    # 16-bit quantization bounds the roundtrip error
    assert np.abs(back.voxels - vol.voxels).max() <= 0.5 / 65535 + 1e-7


def test_tiff_roundtrip_integer(tmp_path):
    rng = np.random.default_rng(1)
    vol = ImageVolume(
        rng.integers(0, 4096, size=(6, 5, 4)).astype(np.uint16), (1, 1, 1), "raw"
    )
    back = load_stack(save_stack(vol, tmp_path / "s.tif"))
    assert back.voxels.dtype == np.uint16
    np.testing.assert_array_equal(back.voxels, vol.voxels)


def test_raw_container_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    vol = ImageVolume(
        rng.normal(size=(5, 6, 7)).astype(np.float32), (0.5, 0.5, 1.0), "raw"
    )
    path = save_stack(vol, tmp_path / "stack.raw")
    assert (tmp_path / "stack.raw.json").exists()
    back = load_stack(path)
    np.testing.assert_array_equal(back.voxels, vol.voxels)
    assert back.spacing == vol.spacing
    assert back.domain == "raw"


def test_raw_domain_float_rejects_tiff(tmp_path):
    vol = ImageVolume(np.zeros((3, 3, 3), dtype=np.float32) - 1.0, (1, 1, 1), "raw")
    with pytest.raises(VolumeFormatError):
        save_stack(vol, tmp_path / "bad.tif")


def test_raw_header_mismatch_detected(tmp_path):
    vol = ImageVolume(np.zeros((4, 4, 4), dtype=np.float32), (1, 1, 1), "raw")
    path = save_stack(vol, tmp_path / "s.raw")
    with open(path, "ab") as fh:
        fh.write(b"\x00" * 4)  # now one voxel too many
    with pytest.raises(VolumeFormatError):
        load_stack(path)


def test_load_missing_and_unknown_suffix(tmp_path):
    with pytest.raises(VolumeFormatError):
        load_stack(tmp_path / "absent.tif")
    vol = ImageVolume(np.zeros((3, 3, 3), dtype=np.uint8), (1, 1, 1), "raw")
    with pytest.raises(VolumeFormatError):
        save_stack(vol, tmp_path / "s.nii")


def test_mask_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    mask = BinaryVolume(rng.random((8, 8, 4)) < 0.3, (1, 1, 1))
    back = load_mask(save_mask(mask, tmp_path / "m.tif"))
    np.testing.assert_array_equal(back.voxels, mask.voxels)


def test_to_unit_scale_uses_dtype_range():
    vol = ImageVolume(
        np.array([[[0, 255]]], dtype=np.uint8).reshape(1, 1, 2), (1, 1, 1), "raw"
    )
    unit = to_unit_scale(vol)
    assert unit.domain == "unit"
    np.testing.assert_allclose(unit.voxels.ravel(), [0.0, 1.0])


def test_normalize_percentile_matches_manual_formula():
    rng = np.random.default_rng(4)
    for _ in range(10):
        v = rng.normal(loc=100.0, scale=20.0, size=(11, 9, 7))
        vol = ImageVolume(v, (1, 1, 1), "raw")
        out = normalize_percentile(vol, 5.0, 95.0)
        lo, hi = np.percentile(v, 5.0), np.percentile(v, 95.0)
        expect = np.clip((v - lo) / (hi - lo), 0.0, 1.0)
        np.testing.assert_allclose(out.voxels, expect.astype(np.float32), atol=1e-6)
        assert out.domain == "unit"
        assert out.voxels.min() >= 0.0 and out.voxels.max() <= 1.0


def test_normalize_percentile_tiled_differs_under_drift():
    # gradient illumination: global normalization leaves the dim half dim,
    # per-tile normalization stretches each half on its own
    v = np.linspace(0.0, 1.0, 16)[:, None, None] * np.ones((16, 8, 4))
    vol = ImageVolume(v, (1, 1, 1), "raw")
    whole = normalize_percentile(vol, 1, 99)
    tiled = normalize_percentile(vol, 1, 99, tile_shape=(8, 8, 4))
    assert tiled.voxels[:8].max() > whole.voxels[:8].max()


def test_normalize_percentile_degenerate_and_bad_band():
    flat = ImageVolume(np.full((5, 5, 5), 3.0), (1, 1, 1), "raw")
    with pytest.raises(DegenerateInputError):
        normalize_percentile(flat)
    vol = ImageVolume(np.random.default_rng(0).random((5, 5, 5)), (1, 1, 1), "raw")
    with pytest.raises(ValueError):
        normalize_percentile(vol, 99.0, 1.0)
    nan = ImageVolume(np.full((5, 5, 5), np.nan), (1, 1, 1), "raw")
    with pytest.raises(DegenerateInputError):
        normalize_percentile(nan)


def test_resample_identity_fast_path():
    vol = ImageVolume(np.zeros((4, 4, 4), dtype=np.float32), (1, 1, 1), "raw")
    assert resample_isotropic(vol, 1.0) is vol


def test_resample_dims_and_linear_ramp():
    # a ramp along z is reproduced exactly by trilinear interpolation
    nz = 9
    v = np.tile(np.arange(nz, dtype=np.float32) * 2.0, (6, 5, 1))
    vol = ImageVolume(v, (1.0, 1.0, 2.0), "raw")
    out = resample_isotropic(vol, 1.0)
    assert out.dims == (6, 5, 18)  # floor(9 * 2 / 1 + 0.5)
    assert out.spacing == (1.0, 1.0, 1.0)
    # voxel k sits at physical depth k um = index k/2 on the old grid,
    # clamped at the last sample
    expect = 2.0 * np.minimum(np.arange(18) * 0.5, 8.0)
    np.testing.assert_allclose(out.voxels[0, 0, :], expect, atol=1e-5)


def test_resample_unit_domain_stays_clipped():
    rng = np.random.default_rng(5)
    vol = ImageVolume(rng.random((8, 8, 8)).astype(np.float32), (1, 1, 0.49), "unit")
    out = resample_isotropic(vol, 1.0)
    assert out.domain == "unit"
    assert out.voxels.min() >= 0.0 and out.voxels.max() <= 1.0
    with pytest.raises(ValueError):
        resample_isotropic(vol, -1.0)


def test_pad_reflect_matches_numpy_and_keeps_type():
    rng = np.random.default_rng(6)
    img = ImageVolume(rng.random((5, 4, 3)).astype(np.float32), (1, 1, 1), "unit")
    padded = pad_reflect(img, (2, 1, 0))
    assert isinstance(padded, ImageVolume)
    np.testing.assert_array_equal(
        padded.voxels, np.pad(img.voxels, [(2, 2), (1, 1), (0, 0)], mode="reflect")
    )
    mask = BinaryVolume(img.voxels > 0.5, (1, 1, 1))
    pm = pad_reflect(mask, ((1, 0), (0, 0), (2, 2)))
    assert isinstance(pm, BinaryVolume)
    assert pm.dims == (6, 4, 7)


def test_pad_reflect_rejects_thin_axis_and_bad_margins():
    thin = ImageVolume(np.zeros((5, 5, 1), dtype=np.float32), (1, 1, 1), "raw")
    with pytest.raises(ValueError):
        pad_reflect(thin, (0, 0, 1))
    assert pad_reflect(thin, (1, 1, 0)).dims == (7, 7, 1)
    with pytest.raises(ValueError):
        pad_reflect(thin, (-1, 0, 0))
