import numpy as np
import pytest
from scipy import ndimage

from vesselseg.motion import (
    DeformationField,
    DemonsConfig,
    correct_stack,
    demons_register,
    residual_motion,
    warp_bilinear,
)
from vesselseg.volume import ImageVolume


def smooth_image(rng, shape, sigma=2.0):
    img = ndimage.gaussian_filter(rng.random(shape), sigma)
    img -= img.min()
    return img / img.max()


def smooth_field(rng, shape, amplitude, sigma=6.0):
    raw = rng.normal(size=shape + (2,))
    d = np.stack(
        [ndimage.gaussian_filter(raw[..., c], sigma) for c in range(2)], axis=-1
    )
    peak = np.abs(d).max()
    return DeformationField(d * (amplitude / peak))


def test_field_validation_and_identity():
    ident = DeformationField.identity((6, 5))
    assert ident.dims == (6, 5)
    assert ident.magnitude().max() == 0.0
    with pytest.raises(ValueError):
        DeformationField(np.zeros((6, 5, 3)))
    with pytest.raises(ValueError):
        DeformationField(np.full((4, 4, 2), np.nan))


def test_warp_identity_is_noop():
    rng = np.random.default_rng(0)
    img = rng.random((9, 8))
    out = warp_bilinear(img, DeformationField.identity(img.shape))
    np.testing.assert_allclose(out, img, atol=1e-12)


def test_warp_constant_shift_on_ramp():
    # output(x) = input(x + d): a +2-voxel x displacement samples 2 rows ahead
    nx, ny = 10, 7
    img = np.tile(np.arange(nx, dtype=float)[:, None], (1, ny))
    d = np.zeros((nx, ny, 2))
    d[..., 0] = 2.0
    out = warp_bilinear(img, DeformationField(d))
    np.testing.assert_allclose(out[:-2], img[2:], atol=1e-12)
    # border clamps to the edge value
    np.testing.assert_allclose(out[-2:], np.broadcast_to(img[-1], (2, ny)), atol=1e-12)


def test_warp_fractional_shift_interpolates():
    img = np.array([[0.0, 1.0, 2.0, 3.0]] * 3)
    d = np.zeros(img.shape + (2,))
    d[..., 1] = 0.5
    out = warp_bilinear(img, DeformationField(d))
    np.testing.assert_allclose(out[:, :-1], img[:, :-1] + 0.5, atol=1e-12)


def test_demons_config_validation():
    DemonsConfig().validate()
    with pytest.raises(ValueError):
        DemonsConfig(sigma=0.0).validate()
    with pytest.raises(ValueError):
        DemonsConfig(max_iters=0).validate()
    with pytest.raises(ValueError):
        DemonsConfig(step_cap=-1.0).validate()


def test_demons_rejects_bad_inputs():
    a = np.zeros((8, 8))
    with pytest.raises(ValueError):
        demons_register(a, np.zeros((8, 7)))
    with pytest.raises(ValueError):
        demons_register(a, np.full((8, 8), np.nan))
    with pytest.raises(ValueError):
        demons_register(a[0], a[0])


def test_demons_identical_slices_stop_immediately():
    rng = np.random.default_rng(1)
    img = smooth_image(rng, (24, 24))
    field, warped, trace = demons_register(img, img)
    assert trace[0] == 0.0
    assert field.magnitude().max() == 0.0
    np.testing.assert_allclose(warped, img)


def test_demons_trace_nonincreasing_and_improves():
    rng = np.random.default_rng(2)
    for case in range(5):
        img = smooth_image(rng, (32, 32))
        true = smooth_field(rng, (32, 32), amplitude=1.5)
        moving = warp_bilinear(img, true)
        field, warped, trace = demons_register(img, moving)
        assert all(b <= a + 1e-12 for a, b in zip(trace, trace[1:])), case
        assert trace[-1] < trace[0] * 0.7, case
        better = np.mean((warped - img) ** 2)
        assert better <= np.mean((moving - img) ** 2)


def test_demons_step_cap_limits_single_update():
    rng = np.random.default_rng(3)
    img = smooth_image(rng, (24, 24))
    true = smooth_field(rng, (24, 24), amplitude=2.0)
    moving = warp_bilinear(img, true)
    field, _, _ = demons_register(img, moving, DemonsConfig(max_iters=1, step_cap=0.3))
    # one iteration: |composed field| <= step cap (smoothing only shrinks it)
    assert field.magnitude().max() <= 0.3 + 1e-9


def test_correct_stack_anchors_first_slice_and_reduces_wobble():
    rng = np.random.default_rng(4)
    nx = ny = 32
    base = smooth_image(rng, (nx, ny))
    nz = 5
    vox = np.empty((nx, ny, nz), dtype=np.float32)
    vox[:, :, 0] = base
    true_fields = [DeformationField.identity((nx, ny))]
    for k in range(1, nz):
        f = smooth_field(rng, (nx, ny), amplitude=1.2)
        true_fields.append(f)
        vox[:, :, k] = warp_bilinear(base, f)
    vol = ImageVolume(vox, (1, 1, 1), "unit")
    corrected, fields = correct_stack(vol)
    assert len(fields) == nz
    assert fields[0].magnitude().max() == 0.0
    np.testing.assert_allclose(corrected.voxels[:, :, 0], vox[:, :, 0], atol=1e-7)
    before = np.mean((vox - base[:, :, None]) ** 2)
    after = np.mean((corrected.voxels - base[:, :, None]) ** 2)
    assert after < before
    assert corrected.domain == "unit"
    assert corrected.voxels.min() >= 0.0 and corrected.voxels.max() <= 1.0


def test_correct_stack_single_slice():
    vol = ImageVolume(np.random.default_rng(5).random((12, 12, 1)), (1, 1, 1), "unit")
    corrected, fields = correct_stack(vol)
    assert len(fields) == 1
    np.testing.assert_allclose(corrected.voxels, vol.voxels, atol=1e-7)


def test_residual_motion_zero_for_exact_inverse():
    # constant fields: warp by +c is undone by -c exactly
    c = np.zeros((10, 10, 2))
    c[..., 0] = 1.25
    s = DeformationField(c)
    w = DeformationField(-c)
    assert residual_motion(s, w) < 1e-9
    assert residual_motion(s, DeformationField(np.zeros_like(c))) == pytest.approx(1.25)


def test_residual_motion_mask_restricts_support():
    d = np.zeros((10, 10, 2))
    d[:5, :, 0] = 2.0  # top half moves, bottom half is still
    true = DeformationField(d)
    est = DeformationField(np.zeros_like(d))
    mask = np.zeros((10, 10), dtype=bool)
    mask[6:, :] = True
    assert residual_motion(true, est, mask=mask) == pytest.approx(0.0)
    assert residual_motion(true, est, mask=~mask) == pytest.approx(2.0 * 5 / 6)
    with pytest.raises(ValueError):
        residual_motion(true, est, mask=np.zeros((3, 3), dtype=bool))
    with pytest.raises(ValueError):
        residual_motion(true, est, mask=np.zeros((10, 10), dtype=bool))
