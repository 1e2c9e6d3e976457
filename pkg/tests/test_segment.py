import numpy as np
import pytest

from vesselseg.net.arch import parse_arch, receptive_margins
from vesselseg.net.model import forward, init_params
from vesselseg.segment import (
    fill_holes,
    mc_entropy,
    mean_filter,
    postprocess,
    predict_probabilities,
    predict_volume,
    remove_small_components,
)
from vesselseg.volume import BinaryVolume, ImageVolume


def small_net(roi=(3, 3, 1)):
    spec = parse_arch("C 3x3x3 - P - NN", fov=(9, 9, 3), roi=roi,
                      hidden_width=8, dropout_rate=0.5)
    params = init_params(spec, np.random.default_rng(0))
    return spec, params


def test_predict_matches_per_tile_forward():
    # independent tiling: pad once, run each ROI block by hand
    spec, params = small_net()
    rng = np.random.default_rng(1)
    vol = ImageVolume(rng.random((10, 8, 4)).astype(np.float32), (1, 1, 1), "unit")
    got = predict_probabilities(vol, spec, params, tile_batch=3)

    mx, my, mz = receptive_margins(spec)
    rx, ry, rz = spec.roi
    nx, ny, nz = vol.dims
    ntx, nty, ntz = -(-nx // rx), -(-ny // ry), -(-nz // rz)
    padded = np.pad(
        vol.voxels,
        ((mx, mx + ntx * rx - nx), (my, my + nty * ry - ny), (mz, mz + ntz * rz - nz)),
        mode="reflect",
    )
    fx, fy, fz = spec.fov
    expect = np.zeros(vol.dims, dtype=np.float32)
    for ix in range(ntx):
        for iy in range(nty):
            for iz in range(ntz):
                ox, oy, oz = ix * rx, iy * ry, iz * rz
                patch = padded[ox:ox + fx, oy:oy + fy, oz:oz + fz][None]
                probs, _ = forward(spec, params, patch, mode="eval")
                block = probs[0, ..., 1]
                ex, ey, ez = min(ox + rx, nx), min(oy + ry, ny), min(oz + rz, nz)
                expect[ox:ex, oy:ey, oz:ez] = block[: ex - ox, : ey - oy, : ez - oz]
    np.testing.assert_allclose(got, expect, atol=1e-6)


def test_predict_tile_batch_invariance_and_determinism():
    spec, params = small_net()
    vol = ImageVolume(
        np.random.default_rng(2).random((7, 11, 5)).astype(np.float32), (1, 1, 1), "unit"
    )
    a = predict_probabilities(vol, spec, params, tile_batch=1)
    b = predict_probabilities(vol, spec, params, tile_batch=64)
    # batching may reorder float accumulation but not change predictions
    np.testing.assert_allclose(a, b, atol=1e-6)
    c = predict_probabilities(vol, spec, params, tile_batch=1)
    np.testing.assert_array_equal(a, c)
    with pytest.raises(ValueError):
        predict_probabilities(vol, spec, params, tile_batch=0)


def test_predict_volume_threshold_and_probability_domain():
    spec, params = small_net()
    vol = ImageVolume(
        np.random.default_rng(3).random((6, 6, 3)).astype(np.float32), (1, 1, 2.0), "unit"
    )
    mask, prob = predict_volume(vol, spec, params)
    assert mask.dims == vol.dims and prob.dims == vol.dims
    assert mask.spacing == vol.spacing
    assert prob.domain == "unit"
    np.testing.assert_array_equal(mask.voxels, prob.voxels > 0.5)


def test_predict_rejects_too_thin_volume():
    spec, params = small_net()
    vol = ImageVolume(np.zeros((6, 6, 1), dtype=np.float32), (1, 1, 1), "unit")
    with pytest.raises(ValueError):
        predict_probabilities(vol, spec, params)


def test_mc_entropy_range_and_determinism():
    spec, params = small_net()
    vol = ImageVolume(
        np.random.default_rng(4).random((6, 6, 3)).astype(np.float32), (1, 1, 1), "unit"
    )
    h1 = mc_entropy(vol, spec, params, n_samples=4, rng=np.random.default_rng(9))
    h2 = mc_entropy(vol, spec, params, n_samples=4, rng=np.random.default_rng(9))
    np.testing.assert_array_equal(h1.voxels, h2.voxels)
    assert h1.voxels.min() >= 0.0 and h1.voxels.max() <= 1.0
    with pytest.raises(ValueError):
        mc_entropy(vol, spec, params, n_samples=1)


# ---------------------------------------------------------------------------
# post-processing
# ---------------------------------------------------------------------------


def shell(dims, lo, hi):
    v = np.zeros(dims, dtype=bool)
    v[lo:hi, lo:hi, lo:hi] = True
    v[lo + 1:hi - 1, lo + 1:hi - 1, lo + 1:hi - 1] = False
    return v


def test_fill_holes_closes_cavity():
    v = shell((9, 9, 9), 1, 8)
    filled = fill_holes(BinaryVolume(v))
    assert filled.voxels[4, 4, 4]
    assert filled.voxels.sum() == 7 ** 3


def test_fill_holes_respects_6_connectivity_leaks():
    # cavity with a face-connected channel to the border stays open
    v = shell((9, 9, 9), 1, 8)
    v[4, 4, 0:2] = False  # carve a 6-connected tunnel out through z
    leaky = fill_holes(BinaryVolume(v))
    assert not leaky.voxels[4, 4, 4]
    # two-voxel wall with diagonally offset holes: 26-connected background
    # would escape, 6-connected cannot, so the cavity still fills
    w = np.zeros((10, 10, 10), dtype=bool)
    w[1:9, 1:9, 1:9] = True
    w[3:7, 3:7, 3:7] = False  # cavity behind a 2-thick wall
    w[4, 4, 2] = False  # inner wall layer
    w[5, 5, 1] = False  # outer wall layer, diagonal to the inner hole
    assert fill_holes(BinaryVolume(w)).voxels[4, 4, 4]
    assert fill_holes(BinaryVolume(w)).voxels[4, 4, 2]


def test_mean_filter_majority_semantics():
    v = np.zeros((7, 7, 7), dtype=bool)
    v[3, 3, 3] = True
    assert mean_filter(BinaryVolume(v)).voxels.sum() == 0  # lone voxel dies

    cube = np.zeros((8, 8, 8), dtype=bool)
    cube[1:7, 1:7, 1:7] = True
    out = mean_filter(BinaryVolume(cube)).voxels
    assert out[3, 3, 3]  # interior: 27 neighbours
    assert out[1, 3, 3]  # face: 18 >= 14
    assert not out[1, 1, 3]  # edge: 12 < 14
    assert not out[1, 1, 1]  # corner: 8 < 14
    with pytest.raises(ValueError):
        mean_filter(BinaryVolume(cube), keep_at=0)


def test_remove_small_components_threshold_and_26_connectivity():
    v = np.zeros((20, 20, 8), dtype=bool)
    v[1:6, 1:6, 1:4] = True  # 75 voxels
    v[10:15, 10:15, 1:5] = True  # 100 voxels
    out = remove_small_components(BinaryVolume(v), min_voxels=100)
    assert out.voxels[12, 12, 2]
    assert not out.voxels[3, 3, 2]
    # diagonal contact merges components under 26-connectivity
    w = np.zeros((12, 12, 6), dtype=bool)
    w[1:4, 1:4, 1:4] = True  # 27
    w[4:7, 4:7, 4:6] = True  # 18, touching only at a corner
    merged = remove_small_components(BinaryVolume(w), min_voxels=40)
    assert merged.voxels.sum() == 45
    with pytest.raises(ValueError):
        remove_small_components(BinaryVolume(w), min_voxels=0)


def test_remove_small_components_empty_mask():
    empty = BinaryVolume(np.zeros((5, 5, 5), dtype=bool))
    assert remove_small_components(empty).voxels.sum() == 0


def test_postprocess_chain_on_noisy_tube():
    rng = np.random.default_rng(5)
    xs, ys = np.meshgrid(np.arange(24), np.arange(24), indexing="ij")
    tube2d = (xs - 12) ** 2 + (ys - 12) ** 2 <= 16
    v = np.repeat(tube2d[:, :, None], 12, axis=2)
    v[12, 12, 6] = False  # interior cavity
    specks = rng.random(v.shape) < 0.002
    noisy = v | specks
    out = postprocess(BinaryVolume(noisy), min_voxels=50)
    assert out.voxels[12, 12, 6]  # cavity filled
    # isolated specks far from the tube are gone
    far = specks & (((xs - 12) ** 2 + (ys - 12) ** 2)[:, :, None] > 64)
    assert not (out.voxels & far).any()
    # the tube core survives the whole chain
    assert out.voxels[12, 12, :].all()
