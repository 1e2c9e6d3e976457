"""Whole-volume inference and binary post-processing.

Inference tiles the volume into non-overlapping ROI blocks.  Each block's
field of view extends (fov-roi)/2 voxels beyond it; the volume is mirror-
padded so border tiles see plausible context.  Every output voxel is written
exactly once (checked), so segmenting a volume is deterministic and seamless.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .net.arch import NetSpec, receptive_margins
from .net.model import forward
from .volume import BinaryVolume, ImageVolume

# a 3^3 mean filter keeps a voxel when at least half the neighbourhood
# (14 of 27) is foreground
MEAN_FILTER_KEEP = 14
MIN_COMPONENT_VOXELS = 100


def predict_probabilities(
    vol: ImageVolume,
    spec: NetSpec,
    params: dict[str, np.ndarray],
    tile_batch: int = 256,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Foreground probability for every voxel, shape = vol.dims, float32."""
    if tile_batch < 1:
        raise ValueError(f"tile_batch must be >= 1, got {tile_batch}")
    mx, my, mz = receptive_margins(spec)
    rx, ry, rz = spec.roi
    nx, ny, nz = vol.dims
    ntx, nty, ntz = -(-nx // rx), -(-ny // ry), -(-nz // rz)

    vox = vol.voxels.astype(np.float32, copy=False)
    pad = (
        (mx, mx + ntx * rx - nx),
        (my, my + nty * ry - ny),
        (mz, mz + ntz * rz - nz),
    )
    if any(d < 2 and max(p) > 0 for d, p in zip(vol.dims, pad)):
        raise ValueError(f"volume {vol.dims} too thin to mirror-pad for fov {spec.fov}")
    padded = np.pad(vox, pad, mode="reflect")

    fx, fy, fz = spec.fov
    origins = [
        (ix * rx, iy * ry, iz * rz)
        for ix in range(ntx)
        for iy in range(nty)
        for iz in range(ntz)
    ]
    prob = np.empty((nx, ny, nz), dtype=np.float32)
    written = np.zeros((nx, ny, nz), dtype=np.uint8)
    for start in range(0, len(origins), tile_batch):
        chunk = origins[start:start + tile_batch]
        batch = np.stack(
            [padded[ox:ox + fx, oy:oy + fy, oz:oz + fz] for ox, oy, oz in chunk]
        )
        probs, _ = forward(spec, params, batch, mode=mode, rng=rng)
        fg = probs[..., 1]
        for t, (ox, oy, oz) in enumerate(chunk):
            ex, ey, ez = min(ox + rx, nx), min(oy + ry, ny), min(oz + rz, nz)
            prob[ox:ex, oy:ey, oz:ez] = fg[t, : ex - ox, : ey - oy, : ez - oz]
            written[ox:ex, oy:ey, oz:ez] += 1
    if not (written == 1).all():
        raise AssertionError("tiling failed to cover each voxel exactly once")
    return prob


def predict_volume(
    vol: ImageVolume,
    spec: NetSpec,
    params: dict[str, np.ndarray],
    tile_batch: int = 256,
) -> tuple[BinaryVolume, ImageVolume]:
    """Segment a volume; returns (mask, foreground probability volume)."""
    prob = predict_probabilities(vol, spec, params, tile_batch)
    return (
        BinaryVolume(prob > 0.5, vol.spacing),
        ImageVolume(prob.clip(0.0, 1.0), vol.spacing, "unit"),
    )


def mc_entropy(
    vol: ImageVolume,
    spec: NetSpec,
    params: dict[str, np.ndarray],
    n_samples: int = 20,
    rng: np.random.Generator | None = None,
    tile_batch: int = 256,
) -> ImageVolume:
    """Per-voxel Shannon entropy of the mean foreground probability under
    test-time dropout.

    Each pass keeps dropout active with fresh masks; the n_samples mean
    probability p feeds H = -p log2 p - (1-p) log2 (1-p), so H is 0 where the
    samples agree confidently and 1 where they split evenly.
    """
    if n_samples < 2:
        raise ValueError(f"n_samples must be >= 2, got {n_samples}")
    rng = rng or np.random.default_rng(0)
    acc = np.zeros(vol.dims, dtype=np.float64)
    for _ in range(n_samples):
        acc += predict_probabilities(vol, spec, params, tile_batch, "mc_dropout", rng)
    p = acc / n_samples
    p = p.clip(1e-12, 1.0 - 1e-12)
    h = -(p * np.log2(p) + (1.0 - p) * np.log2(1.0 - p))
    return ImageVolume(h.clip(0.0, 1.0).astype(np.float32), vol.spacing, "unit")


# ---------------------------------------------------------------------------
# post-processing: fill holes, then a 3^3 majority filter, then drop specks
# ---------------------------------------------------------------------------


def fill_holes(mask: BinaryVolume) -> BinaryVolume:
    """Fill background cavities with no 6-connected path to the border."""
    filled = ndimage.binary_fill_holes(
        mask.voxels, structure=ndimage.generate_binary_structure(3, 1)
    )
    return BinaryVolume(filled, mask.spacing)


def mean_filter(mask: BinaryVolume, keep_at: int = MEAN_FILTER_KEEP) -> BinaryVolume:
    """3x3x3 box count with zero padding; keep voxels with count >= keep_at."""
    if not 1 <= keep_at <= 27:
        raise ValueError(f"keep_at must be in [1, 27], got {keep_at}")
    counts = mask.voxels.astype(np.uint8)
    for axis in range(3):
        counts = ndimage.correlate1d(
            counts, np.ones(3, dtype=np.uint8), axis=axis, mode="constant", cval=0
        )
    return BinaryVolume(counts >= keep_at, mask.spacing)


def remove_small_components(
    mask: BinaryVolume, min_voxels: int = MIN_COMPONENT_VOXELS
) -> BinaryVolume:
    """Drop 26-connected components smaller than min_voxels."""
    if min_voxels < 1:
        raise ValueError(f"min_voxels must be >= 1, got {min_voxels}")
    labels, n = ndimage.label(
        mask.voxels, structure=ndimage.generate_binary_structure(3, 3)
    )
    if n == 0:
        return mask
    sizes = np.bincount(labels.ravel())
    keep = sizes >= min_voxels
    keep[0] = False
    return BinaryVolume(keep[labels], mask.spacing)


def postprocess(
    mask: BinaryVolume, min_voxels: int = MIN_COMPONENT_VOXELS
) -> BinaryVolume:
    """Fill holes, majority-filter, drop small components, in that order."""
    return remove_small_components(mean_filter(fill_holes(mask)), min_voxels)
