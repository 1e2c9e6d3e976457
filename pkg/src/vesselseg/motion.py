"""Slice-wise nonrigid motion correction.

In-vivo stacks acquired one z slice at a time pick up within-stack motion:
each slice is deformed a little relative to its neighbour.  We register every
slice to its (already corrected) predecessor with a diffeomorphic-style demons
scheme: small intensity-driven updates, Gaussian regularization, composition,
and rejection of any step that does not lower the slice MSE.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import ImageVolume


@dataclass
class DemonsConfig:
    sigma: float = 1.3          # Gaussian regularizer, voxels
    max_iters: int = 50
    mse_rel_tol: float = 1e-4   # stop when relative MSE improvement drops below this
    step_cap: float = 1.0       # max update magnitude per iteration, voxels
    den_eps: float = 1e-9       # demons denominator floor

    def validate(self) -> None:
        if self.sigma <= 0 or not np.isfinite(self.sigma):
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.mse_rel_tol < 0:
            raise ValueError(f"mse_rel_tol must be >= 0, got {self.mse_rel_tol}")
        if self.step_cap <= 0:
            raise ValueError(f"step_cap must be positive, got {self.step_cap}")
        if self.den_eps <= 0:
            raise ValueError(f"den_eps must be positive, got {self.den_eps}")


@dataclass
class DeformationField:
    """Dense 2D displacement, ``displacement[x, y] = (dx, dy)`` in voxels.

    Warping convention: ``output(x) = image(x + displacement(x))`` (the field
    pulls intensities from the moving image).
    """

    displacement: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.displacement, dtype=np.float64)
        if d.ndim != 3 or d.shape[2] != 2:
            raise ValueError(f"expected (nx, ny, 2) displacement, got {d.shape}")
        if not np.isfinite(d).all():
            raise ValueError("displacement contains non-finite values")
        self.displacement = d

    @classmethod
    def identity(cls, dims: tuple[int, int]) -> "DeformationField":
        return cls(np.zeros((dims[0], dims[1], 2)))

    @property
    def dims(self) -> tuple[int, int]:
        return self.displacement.shape[:2]

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.displacement[..., 0], self.displacement[..., 1])


def warp_bilinear(img: np.ndarray, field: DeformationField) -> np.ndarray:
    """Resample ``img`` at x + d(x) with bilinear weights, clamping at edges."""
    img = np.asarray(img, dtype=np.float64)
    if img.shape != field.dims:
        raise ValueError(f"image {img.shape} vs field {field.dims}")
    nx, ny = img.shape
    gx = np.arange(nx, dtype=np.float64)[:, None] + field.displacement[..., 0]
    gy = np.arange(ny, dtype=np.float64)[None, :] + field.displacement[..., 1]
    return ndimage.map_coordinates(img, [gx, gy], order=1, mode="nearest")


def _clamped_gradient(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # central differences with indices clamped at the border
    def diff(axis):
        fwd = np.roll(img, -1, axis=axis)
        bwd = np.roll(img, 1, axis=axis)
        head = [slice(None)] * img.ndim
        tail = [slice(None)] * img.ndim
        head[axis] = slice(0, 1)
        tail[axis] = slice(-1, None)
        fwd[tuple(tail)] = img[tuple(tail)]
        bwd[tuple(head)] = img[tuple(head)]
        return (fwd - bwd) / 2.0
    return diff(0), diff(1)


def _smooth_field(d: np.ndarray, sigma: float) -> np.ndarray:
    out = np.empty_like(d)
    for c in range(2):
        out[..., c] = ndimage.gaussian_filter(d[..., c], sigma, mode="nearest")
    return out


def _compose(s: np.ndarray, u: np.ndarray) -> np.ndarray:
    """(s o u)(x) = u(x) + s(x + u(x)): apply update u, then existing field s."""
    f = DeformationField(u)
    out = np.empty_like(s)
    for c in range(2):
        out[..., c] = warp_bilinear(s[..., c], f)
    return out + u


def demons_register(
    fixed: np.ndarray,
    moving: np.ndarray,
    config: DemonsConfig | None = None,
) -> tuple[DeformationField, np.ndarray, list[float]]:
    """Estimate a displacement field aligning ``moving`` onto ``fixed``.

    Returns (field, warped_moving, mse_trace).  The trace starts at the
    unwarped MSE and records every accepted iteration; candidate steps that
    would raise the MSE are rejected and terminate the loop, so the trace is
    non-increasing.

    Inputs are expected as unit-normalized 2D slices of equal shape.
    """
    cfg = config or DemonsConfig()
    cfg.validate()
    fixed = np.asarray(fixed, dtype=np.float64)
    moving = np.asarray(moving, dtype=np.float64)
    if fixed.ndim != 2 or fixed.shape != moving.shape:
        raise ValueError(f"shape mismatch: fixed {fixed.shape}, moving {moving.shape}")
    if not (np.isfinite(fixed).all() and np.isfinite(moving).all()):
        raise ValueError("registration inputs must be finite")

    gx, gy = _clamped_gradient(fixed)
    grad_sq = gx * gx + gy * gy

    s = np.zeros(fixed.shape + (2,))
    warped = moving.copy()
    trace = [float(np.mean((warped - fixed) ** 2))]

    for _ in range(cfg.max_iters):
        if trace[-1] == 0.0:
            break
        diff = warped - fixed
        den = grad_sq + diff * diff
        # passive-force demons update along the fixed-image gradient; the
        # pull-convention warp needs the (fixed - warped) sign to descend
        scale = np.where(den > cfg.den_eps, -diff / np.maximum(den, cfg.den_eps), 0.0)
        u = np.stack([scale * gx, scale * gy], axis=-1)
        mag = np.hypot(u[..., 0], u[..., 1])
        over = mag > cfg.step_cap
        if over.any():
            u[over] *= (cfg.step_cap / mag[over])[..., None]
        u = _smooth_field(u, cfg.sigma)
        cand = _smooth_field(_compose(s, u), cfg.sigma)
        warped_cand = warp_bilinear(moving, DeformationField(cand))
        mse = float(np.mean((warped_cand - fixed) ** 2))
        if mse >= trace[-1]:
            break  # reject the step, keep the last accepted field
        improved = trace[-1] - mse
        s, warped = cand, warped_cand
        trace.append(mse)
        if improved < cfg.mse_rel_tol * trace[-2]:
            break

    return DeformationField(s), warped, trace


def correct_stack(
    vol: ImageVolume,
    config: DemonsConfig | None = None,
) -> tuple[ImageVolume, list[DeformationField]]:
    """Register each slice to its corrected predecessor, top slice fixed.

    Slice 0 is the anchor and gets the identity field; slice k is warped onto
    the corrected slice k-1, so corrections accumulate down the stack instead
    of chasing the raw (still wobbling) neighbour.
    """
    cfg = config or DemonsConfig()
    cfg.validate()
    vox = vol.voxels.astype(np.float64, copy=False)
    nx, ny, nz = vox.shape
    corrected = np.empty((nx, ny, nz))
    corrected[:, :, 0] = vox[:, :, 0]
    fields = [DeformationField.identity((nx, ny))]
    for k in range(1, nz):
        field, warped, _ = demons_register(corrected[:, :, k - 1], vox[:, :, k], cfg)
        corrected[:, :, k] = warped
        fields.append(field)
    out = corrected.astype(np.float32)
    if vol.domain == "unit":
        out = out.clip(0.0, 1.0)
    return ImageVolume(out, vol.spacing, vol.domain), fields


def residual_motion(
    field_true: DeformationField,
    field_est: DeformationField,
    mask: np.ndarray | None = None,
) -> float:
    """Mean voxel distance between a true warp and the estimated correction.

    The correction is perfect when est composed with the true warp is the
    identity: est(x) + true(x + est(x)) = 0.  Returns the mean magnitude of
    that residual in voxels.  A boolean mask restricts the average to pixels
    where motion is observable at all; in flat background the data term is
    zero and no registration can recover the field there.
    """
    if field_true.dims != field_est.dims:
        raise ValueError("field shapes differ")
    e = field_est.displacement
    r = np.empty_like(e)
    f_est = DeformationField(e)
    for c in range(2):
        r[..., c] = warp_bilinear(field_true.displacement[..., c], f_est)
    r = r + e
    mag = np.hypot(r[..., 0], r[..., 1])
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != mag.shape:
            raise ValueError(f"mask shape {mask.shape} != field dims {mag.shape}")
        if not mask.any():
            raise ValueError("mask selects no pixels")
        mag = mag[mask]
    return float(np.mean(mag))
