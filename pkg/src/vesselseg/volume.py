"""Volume containers, stack I/O, normalization, and resampling.

Conventions used throughout the package:

* voxel arrays are indexed ``[x, y, z]`` with shape ``(nx, ny, nz)``; z is the
  slow (depth) axis that corresponds to TIFF pages,
* ``spacing`` is micrometers per voxel as ``(sx, sy, sz)``,
* intensity ``domain`` is either ``"raw"`` (whatever the scanner produced) or
  ``"unit"`` (floats guaranteed inside [0, 1]).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import tifffile
from scipy import ndimage

from .errors import DegenerateInputError, VolumeFormatError

DOMAIN_RAW = "raw"
DOMAIN_UNIT = "unit"

# quantization depth used when a unit-domain volume is written to disk
_UNIT_QUANT = np.uint16


def _check_spacing(spacing) -> tuple[float, float, float]:
    sp = tuple(float(s) for s in spacing)
    if len(sp) != 3 or any(not np.isfinite(s) or s <= 0 for s in sp):
        raise ValueError(f"spacing must be three positive floats, got {spacing!r}")
    return sp


@dataclass(frozen=True)
class ImageVolume:
    """A 3D scalar field with physical spacing.

    ``voxels[x, y, z]``; the on-disk page order (z, y, x) is converted on load.
    """

    voxels: np.ndarray
    spacing: tuple[float, float, float]
    domain: str = DOMAIN_RAW

    def __post_init__(self):
        v = np.asarray(self.voxels)
        if v.ndim != 3 or min(v.shape) < 1:
            raise ValueError(f"expected a 3D array, got shape {v.shape}")
        object.__setattr__(self, "voxels", v)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))
        if self.domain not in (DOMAIN_RAW, DOMAIN_UNIT):
            raise ValueError(f"unknown intensity domain {self.domain!r}")
        if self.domain == DOMAIN_UNIT:
            if not np.issubdtype(v.dtype, np.floating):
                raise ValueError("unit-domain volumes must be floating point")
            lo, hi = float(v.min()), float(v.max())
            if lo < 0.0 or hi > 1.0:
                raise ValueError(f"unit-domain voxels outside [0,1]: [{lo}, {hi}]")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.voxels.shape

    def slice_z(self, k: int) -> np.ndarray:
        """The k-th depth slice as an (nx, ny) array."""
        return self.voxels[:, :, k]


@dataclass(frozen=True)
class BinaryVolume:
    """A boolean mask with the same axis conventions as ImageVolume."""

    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        v = np.asarray(self.voxels)
        if v.ndim != 3 or min(v.shape) < 1:
            raise ValueError(f"expected a 3D array, got shape {v.shape}")
        if v.dtype != np.bool_:
            if not np.all((v == 0) | (v == 1)):
                raise ValueError("mask voxels must be 0/1")
            v = v.astype(bool)
        object.__setattr__(self, "voxels", v)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.voxels.shape

    @property
    def count(self) -> int:
        return int(self.voxels.sum())


# ---------------------------------------------------------------------------
# stack I/O
#
# Primary container is TIFF (8/16-bit, one page per z slice).  Anything TIFF
# cannot hold losslessly goes through the raw fallback: ``<name>.raw`` holding
# the little-endian array (x fastest, then y, then z) next to a JSON header
# ``<name>.raw.json`` with dims, spacing, and dtype.  Both containers share an
# optional sidecar ``<name>.meta.json`` carrying spacing and intensity domain.
# ---------------------------------------------------------------------------


def _sidecar_path(path: Path) -> Path:
    return path.with_name(path.stem + ".meta.json")


def _read_sidecar(path: Path) -> dict:
    sc = _sidecar_path(path)
    if not sc.exists():
        return {}
    try:
        with open(sc) as fh:
            meta = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise VolumeFormatError(f"unreadable sidecar {sc}: {exc}") from exc
    if not isinstance(meta, dict):
        raise VolumeFormatError(f"sidecar {sc} must hold a JSON object")
    return meta


def _write_sidecar(path: Path, spacing, domain: str) -> None:
    meta = {"spacing_um": list(spacing), "intensity_domain": domain}
    with open(_sidecar_path(path), "w") as fh:
        json.dump(meta, fh, indent=2)
        fh.write("\n")


def load_stack(path, spacing=None) -> ImageVolume:
    """Load a z stack from TIFF or the raw fallback.

    ``spacing`` overrides whatever the sidecar records; with neither present
    the spacing defaults to 1 um isotropic.
    """
    path = Path(path)
    if not path.exists():
        raise VolumeFormatError(f"no such stack: {path}")
    meta = _read_sidecar(path)

    if path.suffix.lower() in (".tif", ".tiff"):
        try:
            pages = tifffile.imread(path)
        except (tifffile.TiffFileError, ValueError, OSError) as exc:
            raise VolumeFormatError(f"unreadable TIFF {path}: {exc}") from exc
        if pages.ndim == 2:
            pages = pages[None]
        if pages.ndim != 3:
            raise VolumeFormatError(
                f"{path}: expected a stack of 2D pages, got shape {pages.shape}"
            )
        vox = np.ascontiguousarray(pages.transpose(2, 1, 0))
    elif path.suffix.lower() == ".raw":
        header_path = path.with_suffix(".raw.json")
        if not header_path.exists():
            raise VolumeFormatError(f"raw stack {path} is missing {header_path.name}")
        with open(header_path) as fh:
            header = json.load(fh)
        try:
            dims = tuple(int(d) for d in header["dims"])
            dtype = np.dtype(header["dtype"])
        except (KeyError, TypeError, ValueError) as exc:
            raise VolumeFormatError(f"bad raw header {header_path}: {exc}") from exc
        data = np.fromfile(path, dtype=dtype)
        if data.size != int(np.prod(dims)):
            raise VolumeFormatError(
                f"{path}: header promises {np.prod(dims)} voxels, file holds {data.size}"
            )
        # file layout is x fastest -> read as (z, y, x) then transpose
        vox = np.ascontiguousarray(data.reshape(dims[::-1]).transpose(2, 1, 0))
        meta.setdefault("spacing_um", header.get("spacing_um"))
        meta.setdefault("intensity_domain", header.get("intensity_domain"))
    else:
        raise VolumeFormatError(f"unsupported stack container: {path.suffix!r}")

    if spacing is None:
        spacing = meta.get("spacing_um") or (1.0, 1.0, 1.0)
    domain = meta.get("intensity_domain") or DOMAIN_RAW
    if domain == DOMAIN_UNIT and np.issubdtype(vox.dtype, np.integer):
        # stored quantized; restore to floats in [0, 1]
        qmax = float(np.iinfo(vox.dtype).max)
        vox = (vox.astype(np.float32) / qmax).clip(0.0, 1.0)
    return ImageVolume(vox, spacing, domain)


def save_stack(vol: ImageVolume, path) -> Path:
    """Write a volume to TIFF (integer or unit-domain data) or raw fallback.

    Unit-domain floats are quantized to 16 bit on the TIFF path; the sidecar
    records the domain so load_stack can undo the scaling.  Raw-domain floats
    cannot be stored losslessly in 8/16-bit TIFF and take the raw route.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    vox = vol.voxels

    if path.suffix.lower() in (".tif", ".tiff"):
        if np.issubdtype(vox.dtype, np.integer):
            if vox.dtype not in (np.uint8, np.uint16):
                raise VolumeFormatError(
                    f"TIFF container supports uint8/uint16, not {vox.dtype}; use .raw"
                )
            pages = vox.transpose(2, 1, 0)
        elif vol.domain == DOMAIN_UNIT:
            qmax = np.iinfo(_UNIT_QUANT).max
            pages = np.round(vox.transpose(2, 1, 0) * qmax).astype(_UNIT_QUANT)
        else:
            raise VolumeFormatError(
                "raw-domain float volumes do not fit an integer TIFF; use .raw"
            )
        # grayscale pages even when the stack is thin enough to look like RGB
        tifffile.imwrite(path, np.ascontiguousarray(pages), photometric="minisblack")
    elif path.suffix.lower() == ".raw":
        data = np.ascontiguousarray(vox.transpose(2, 1, 0))
        le = data.astype(data.dtype.newbyteorder("<"), copy=False)
        le.tofile(path)
        header = {
            "dims": list(vol.dims),
            "spacing_um": list(vol.spacing),
            "dtype": le.dtype.str,
            "intensity_domain": vol.domain,
        }
        with open(path.with_suffix(".raw.json"), "w") as fh:
            json.dump(header, fh, indent=2)
            fh.write("\n")
    else:
        raise VolumeFormatError(f"unsupported stack container: {path.suffix!r}")

    _write_sidecar(path, vol.spacing, vol.domain)
    return path


def save_mask(mask: BinaryVolume, path) -> Path:
    """Write a binary mask as an 8-bit stack (0/255)."""
    img = ImageVolume(mask.voxels.astype(np.uint8) * 255, mask.spacing, DOMAIN_RAW)
    return save_stack(img, path)


def load_mask(path, spacing=None) -> BinaryVolume:
    """Load a stack and binarize it (any nonzero voxel is foreground)."""
    vol = load_stack(path, spacing=spacing)
    return BinaryVolume(vol.voxels > 0, vol.spacing)


# ---------------------------------------------------------------------------
# intensity handling
# ---------------------------------------------------------------------------


def to_unit_scale(vol: ImageVolume) -> ImageVolume:
    """Rescale integer data by its dtype range into the unit domain.

    This is a plain linear scaling (no percentile clipping), so relative
    contrast is untouched; useful before registration, which assumes [0, 1].
    """
    if vol.domain == DOMAIN_UNIT:
        return vol
    v = vol.voxels
    if np.issubdtype(v.dtype, np.integer):
        qmax = float(np.iinfo(v.dtype).max)
        return ImageVolume((v.astype(np.float32) / qmax).clip(0.0, 1.0), vol.spacing, DOMAIN_UNIT)
    lo, hi = float(v.min()), float(v.max())
    if not (np.isfinite(lo) and np.isfinite(hi)):
        raise DegenerateInputError("volume contains non-finite intensities")
    if 0.0 <= lo and hi <= 1.0:
        return ImageVolume(v.astype(np.float32), vol.spacing, DOMAIN_UNIT)
    if hi == lo:
        raise DegenerateInputError("constant volume cannot be rescaled")
    return ImageVolume(((v - lo) / (hi - lo)).astype(np.float32), vol.spacing, DOMAIN_UNIT)


def _percentile_bounds(values: np.ndarray, lo_pct: float, hi_pct: float):
    lo = float(np.percentile(values, lo_pct))
    hi = float(np.percentile(values, hi_pct))
    return lo, hi


def normalize_percentile(
    vol: ImageVolume,
    lo_pct: float = 1.0,
    hi_pct: float = 99.0,
    tile_shape=None,
) -> ImageVolume:
    """Map the [lo_pct, hi_pct] intensity band onto [0, 1], clipping the tails.

    With ``tile_shape`` the volume is split into a tile grid (edge tiles may be
    smaller) and each tile is normalized independently, which evens out slow
    illumination drift across large stacks.
    """
    if not 0.0 <= lo_pct < hi_pct <= 100.0:
        raise ValueError(f"bad percentile band [{lo_pct}, {hi_pct}]")
    v = vol.voxels.astype(np.float64, copy=False)
    if not np.isfinite(v).all():
        raise DegenerateInputError("volume contains non-finite intensities")

    def _norm(block: np.ndarray) -> np.ndarray:
        lo, hi = _percentile_bounds(block, lo_pct, hi_pct)
        if hi <= lo:
            raise DegenerateInputError(
                f"percentile band collapsed (p{lo_pct}={lo}, p{hi_pct}={hi})"
            )
        return np.clip((block - lo) / (hi - lo), 0.0, 1.0)

    if tile_shape is None:
        out = _norm(v)
    else:
        tx, ty, tz = (int(t) for t in tile_shape)
        if min(tx, ty, tz) < 1:
            raise ValueError(f"tile_shape must be positive, got {tile_shape!r}")
        out = np.empty_like(v)
        nx, ny, nz = v.shape
        for x0 in range(0, nx, tx):
            for y0 in range(0, ny, ty):
                for z0 in range(0, nz, tz):
                    sl = (slice(x0, x0 + tx), slice(y0, y0 + ty), slice(z0, z0 + tz))
                    out[sl] = _norm(v[sl])
    return ImageVolume(out.astype(np.float32), vol.spacing, DOMAIN_UNIT)


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------


def resample_isotropic(vol: ImageVolume, target_um: float = 1.0) -> ImageVolume:
    """Trilinearly resample onto an isotropic grid of ``target_um`` spacing.

    New grid size per axis is round(n * s / target); sample points land at
    physical positions i*target along each axis, clamped at the volume edge.
    A volume already at the target spacing is returned untouched.
    """
    if not np.isfinite(target_um) or target_um <= 0:
        raise ValueError(f"target spacing must be positive, got {target_um}")
    if all(abs(s - target_um) < 1e-12 for s in vol.spacing):
        return vol

    dims = vol.dims
    new_dims = tuple(
        max(1, int(np.floor(d * s / target_um + 0.5))) for d, s in zip(dims, vol.spacing)
    )
    axes = [
        np.arange(nd, dtype=np.float64) * (target_um / s)
        for nd, s in zip(new_dims, vol.spacing)
    ]
    grid = np.meshgrid(*axes, indexing="ij")
    out = ndimage.map_coordinates(
        vol.voxels.astype(np.float32, copy=False), grid, order=1, mode="nearest"
    )
    if vol.domain == DOMAIN_UNIT:
        out = out.clip(0.0, 1.0)
    return ImageVolume(out.astype(np.float32), (target_um,) * 3, vol.domain)


def pad_reflect(vol, margins):
    """Mirror-pad a volume; ``margins`` is ((x0,x1),(y0,y1),(z0,z1)) or (mx,my,mz).

    Works for ImageVolume and BinaryVolume alike and preserves the type.
    Reflection repeats when a margin exceeds the axis extent, so any margin
    is legal for dims >= 2; dims of 1 cannot reflect.
    """
    m = np.asarray(margins, dtype=int)
    if m.ndim == 1:
        m = np.stack([m, m], axis=1)
    if m.shape != (3, 2) or (m < 0).any():
        raise ValueError(f"margins must be 3 nonnegative pairs, got {margins!r}")
    for ax in range(3):
        if vol.dims[ax] < 2 and m[ax].max() > 0:
            raise ValueError(f"cannot reflect across axis {ax} of extent {vol.dims[ax]}")
    padded = np.pad(vol.voxels, [tuple(p) for p in m], mode="reflect")
    return replace(vol, voxels=padded)
