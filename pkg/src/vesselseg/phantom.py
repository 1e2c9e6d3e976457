"""Synthetic vascular stacks with exact ground truth.

A phantom is a handful of curved tubes swept through a volume: bright lumen
over dim background, depth-dependent signal decay, dark moving-cell plugs
inside the lumen, Gaussian sensor noise, and (optionally) per-slice smooth
deformations mimicking within-stack motion.  Everything derives from one
seed, so a phantom is byte-reproducible, and the generator keeps the exact
tube axes, radii, and per-slice fields for truth-based evaluation.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .centerline import CenterlineGraph, GraphEdge, GraphNode, Skeleton, path_length_um
from .errors import DegenerateInputError, PipelineError
from .motion import DeformationField, warp_bilinear
from .net.arch import NetSpec, receptive_margins
from .volume import BinaryVolume, ImageVolume, load_mask, load_stack, save_mask, save_stack

AXIS_SAMPLE_STEP = 0.25  # polyline sampling density for rasterization, voxels


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (64, 64, 64)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    n_tubes: int = 4
    radius_range: tuple[float, float] = (2.0, 4.0)
    z_bias: float = 0.8          # 0 = isotropic tube directions, 1 = all along z
    bend_per_step: float = 0.05  # radians of direction jitter per unit step
    background: float = 0.10
    contrast: float = 0.75
    attenuation_per_um: float = 0.004
    plugs_per_100um: float = 2.0
    pre_blur: float = 0.0  # optics blur sigma applied before noise, voxels
    noise_sigma: float = 0.03
    motion_amplitude: float = 0.0  # mean per-slice displacement, voxels
    motion_smoothness: float = 8.0
    rng_seed: int = 0

    def validate(self) -> None:
        if min(self.dims) < 8:
            raise ValueError(f"dims too small: {self.dims}")
        if self.n_tubes < 1:
            raise ValueError("need at least one tube")
        lo, hi = self.radius_range
        if not 0.5 <= lo <= hi:
            raise ValueError(f"bad radius range {self.radius_range}")
        if hi * 2 + 2 > min(self.dims[:2]):
            raise ValueError("tubes too thick for the volume")
        if not 0.0 <= self.z_bias <= 1.0:
            raise ValueError("z_bias must be in [0, 1]")
        if not 0.0 <= self.background < 1.0 or not 0.0 < self.contrast <= 1.0:
            raise ValueError("background/contrast out of range")
        if self.noise_sigma < 0 or self.motion_amplitude < 0 or self.pre_blur < 0:
            raise ValueError("noise/motion/blur amplitudes must be >= 0")


@dataclass
class TubeTruth:
    radius_vx: float
    length_um: float
    tortuosity: float
    points: np.ndarray  # float (k, 3) axis samples, voxel units


@dataclass
class PhantomBundle:
    spec: PhantomSpec
    image: ImageVolume          # what an instrument would record
    clean: ImageVolume          # same stack before motion corruption
    gt: BinaryVolume
    tubes: list[TubeTruth]
    motion: list[DeformationField]

    def axis_skeleton(self) -> Skeleton:
        mask = np.zeros(self.spec.dims, dtype=bool)
        for t in self.tubes:
            ij = np.round(t.points).astype(int)
            np.clip(ij, 0, np.asarray(self.spec.dims) - 1, out=ij)
            mask[ij[:, 0], ij[:, 1], ij[:, 2]] = True
        return Skeleton(mask, self.spec.spacing)

    def axis_graph(self) -> CenterlineGraph:
        nodes, edges = [], []
        for t in self.tubes:
            ij = np.round(t.points).astype(int)
            np.clip(ij, 0, np.asarray(self.spec.dims) - 1, out=ij)
            coords = [tuple(int(c) for c in p) for p in ij]  # JSON-safe ints
            dedup = [coords[0]]
            for p in coords[1:]:
                if p != dedup[-1]:
                    dedup.append(p)
            a = GraphNode(len(nodes), dedup[0], "endpoint")
            b = GraphNode(len(nodes) + 1, dedup[-1], "endpoint")
            nodes += [a, b]
            edges.append(
                GraphEdge(
                    len(edges), a.id, b.id, np.asarray(dedup, dtype=int), t.length_um
                )
            )
        return CenterlineGraph(nodes, edges, self.spec.dims, self.spec.spacing)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def _random_direction(rng: np.random.Generator, z_bias: float) -> np.ndarray:
    v = rng.normal(size=3)
    v /= np.linalg.norm(v)
    v = (1.0 - z_bias) * v + z_bias * np.array([0.0, 0.0, np.sign(v[2]) or 1.0])
    return v / np.linalg.norm(v)


def _walk_tube(
    rng: np.random.Generator, spec: PhantomSpec, start: np.ndarray, d0: np.ndarray
) -> np.ndarray:
    """March from start in both directions until the axis leaves the volume."""
    hi = np.asarray(spec.dims, dtype=float) - 1.0

    def march(p0, d):
        pts = []
        p, dcur = p0.copy(), d.copy()
        while ((p >= 0) & (p <= hi)).all():
            pts.append(p.copy())
            dcur = dcur + spec.bend_per_step * rng.normal(size=3)
            dcur /= np.linalg.norm(dcur)
            p = p + dcur
        return pts

    fwd = march(start, d0)
    bwd = march(start - d0, -d0)
    pts = bwd[::-1] + fwd
    return np.asarray(pts)


def _resample_polyline(pts: np.ndarray, step: float) -> np.ndarray:
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    if total == 0.0:
        return pts[:1]
    s = np.arange(0.0, total + step / 2, step)
    out = np.empty((len(s), 3))
    for c in range(3):
        out[:, c] = np.interp(s, cum, pts[:, c])
    return out


def generate(spec: PhantomSpec) -> PhantomBundle:
    """Build a phantom; all randomness flows from spec.rng_seed."""
    spec.validate()
    ss = np.random.SeedSequence(spec.rng_seed)
    rng_path, rng_plug, rng_noise, rng_motion = (
        np.random.default_rng(s) for s in ss.spawn(4)
    )

    nx, ny, nz = spec.dims
    margin = spec.radius_range[1] + 1.0
    tubes: list[TubeTruth] = []
    dense_axes: list[np.ndarray] = []
    for _ in range(spec.n_tubes):
        placed = False
        for _attempt in range(200):
            radius = float(rng_path.uniform(*spec.radius_range))
            start = np.array(
                [
                    rng_path.uniform(margin, nx - 1 - margin),
                    rng_path.uniform(margin, ny - 1 - margin),
                    rng_path.uniform(0.25 * (nz - 1), 0.75 * (nz - 1)),
                ]
            )
            pts = _walk_tube(rng_path, spec, start, _random_direction(rng_path, spec.z_bias))
            if len(pts) < 8:
                continue
            dense = _resample_polyline(pts, AXIS_SAMPLE_STEP)
            clear = True
            for other, prev in zip(dense_axes, tubes):
                gap = cKDTree(other).query(dense)[0].min()
                if gap < radius + prev.radius_vx + 2.0:
                    clear = False
                    break
            if not clear:
                continue
            length = path_length_um(pts, spec.spacing)
            chord = float(
                np.linalg.norm((pts[-1] - pts[0]) * np.asarray(spec.spacing))
            )
            tubes.append(
                TubeTruth(radius, length, length / chord if chord > 0 else np.inf, pts)
            )
            dense_axes.append(dense)
            placed = True
            break
        if not placed:
            raise PipelineError(
                f"could not place tube {len(tubes) + 1}/{spec.n_tubes}; "
                "lower n_tubes or the radius range"
            )

    # distance from every voxel to each tube axis -> mask and soft edge
    grid = np.stack(
        np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij"),
        axis=-1,
    ).reshape(-1, 3).astype(float)
    gt = np.zeros(nx * ny * nz, dtype=bool)
    alpha = np.zeros(nx * ny * nz)
    for t, dense in zip(tubes, dense_axes):
        dist = cKDTree(dense).query(grid)[0]
        gt |= dist <= t.radius_vx
        np.maximum(alpha, np.clip(t.radius_vx + 0.5 - dist, 0.0, 1.0), out=alpha)
    gt = gt.reshape(nx, ny, nz)
    alpha = alpha.reshape(nx, ny, nz)

    depth_gain = np.exp(
        -spec.attenuation_per_um * np.arange(nz) * spec.spacing[2]
    )[None, None, :]
    img = spec.background + spec.contrast * depth_gain * alpha

    # dark intraluminal plugs: signal voids that do not change the true mask
    for t, dense in zip(tubes, dense_axes):
        n_plugs = rng_plug.poisson(t.length_um * spec.plugs_per_100um / 100.0)
        for _ in range(n_plugs):
            c = dense[rng_plug.integers(len(dense))]
            semi = rng_plug.uniform(0.8, max(0.9, t.radius_vx), size=3)
            factor = rng_plug.uniform(0.15, 0.45)
            lo = np.maximum(np.floor(c - semi).astype(int), 0)
            hi = np.minimum(np.ceil(c + semi).astype(int) + 1, spec.dims)
            sl = tuple(slice(l, h) for l, h in zip(lo, hi))
            local = np.stack(
                np.meshgrid(*[np.arange(l, h) for l, h in zip(lo, hi)], indexing="ij"),
                axis=-1,
            ).astype(float)
            inside = (((local - c) / semi) ** 2).sum(axis=-1) <= 1.0
            region = img[sl]
            region[inside] = spec.background + (region[inside] - spec.background) * factor
            img[sl] = region

    if spec.pre_blur > 0:
        img = ndimage.gaussian_filter(img, spec.pre_blur, mode="nearest")
    img = img + rng_noise.normal(0.0, spec.noise_sigma, size=img.shape)
    np.clip(img, 0.0, 1.0, out=img)
    clean = ImageVolume(img.astype(np.float32), spec.spacing, "unit")

    fields = [DeformationField.identity((nx, ny))]
    if spec.motion_amplitude > 0:
        corrupted = clean.voxels.copy()
        for k in range(1, nz):
            raw = rng_motion.normal(size=(nx, ny, 2))
            smooth = np.stack(
                [
                    ndimage.gaussian_filter(raw[..., c], spec.motion_smoothness, mode="nearest")
                    for c in range(2)
                ],
                axis=-1,
            )
            mean_mag = np.hypot(smooth[..., 0], smooth[..., 1]).mean()
            target = spec.motion_amplitude * rng_motion.uniform(0.6, 1.0)
            f = DeformationField(
                smooth * (target / mean_mag) if mean_mag > 0 else smooth * 0.0
            )
            corrupted[:, :, k] = warp_bilinear(clean.voxels[:, :, k], f).astype(np.float32)
            fields.append(f)
        np.clip(corrupted, 0.0, 1.0, out=corrupted)
        image = ImageVolume(corrupted, spec.spacing, "unit")
    else:
        fields.extend(DeformationField.identity((nx, ny)) for _ in range(nz - 1))
        image = clean

    return PhantomBundle(
        spec=spec,
        image=image,
        clean=clean,
        gt=BinaryVolume(gt, spec.spacing),
        tubes=tubes,
        motion=fields,
    )


# ---------------------------------------------------------------------------
# bundle persistence
# ---------------------------------------------------------------------------


def save_bundle(bundle: PhantomBundle, outdir) -> Path:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    save_stack(bundle.image, outdir / "image.tif")
    save_stack(bundle.clean, outdir / "clean.tif")
    save_mask(bundle.gt, outdir / "labels.tif")
    bundle.axis_graph().save(outdir / "axes.json")
    truth = {
        "spec": asdict(bundle.spec),
        "tubes": [
            {
                "radius_vx": t.radius_vx,
                "length_um": t.length_um,
                "tortuosity": t.tortuosity,
                "points": t.points.tolist(),
            }
            for t in bundle.tubes
        ],
    }
    with open(outdir / "truth.json", "w") as fh:
        json.dump(truth, fh)
        fh.write("\n")
    np.savez_compressed(
        outdir / "motion.npz",
        fields=np.stack([f.displacement for f in bundle.motion]),
    )
    return outdir


def load_bundle(indir) -> PhantomBundle:
    indir = Path(indir)
    with open(indir / "truth.json") as fh:
        truth = json.load(fh)
    spec_kw = truth["spec"]
    for key in ("dims", "spacing", "radius_range"):
        spec_kw[key] = tuple(spec_kw[key])
    spec = PhantomSpec(**spec_kw)
    tubes = [
        TubeTruth(
            t["radius_vx"], t["length_um"], t["tortuosity"], np.asarray(t["points"])
        )
        for t in truth["tubes"]
    ]
    fields = [
        DeformationField(f) for f in np.load(indir / "motion.npz")["fields"]
    ]
    return PhantomBundle(
        spec=spec,
        image=load_stack(indir / "image.tif"),
        clean=load_stack(indir / "clean.tif"),
        gt=load_mask(indir / "labels.tif"),
        tubes=tubes,
        motion=fields,
    )


# ---------------------------------------------------------------------------
# patch sampling for training
# ---------------------------------------------------------------------------


def sample_patches(
    img: ImageVolume,
    gt: BinaryVolume,
    spec: NetSpec,
    n: int,
    balance: float,
    rng: np.random.Generator,
):
    """Yield n (fov patch, roi labels) pairs.

    ``balance`` is the target fraction of samples whose ROI contains at least
    one foreground voxel; each draw rejection-samples an ROI origin until it
    matches the coin flip for that draw.
    """
    if img.dims != gt.dims:
        raise ValueError("image and labels differ in shape")
    if not 0.0 <= balance <= 1.0:
        raise ValueError(f"balance must be in [0, 1], got {balance}")
    has_fg = bool(gt.voxels.any())
    has_bg = True  # an all-foreground stack is pathological but checked below
    if not has_fg and balance > 0.0:
        raise DegenerateInputError("cannot draw foreground patches: empty labels")
    if gt.voxels.all():
        has_bg = False
        if balance < 1.0:
            raise DegenerateInputError("cannot draw background patches: full labels")

    margins = receptive_margins(spec)
    rx, ry, rz = spec.roi
    fx, fy, fz = spec.fov
    span = [d - r for d, r in zip(img.dims, spec.roi)]
    if min(span) < 0:
        raise ValueError(f"volume {img.dims} smaller than roi {spec.roi}")
    padded = np.pad(
        img.voxels.astype(np.float32, copy=False),
        [(m, m) for m in margins],
        mode="reflect",
    )
    for _ in range(n):
        want_fg = bool(rng.random() < balance) if has_fg and has_bg else has_fg
        for _try in range(500):
            ox, oy, oz = (int(rng.integers(s + 1)) for s in span)
            roi_lab = gt.voxels[ox:ox + rx, oy:oy + ry, oz:oz + rz]
            if bool(roi_lab.any()) == want_fg:
                break
        else:
            raise DegenerateInputError(
                f"could not draw a {'foreground' if want_fg else 'background'} "
                "patch in 500 tries"
            )
        yield padded[ox:ox + fx, oy:oy + fy, oz:oz + fz], roi_lab.copy()


class TrainingData:
    """Pre-drawn patch sets over one or more (image, labels) volumes.

    Implements the duck-typed data protocol of net.train: train_batches
    re-shuffles the fixed training draw each epoch; val_arrays returns a
    held-out draw (ideally from different volumes).
    """

    def __init__(self, train_pairs, val_pairs, spec: NetSpec,
                 n_train: int, n_val: int, balance: float = 0.5, seed: int = 0):
        rng_tr = np.random.default_rng([seed, 101])
        rng_va = np.random.default_rng([seed, 202])
        self.spec = spec
        self._train = self._draw(train_pairs, spec, n_train, balance, rng_tr)
        self._val = self._draw(val_pairs, spec, n_val, balance, rng_va)

    @staticmethod
    def _draw(pairs, spec, n, balance, rng):
        if not pairs:
            raise ValueError("no volumes given")
        xs, ys = [], []
        quota = [n // len(pairs)] * len(pairs)
        quota[-1] += n - sum(quota)
        for (img, gt), k in zip(pairs, quota):
            for x, y in sample_patches(img, gt, spec, k, balance, rng):
                xs.append(x)
                ys.append(y)
        return np.stack(xs), np.stack(ys)

    @property
    def n_train(self) -> int:
        return len(self._train[0])

    def train_batches(self, batch_size: int, rng: np.random.Generator):
        x, y = self._train
        order = rng.permutation(len(x))
        for i in range(0, len(x), batch_size):
            sel = order[i:i + batch_size]
            yield x[sel], y[sel]

    def val_arrays(self):
        return self._val
