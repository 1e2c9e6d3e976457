"""Voxel overlap metrics and boundary/centerline surface distances.

Sensitivity, specificity, Jaccard, and Dice come from the voxelwise confusion
counts; Dice is reported through its Jaccard identity 2J/(1+J) so the two can
never disagree.  The modified Hausdorff distance (MHD) is the larger of the
two mean directed nearest-neighbour distances between point sets, computed on
boundary voxels or on centerline voxels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import UndefinedMetricError
from .volume import BinaryVolume


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def confusion(gt: BinaryVolume, pred: BinaryVolume) -> ConfusionCounts:
    if gt.dims != pred.dims:
        raise ValueError(f"shape mismatch: gt {gt.dims}, pred {pred.dims}")
    g = gt.voxels
    p = pred.voxels
    tp = int((g & p).sum())
    fp = int((~g & p).sum())
    fn = int((g & ~p).sum())
    tn = g.size - tp - fp - fn
    return ConfusionCounts(tp, tn, fp, fn)


def sensitivity(c: ConfusionCounts) -> float:
    if c.tp + c.fn == 0:
        raise UndefinedMetricError("sensitivity undefined: no true foreground")
    return c.tp / (c.tp + c.fn)


def specificity(c: ConfusionCounts) -> float:
    if c.tn + c.fp == 0:
        raise UndefinedMetricError("specificity undefined: no true background")
    return c.tn / (c.tn + c.fp)


def jaccard(c: ConfusionCounts) -> float:
    denom = c.tp + c.fp + c.fn
    if denom == 0:
        return 1.0  # both masks empty: perfect agreement by convention
    return c.tp / denom


def dice(c: ConfusionCounts) -> float:
    j = jaccard(c)
    return 2.0 * j / (1.0 + j)


# ---------------------------------------------------------------------------
# surface distances
# ---------------------------------------------------------------------------


def boundary_points(mask: BinaryVolume) -> np.ndarray:
    """Foreground voxels with at least one 6-neighbour outside the mask.

    The volume border counts as background, so a blob touching the edge still
    has a boundary there.
    """
    v = mask.voxels
    eroded = ndimage.binary_erosion(
        v, structure=ndimage.generate_binary_structure(3, 1), border_value=0
    )
    return np.argwhere(v & ~eroded)


def mhd_points(a: np.ndarray, b: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> float:
    """Modified Hausdorff distance between two point sets, in micrometers."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if len(a) == 0 or len(b) == 0:
        raise UndefinedMetricError("MHD undefined for an empty point set")
    s = np.asarray(spacing, dtype=float)
    a = a * s
    b = b * s
    d_ab = cKDTree(b).query(a)[0].mean()
    d_ba = cKDTree(a).query(b)[0].mean()
    return float(max(d_ab, d_ba))


def mhd_boundary(gt: BinaryVolume, pred: BinaryVolume) -> float:
    if gt.dims != pred.dims:
        raise ValueError(f"shape mismatch: gt {gt.dims}, pred {pred.dims}")
    return mhd_points(boundary_points(gt), boundary_points(pred), gt.spacing)


def mhd_centerline(skel_gt, skel_pred) -> float:
    """MHD between two skeletons (anything exposing points() and spacing)."""
    return mhd_points(skel_gt.points(), skel_pred.points(), skel_gt.spacing)


def slice_dice(gt: BinaryVolume, pred: BinaryVolume) -> list[float | None]:
    """Per-z-slice Dice; None where a slice is empty in both masks."""
    if gt.dims != pred.dims:
        raise ValueError(f"shape mismatch: gt {gt.dims}, pred {pred.dims}")
    out: list[float | None] = []
    for k in range(gt.dims[2]):
        g = gt.voxels[:, :, k]
        p = pred.voxels[:, :, k]
        denom = int(g.sum()) + int(p.sum())
        if denom == 0:
            out.append(None)
        else:
            out.append(2.0 * int((g & p).sum()) / denom)
    return out


def evaluate_pair(
    gt: BinaryVolume,
    pred: BinaryVolume,
    skel_gt=None,
    skel_pred=None,
) -> dict:
    """Everything the evaluation report needs, as one JSON-ready dict."""
    c = confusion(gt, pred)
    report = {
        "sensitivity": sensitivity(c),
        "specificity": specificity(c),
        "jaccard": jaccard(c),
        "dice": dice(c),
        "mhd_boundary": mhd_boundary(gt, pred),
        "counts": {"tp": c.tp, "tn": c.tn, "fp": c.fp, "fn": c.fn},
        "slice_dice": slice_dice(gt, pred),
    }
    if skel_gt is not None and skel_pred is not None:
        report["mhd_centerline"] = mhd_centerline(skel_gt, skel_pred)
    return report
