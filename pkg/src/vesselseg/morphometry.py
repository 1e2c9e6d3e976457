"""Per-segment vessel measurements and group comparisons.

Each centerline edge becomes one measured segment: diameter is twice the mean
distance-to-background along the path, length is the polyline length, and
tortuosity is length over endpoint chord.  Capillaries are segments with
diameter strictly below 10 um.  Group differences are tested per segment
metric with Kruskal-Wallis and Bonferroni correction across comparisons.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.stats import chi2

from .centerline import CenterlineGraph, GraphEdge, path_length_um
from .errors import UndefinedMetricError
from .volume import BinaryVolume

CAPILLARY_MAX_DIAMETER_UM = 10.0

SEGMENT_FIELDS = ["id", "group", "diameter_um", "length_um", "tortuosity", "is_cycle"]
COMPARISON_FIELDS = [
    "group_a", "group_b", "metric", "delta_mu", "H", "p_raw", "p_bonferroni",
]


def distance_map_um(seg: BinaryVolume) -> np.ndarray:
    """Euclidean distance from each foreground voxel to the background, um.

    The volume is padded with one background layer first, so a vessel running
    into the border measures its distance to that border rather than blowing
    up on an all-foreground axis.
    """
    padded = np.pad(seg.voxels, 1, mode="constant", constant_values=False)
    dist = ndimage.distance_transform_edt(padded, sampling=seg.spacing)
    return dist[1:-1, 1:-1, 1:-1]


def edge_diameter_um(edge: GraphEdge, dist_um: np.ndarray) -> float:
    """Twice the mean centerline-to-wall distance along the edge path."""
    path = edge.path
    if edge.is_cycle and len(path) > 1 and (path[0] == path[-1]).all():
        path = path[:-1]  # closed paths repeat the anchor voxel
    d = dist_um[path[:, 0], path[:, 1], path[:, 2]]
    return float(2.0 * d.mean())


def edge_tortuosity(edge: GraphEdge, spacing) -> float:
    """Path length over endpoint chord; undefined for closed paths."""
    if edge.is_cycle:
        raise UndefinedMetricError("tortuosity undefined for a closed loop")
    p = edge.path.astype(float)
    chord = float(np.linalg.norm((p[-1] - p[0]) * np.asarray(spacing, dtype=float)))
    if chord == 0.0:
        raise UndefinedMetricError("tortuosity undefined: zero chord")
    return path_length_um(edge.path, spacing) / chord


@dataclass(frozen=True)
class SegmentRecord:
    id: int
    group: str
    diameter_um: float
    length_um: float
    tortuosity: float | None  # None for closed loops
    is_cycle: bool


def measure_graph(
    graph: CenterlineGraph, seg: BinaryVolume, group: str = ""
) -> list[SegmentRecord]:
    """One record per edge.  Cycles keep diameter and length but carry no
    tortuosity and are flagged so statistics can exclude them."""
    if graph.dims != seg.dims:
        raise ValueError(f"graph grid {graph.dims} does not match mask {seg.dims}")
    dist = distance_map_um(seg)
    records = []
    for edge in graph.edges:
        cyc = edge.is_cycle or edge.n1 == edge.n2
        records.append(
            SegmentRecord(
                id=edge.id,
                group=group,
                diameter_um=edge_diameter_um(edge, dist),
                length_um=edge.length_um,
                tortuosity=None if cyc else edge_tortuosity(edge, graph.spacing),
                is_cycle=cyc,
            )
        )
    return records


def filter_capillaries(
    records: list[SegmentRecord], max_diameter_um: float = CAPILLARY_MAX_DIAMETER_UM
) -> list[SegmentRecord]:
    """Strictly-below threshold: a segment of exactly max_diameter_um is out."""
    return [r for r in records if r.diameter_um < max_diameter_um]


# ---------------------------------------------------------------------------
# group statistics
# ---------------------------------------------------------------------------


def kruskal_wallis(groups: list[np.ndarray]) -> tuple[float, float]:
    """Kruskal-Wallis H with tie correction and its chi-square p-value.

    Implemented directly from the rank-sum definition so the statistic is
    auditable: H = (12 / N(N+1)) * sum n_i (rbar_i - rbar)^2, divided by the
    tie correction 1 - sum(t^3 - t) / (N^3 - N).
    """
    clean = [np.asarray(g, dtype=float).ravel() for g in groups]
    if len(clean) < 2:
        raise ValueError("need at least two groups")
    for g in clean:
        if g.size == 0:
            raise ValueError("empty group")
        if not np.isfinite(g).all():
            raise ValueError("non-finite sample value")
    pooled = np.concatenate(clean)
    n = pooled.size
    order = np.argsort(pooled, kind="stable")
    ranks = np.empty(n, dtype=float)
    sorted_vals = pooled[order]
    # average ranks over ties
    i = 0
    while i < n:
        j = i
        while j + 1 < n and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1

    grand_mean = (n + 1) / 2.0
    h = 0.0
    start = 0
    for g in clean:
        r = ranks[start:start + g.size]
        start += g.size
        h += g.size * (r.mean() - grand_mean) ** 2
    h *= 12.0 / (n * (n + 1))

    _, counts = np.unique(sorted_vals, return_counts=True)
    tie_term = float(((counts ** 3) - counts).sum())
    correction = 1.0 - tie_term / (n ** 3 - n)
    if correction <= 0.0:
        raise UndefinedMetricError("all pooled values identical; H undefined")
    h /= correction

    df = len(clean) - 1
    p = float(chi2.sf(h, df))
    return float(h), p


@dataclass(frozen=True)
class ComparisonResult:
    group_a: str
    group_b: str
    metric: str
    delta_mu: float
    h_stat: float
    p_raw: float
    p_bonferroni: float


def compare_groups(
    samples: dict[str, dict[str, np.ndarray]],
    n_comparisons: int | None = None,
) -> list[ComparisonResult]:
    """All pairwise group tests per metric.

    ``samples`` maps group name -> metric name -> 1D values.  Bonferroni
    multiplies each raw p by the total number of comparisons performed
    (pairs x metrics), capped at 1; pass ``n_comparisons`` to correct against
    a different family size.
    """
    names = sorted(samples)
    if len(names) < 2:
        raise ValueError("need at least two groups to compare")
    metrics = sorted({m for g in samples.values() for m in g})
    pairs = list(combinations(names, 2))
    m = n_comparisons if n_comparisons is not None else len(pairs) * len(metrics)
    if m < 1:
        raise ValueError(f"n_comparisons must be >= 1, got {m}")
    results = []
    for metric in metrics:
        for a, b in pairs:
            va = np.asarray(samples[a].get(metric, ()), dtype=float)
            vb = np.asarray(samples[b].get(metric, ()), dtype=float)
            if va.size == 0 or vb.size == 0:
                continue
            h, p = kruskal_wallis([va, vb])
            results.append(
                ComparisonResult(
                    group_a=a,
                    group_b=b,
                    metric=metric,
                    delta_mu=float(va.mean() - vb.mean()),
                    h_stat=h,
                    p_raw=p,
                    p_bonferroni=min(1.0, m * p),
                )
            )
    return results


def records_by_metric(records: list[SegmentRecord]) -> dict[str, np.ndarray]:
    """Metric arrays for one group; cycles drop out of length and tortuosity."""
    open_segs = [r for r in records if not r.is_cycle]
    return {
        "diameter_um": np.asarray([r.diameter_um for r in records], dtype=float),
        "length_um": np.asarray([r.length_um for r in open_segs], dtype=float),
        "tortuosity": np.asarray(
            [r.tortuosity for r in open_segs if r.tortuosity is not None], dtype=float
        ),
    }


# ---------------------------------------------------------------------------
# CSV emit/ingest
# ---------------------------------------------------------------------------


def write_segments_csv(records: list[SegmentRecord], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SEGMENT_FIELDS)
        for r in records:
            w.writerow(
                [
                    r.id,
                    r.group,
                    repr(float(r.diameter_um)),
                    repr(float(r.length_um)),
                    "" if r.tortuosity is None else repr(float(r.tortuosity)),
                    int(r.is_cycle),
                ]
            )
    return path


def read_segments_csv(path) -> list[SegmentRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        SegmentRecord(
            id=int(r["id"]),
            group=r["group"],
            diameter_um=float(r["diameter_um"]),
            length_um=float(r["length_um"]),
            tortuosity=float(r["tortuosity"]) if r["tortuosity"] else None,
            is_cycle=bool(int(r["is_cycle"])),
        )
        for r in rows
    ]


def write_comparisons_csv(results: list[ComparisonResult], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(COMPARISON_FIELDS)
        for r in results:
            w.writerow(
                [
                    r.group_a,
                    r.group_b,
                    r.metric,
                    repr(float(r.delta_mu)),
                    repr(float(r.h_stat)),
                    repr(float(r.p_raw)),
                    repr(float(r.p_bonferroni)),
                ]
            )
    return path
