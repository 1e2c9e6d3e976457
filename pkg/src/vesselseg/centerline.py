"""Centerline extraction: thinning, refinement, pruning, graph building.

The skeleton lives on the voxel grid with 26-connectivity.  Degree-1 voxels
are endpoints, degree >= 3 voxels are junction voxels; touching junction
voxels merge into one junction node.  Everything downstream (pruning,
topology, morphometry) works on that picture.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from skimage.morphology import skeletonize

from .errors import VolumeFormatError
from .segment import mean_filter
from .volume import BinaryVolume

Voxel = tuple[int, int, int]

DEAD_END_MIN_VOXELS = 11  # rule 1: shorter dead-end branches are noise
LOOP_MAX_VOXELS = 2       # rule 4: 1-2 voxel loops are thinning artifacts


@dataclass(frozen=True)
class Skeleton:
    """One-voxel-thick centerline mask, same grid conventions as the masks."""

    voxels: np.ndarray
    spacing: tuple[float, float, float]

    def __post_init__(self):
        v = np.asarray(self.voxels).astype(bool)
        if v.ndim != 3:
            raise ValueError(f"expected a 3D array, got shape {v.shape}")
        object.__setattr__(self, "voxels", v)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self):
        return self.voxels.shape

    @property
    def count(self) -> int:
        return int(self.voxels.sum())

    def points(self) -> np.ndarray:
        return np.argwhere(self.voxels)


def thin3d(mask: BinaryVolume) -> Skeleton:
    """Topology-preserving 3D thinning down to a medial-axis voxel chain."""
    return Skeleton(skeletonize(mask.voxels, method="lee").astype(bool), mask.spacing)


def dilate_ball(mask: np.ndarray, radius: float) -> np.ndarray:
    """Dilation by a Euclidean ball, computed via the distance transform."""
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    if not mask.any():
        return mask.copy()
    return ndimage.distance_transform_edt(~mask) <= radius


def refine_centerline(seg: BinaryVolume, skel: Skeleton | None = None) -> Skeleton:
    """Smooth a raw skeleton and re-thin it, constrained near the vessels.

    Raw thinning of a bumpy segmentation zig-zags.  Inflating the skeleton
    with an r=5 ball, smoothing with the majority filter, closing in-plane
    holes, and thinning again straightens those wiggles; the result is then
    clipped to within 1 voxel of the segmentation so the smoothing cannot
    drag the centerline outside the vessel.
    """
    if skel is None:
        skel = thin3d(seg)
    if skel.voxels.shape != seg.voxels.shape:
        raise ValueError("skeleton and segmentation shapes differ")
    band = dilate_ball(skel.voxels, 5.0)
    band = mean_filter(BinaryVolume(band, seg.spacing)).voxels
    for k in range(band.shape[2]):
        band[:, :, k] = ndimage.binary_fill_holes(band[:, :, k])
    refined = skeletonize(band, method="lee").astype(bool)
    refined &= dilate_ball(seg.voxels, 1.0)
    return Skeleton(refined, seg.spacing)


# ---------------------------------------------------------------------------
# voxel graph utilities
# ---------------------------------------------------------------------------

_OFFSETS = [
    (dx, dy, dz)
    for dx in (-1, 0, 1)
    for dy in (-1, 0, 1)
    for dz in (-1, 0, 1)
    if (dx, dy, dz) != (0, 0, 0)
]


def _adjacency(mask: np.ndarray) -> dict[Voxel, set[Voxel]]:
    coords = [tuple(int(c) for c in p) for p in np.argwhere(mask)]
    present = set(coords)
    adj: dict[Voxel, set[Voxel]] = {c: set() for c in coords}
    for c in coords:
        x, y, z = c
        for dx, dy, dz in _OFFSETS:
            nb = (x + dx, y + dy, z + dz)
            if nb in present:
                adj[c].add(nb)
    return adj


def _trace_chain(
    adj: dict[Voxel, set[Voxel]], start: Voxel, first: Voxel, stops: set[Voxel]
) -> list[Voxel]:
    """Walk from a stop voxel through degree-2 voxels to the next stop."""
    path = [start, first]
    prev, cur = start, first
    while cur not in stops:
        nxts = adj[cur] - {prev}
        if len(nxts) != 1:
            break  # defensive: malformed chain, stop where it ends
        nxt = nxts.pop()
        path.append(nxt)
        prev, cur = cur, nxt
    return path


# ---------------------------------------------------------------------------
# pruning
# ---------------------------------------------------------------------------


def prune(skel: Skeleton, max_passes: int = 100) -> Skeleton:
    """Remove thinning artifacts, repeating until the skeleton is stable.

    Per pass:
      1. dead-end branches shorter than 11 voxels (endpoint side of a
         junction, junction voxel itself kept),
      2. single voxels hanging off a junction (the 1-voxel case of rule 1),
      3. isolated voxels,
      4. loops of one or two voxels: parallel connections between the same
         junction pair where the detour interior is <= 2 voxels (the
         shortest connection survives).
    """
    mask = skel.voxels.copy()
    for _ in range(max_passes):
        adj = _adjacency(mask)
        if not adj:
            break
        deg = {v: len(n) for v, n in adj.items()}
        endpoints = {v for v, d in deg.items() if d == 1}
        junctions = {v for v, d in deg.items() if d >= 3}
        stops = endpoints | junctions
        removals: set[Voxel] = {v for v, d in deg.items() if d == 0}  # rule 3

        # rules 1 and 2: spurs from an endpoint to a junction
        for e in sorted(endpoints):
            path = _trace_chain(adj, e, min(adj[e]), stops)
            if path[-1] in junctions:
                branch = len(path) - 1  # endpoint plus interior, junction excluded
                if branch < DEAD_END_MIN_VOXELS:
                    removals.update(path[:-1])

        # rule 4: short parallel detours between one junction pair
        connections: dict[tuple[Voxel, Voxel], list[list[Voxel]]] = {}
        seen_direct: set[tuple[Voxel, Voxel]] = set()
        inner_seen: set[Voxel] = set()
        for j in sorted(junctions):
            for nb in sorted(adj[j]):
                if nb in junctions:
                    key = (min(j, nb), max(j, nb))
                    if key not in seen_direct:
                        seen_direct.add(key)
                        connections.setdefault(key, []).append([j, nb])
                elif nb not in endpoints and nb not in inner_seen:
                    path = _trace_chain(adj, j, nb, stops)
                    inner_seen.update(path[1:-1])
                    if path[-1] in junctions:
                        key = (min(j, path[-1]), max(j, path[-1]))
                        connections.setdefault(key, []).append(path)
        for key, paths in connections.items():
            paths.sort(key=lambda p: (len(p), p))
            if key[0] == key[1]:
                # chain leaving a junction and re-entering it: any short
                # interior is itself the loop
                spare = paths
            elif len(paths) >= 2:
                spare = paths[1:]  # shortest connection survives
            else:
                continue
            for extra in spare:
                interior = extra[1:-1]
                if 1 <= len(interior) <= LOOP_MAX_VOXELS:
                    removals.update(interior)

        if not removals:
            break
        for v in removals:
            mask[v] = False
    return Skeleton(mask, skel.spacing)


# ---------------------------------------------------------------------------
# graph extraction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GraphNode:
    id: int
    pos: Voxel
    kind: str  # "endpoint" | "junction" | "anchor" (cycle bookmark)


@dataclass
class GraphEdge:
    id: int
    n1: int
    n2: int
    path: np.ndarray  # (k, 3) int voxel coordinates, ends included
    length_um: float
    is_cycle: bool = False


@dataclass
class CenterlineGraph:
    nodes: list[GraphNode]
    edges: list[GraphEdge]
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]

    def node_degrees(self) -> dict[int, int]:
        deg = {n.id: 0 for n in self.nodes}
        for e in self.edges:
            deg[e.n1] += 1
            if e.n2 != e.n1:
                deg[e.n2] += 1
        return deg

    def to_json_dict(self) -> dict:
        return {
            "dims": list(self.dims),
            "spacing_um": list(self.spacing),
            "nodes": [
                {"id": n.id, "pos": list(n.pos), "kind": n.kind} for n in self.nodes
            ],
            "edges": [
                {
                    "id": e.id,
                    "n1": e.n1,
                    "n2": e.n2,
                    "path": [[int(c) for c in p] for p in e.path],
                    "length_um": e.length_um,
                    "is_cycle": e.is_cycle,
                }
                for e in self.edges
            ],
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "CenterlineGraph":
        try:
            nodes = [
                GraphNode(int(n["id"]), tuple(int(c) for c in n["pos"]), str(n["kind"]))
                for n in obj["nodes"]
            ]
            edges = [
                GraphEdge(
                    int(e["id"]),
                    int(e["n1"]),
                    int(e["n2"]),
                    np.asarray(e["path"], dtype=int).reshape(-1, 3),
                    float(e["length_um"]),
                    bool(e.get("is_cycle", False)),
                )
                for e in obj["edges"]
            ]
            dims = tuple(int(d) for d in obj["dims"])
            spacing = tuple(float(s) for s in obj["spacing_um"])
        except (KeyError, TypeError, ValueError) as exc:
            raise VolumeFormatError(f"malformed graph JSON: {exc}") from exc
        return cls(nodes, edges, dims, spacing)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=1)
            fh.write("\n")
        return path

    @classmethod
    def load(cls, path) -> "CenterlineGraph":
        try:
            with open(path) as fh:
                obj = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise VolumeFormatError(f"cannot read graph {path}: {exc}") from exc
        return cls.from_json_dict(obj)


def path_length_um(path: np.ndarray, spacing) -> float:
    """Polyline length over consecutive voxel steps, in micrometers."""
    p = np.asarray(path, dtype=float)
    if len(p) < 2:
        return 0.0
    steps = np.diff(p, axis=0) * np.asarray(spacing, dtype=float)
    return float(np.sqrt((steps ** 2).sum(axis=1)).sum())


def build_graph(skel: Skeleton) -> CenterlineGraph:
    """Convert a pruned skeleton into nodes and edge paths.

    Touching junction voxels collapse into one node whose position is the
    member voxel nearest their centroid.  Closed loops with no junction get
    an "anchor" node at their smallest voxel so the cycle is representable.
    Isolated voxels (degree 0) are dropped; run prune() first if they matter.
    """
    adj = _adjacency(skel.voxels)
    deg = {v: len(n) for v, n in adj.items()}
    endpoints = sorted(v for v, d in deg.items() if d == 1)
    junction_voxels = {v for v, d in deg.items() if d >= 3}

    # merge touching junction voxels into clusters
    clusters: list[list[Voxel]] = []
    unassigned = set(junction_voxels)
    while unassigned:
        seed = min(unassigned)
        stack, members = [seed], {seed}
        unassigned.discard(seed)
        while stack:
            v = stack.pop()
            for nb in adj[v]:
                if nb in unassigned:
                    unassigned.discard(nb)
                    members.add(nb)
                    stack.append(nb)
        clusters.append(sorted(members))

    def representative(members: list[Voxel]) -> Voxel:
        centroid = np.mean(np.asarray(members, dtype=float), axis=0)
        dist2 = [float(((np.asarray(m) - centroid) ** 2).sum()) for m in members]
        return min(zip(dist2, members))[1]

    nodes: list[GraphNode] = []
    node_of: dict[Voxel, int] = {}
    for members in sorted(clusters):
        nid = len(nodes)
        nodes.append(GraphNode(nid, representative(members), "junction"))
        for m in members:
            node_of[m] = nid
    for e in endpoints:
        nid = len(nodes)
        nodes.append(GraphNode(nid, e, "endpoint"))
        node_of[e] = nid

    node_voxels = set(node_of)
    edges: list[GraphEdge] = []
    inner_done: set[Voxel] = set()
    direct_done: set[tuple[Voxel, Voxel]] = set()
    direct_pairs: set[tuple[int, int]] = set()

    def add_edge(n1: int, n2: int, path: list[Voxel], is_cycle: bool = False):
        arr = np.asarray(path, dtype=int)
        edges.append(
            GraphEdge(len(edges), n1, n2, arr, path_length_um(arr, skel.spacing), is_cycle)
        )

    for v in sorted(node_voxels):
        for nb in sorted(adj[v]):
            if nb in node_voxels:
                na, nb_id = node_of[v], node_of[nb]
                if na == nb_id:
                    continue  # internal cluster contact
                vkey = (min(v, nb), max(v, nb))
                if vkey in direct_done:
                    continue
                direct_done.add(vkey)
                nkey = (min(na, nb_id), max(na, nb_id))
                if nkey in direct_pairs:
                    continue  # collapse duplicate zero-interior contacts
                direct_pairs.add(nkey)
                add_edge(na, nb_id, [v, nb])
            elif nb not in inner_done:
                path = _trace_chain(adj, v, nb, node_voxels)
                if path[-1] not in node_voxels:
                    continue  # defensive: dangling walk
                inner_done.update(path[1:-1])
                add_edge(node_of[v], node_of[path[-1]], path)

    # isolated cycles: every voxel degree 2, no node voxel anywhere
    remaining = sorted(
        v for v, d in deg.items()
        if d == 2 and v not in node_voxels and v not in inner_done
    )
    leftover = set(remaining)
    while leftover:
        a = min(leftover)
        nid = len(nodes)
        nodes.append(GraphNode(nid, a, "anchor"))
        path = [a]
        prev, cur = a, sorted(adj[a])[0]
        while cur != a:
            path.append(cur)
            nxts = adj[cur] - {prev}
            prev, cur = cur, nxts.pop()
        path.append(a)
        leftover.difference_update(path)
        add_edge(nid, nid, path, is_cycle=True)

    return CenterlineGraph(nodes, edges, skel.dims, skel.spacing)


def extract(seg: BinaryVolume, refine: bool = True, do_prune: bool = True) -> tuple[Skeleton, CenterlineGraph]:
    """Full centerline pass: thin, optionally refine and prune, build graph."""
    skel = thin3d(seg)
    if refine:
        skel = refine_centerline(seg, skel)
    if do_prune:
        skel = prune(skel)
    return skel, build_graph(skel)
