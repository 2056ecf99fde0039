"""2D/3D geometric plumbing: fixed-point snapping, STL loading, mesh slicing,
polygon offsetting and polyline clipping.

Coordinates are carried as float millimetres but every value produced here is
snapped to the fixed-point grid of ``RESOLUTION`` units per mm, so results are
reproducible bit for bit.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from shapely import geometry as sg

logger = logging.getLogger(__name__)

RESOLUTION = 1000  # fixed-point units per mm
UNIT = 1.0 / RESOLUTION
MAX_EXTENT_MM = 1000.0  # models up to 1 m
STITCH_TOLERANCE = 0.02  # mm

Point2 = tuple[float, float]
Point3 = tuple[float, float, float]
Polygon = np.ndarray  # (n, 2) closed loop without repeated end vertex
PolygonSet = list[np.ndarray]


class GeometryError(ValueError):
    pass


class OpenContourError(GeometryError):
    def __init__(self, layer_index: int, gap: float):
        super().__init__(f"open contour on layer {layer_index}: gap of {gap:.4f} mm exceeds stitching tolerance")
        self.layer_index = layer_index
        self.gap = gap


def to_fixed(value):
    """Convert mm to integer fixed-point units (array or scalar)."""
    if np.isscalar(value):
        return int(round(float(value) * RESOLUTION))
    return np.rint(np.asarray(value, dtype=float) * RESOLUTION).astype(np.int64)


def snap(value):
    """Round mm values onto the fixed-point grid."""
    return np.rint(np.asarray(value, dtype=float) * RESOLUTION) / RESOLUTION


def signed_area(loop: np.ndarray) -> float:
    x, y = loop[:, 0], loop[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def loop_length(points: np.ndarray, closed: bool = True) -> float:
    pts = np.asarray(points, dtype=float)
    if len(pts) < 2:
        return 0.0
    d = np.diff(np.vstack([pts, pts[:1]]) if closed else pts, axis=0)
    return float(np.hypot(d[:, 0], d[:, 1]).sum())


def point_in_polygon(pt, loop: np.ndarray) -> bool:
    """Even-odd ray casting test for a single loop."""
    x, y = pt
    xs, ys = loop[:, 0], loop[:, 1]
    xn, yn = np.roll(xs, -1), np.roll(ys, -1)
    cond = (ys > y) != (yn > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        xcross = xs + (y - ys) * (xn - xs) / (yn - ys)
    return bool(np.count_nonzero(cond & (x < xcross)) % 2)


def point_in_set(pt, polys: PolygonSet) -> bool:
    return sum(point_in_polygon(pt, p) for p in polys) % 2 == 1


def orient_polygon_set(loops: Iterable[np.ndarray]) -> PolygonSet:
    """Orient loops by nesting depth: even depth counterclockwise, odd clockwise."""
    loops = [np.asarray(l, dtype=float) for l in loops if len(l) >= 3]
    loops = [l for l in loops if abs(signed_area(l)) > UNIT * UNIT]
    out = []
    for i, loop in enumerate(loops):
        probe = _interior_probe(loop)
        depth = sum(point_in_polygon(probe, other) for j, other in enumerate(loops) if j != i)
        ccw = signed_area(loop) > 0
        if ccw != (depth % 2 == 0):
            loop = loop[::-1].copy()
        out.append(loop)
    return out


def _interior_probe(loop: np.ndarray) -> Point2:
    # a vertex nudged toward the centroid of its two edges stays inside the loop's own region
    a, b, c = loop[-1], loop[0], loop[1]
    mid = (a + c) / 2.0
    return tuple(b + (mid - b) * 1e-3)


# ---------------------------------------------------------------- meshes


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (n, 3)
    triangles: np.ndarray  # (m, 3) int

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise GeometryError("triangle index out of range")

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def cleaned(self) -> "TriangleMesh":
        """Merge coincident vertices on the fixed grid and drop zero-area triangles."""
        keys = to_fixed(self.vertices)
        uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
        tris = inverse.reshape(-1)[self.triangles]
        v = uniq / RESOLUTION
        p0, p1, p2 = v[tris[:, 0]], v[tris[:, 1]], v[tris[:, 2]]
        area = np.linalg.norm(np.cross(p1 - p0, p2 - p0), axis=1)
        return TriangleMesh(v, tris[area > 1e-12])


def box_mesh(size, origin=(0.0, 0.0, 0.0)) -> TriangleMesh:
    sx, sy, sz = np.broadcast_to(np.asarray(size, dtype=float), (3,))
    ox, oy, oz = origin
    v = np.array(
        [[x, y, z] for z in (0, sz) for y in (0, sy) for x in (0, sx)], dtype=float
    ) + [ox, oy, oz]
    t = [
        (0, 2, 1), (1, 2, 3), (4, 5, 6), (5, 7, 6),
        (0, 1, 4), (1, 5, 4), (2, 6, 3), (3, 6, 7),
        (0, 4, 2), (2, 4, 6), (1, 3, 5), (3, 7, 5),
    ]
    return TriangleMesh(v, np.array(t))


def load_stl(path) -> TriangleMesh:
    """Read a binary or ASCII STL file."""
    data = Path(path).read_bytes()
    if len(data) >= 84:
        (count,) = struct.unpack_from("<I", data, 80)
        if 84 + count * 50 == len(data):
            rec = np.frombuffer(data, dtype=np.dtype([("n", "<f4", 3), ("v", "<f4", (3, 3)), ("a", "<u2")]),
                                count=count, offset=84)
            verts = rec["v"].reshape(-1, 3).astype(float)
            return TriangleMesh(verts, np.arange(len(verts)).reshape(-1, 3)).cleaned()
    text = data.decode("ascii", errors="replace")
    verts = [
        [float(t) for t in line.split()[1:4]]
        for line in text.splitlines()
        if line.strip().startswith("vertex")
    ]
    if not verts or len(verts) % 3:
        raise GeometryError(f"{path}: not a valid STL file")
    verts = np.array(verts)
    return TriangleMesh(verts, np.arange(len(verts)).reshape(-1, 3)).cleaned()


def save_stl(mesh: TriangleMesh, path) -> None:
    tris = mesh.vertices[mesh.triangles].astype("<f4")
    with open(path, "wb") as fh:
        fh.write(b"\0" * 80)
        fh.write(struct.pack("<I", len(tris)))
        for t in tris:
            n = np.cross(t[1] - t[0], t[2] - t[0])
            fh.write(struct.pack("<3f", *n) + t.tobytes() + b"\0\0")


def _section_segments(mesh: TriangleMesh, z: float) -> list[tuple[np.ndarray, np.ndarray]]:
    v = mesh.vertices[mesh.triangles]  # (m, 3, 3)
    dz = v[:, :, 2] - z
    above = dz > 0
    n_above = above.sum(axis=1)
    segs = []
    for tri, d, ab, na in zip(v, dz, above, n_above):
        if na == 0 or na == 3:
            continue
        pts = []
        for i in range(3):
            j = (i + 1) % 3
            if ab[i] != ab[j]:
                t = d[i] / (d[i] - d[j])
                pts.append(tri[i, :2] + t * (tri[j, :2] - tri[i, :2]))
        # orient so the solid lies to the left: edge goes from the "entering" to "leaving" crossing
        normal = np.cross(tri[1] - tri[0], tri[2] - tri[0])
        a, b = pts
        direction = b - a
        if direction[0] * normal[1] - direction[1] * normal[0] > 0:
            a, b = b, a
        segs.append((a, b))
    return segs


def _stitch(segs, layer_index: int, tol: float) -> PolygonSet:
    if not segs:
        return []
    starts = {}
    for idx, (a, b) in enumerate(segs):
        starts.setdefault(tuple(to_fixed(a)), []).append(idx)
    used = [False] * len(segs)
    loops = []
    for first in range(len(segs)):
        if used[first]:
            continue
        used[first] = True
        loop = [segs[first][0]]
        cur = segs[first][1]
        head = tuple(to_fixed(segs[first][0]))
        while True:
            key = tuple(to_fixed(cur))
            if key == head:
                break
            nxt = next((i for i in starts.get(key, ()) if not used[i]), None)
            if nxt is None:
                # gap stitching: nearest unused start or the loop head
                cand = [(float(np.hypot(*(segs[i][0] - cur))), i) for i in range(len(segs)) if not used[i]]
                gap_head = float(np.hypot(*(loop[0] - cur)))
                best = min(cand) if cand else (math.inf, None)
                if gap_head <= best[0]:
                    if gap_head > tol:
                        raise OpenContourError(layer_index, gap_head)
                    break
                if best[0] > tol:
                    raise OpenContourError(layer_index, best[0])
                nxt = best[1]
            used[nxt] = True
            loop.append(cur)
            cur = segs[nxt][1]
        loops.append(snap(np.array(loop)))
    return orient_polygon_set(_drop_collinear(l) for l in loops)


def _drop_collinear(loop: np.ndarray) -> np.ndarray:
    keep = []
    n = len(loop)
    for i in range(n):
        a, b, c = loop[i - 1], loop[i], loop[(i + 1) % n]
        if np.allclose(a, b):
            continue
        cross = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0])
        if abs(cross) > 1e-12:
            keep.append(b)
    return np.array(keep) if keep else loop[:0]


def slice_mesh(mesh: TriangleMesh, layer_height: float, first_layer_z: float,
               n_layers: int | None = None, tolerance: float = STITCH_TOLERANCE) -> list[tuple[float, PolygonSet]]:
    """Slice ``mesh`` with horizontal planes at ``first_layer_z + i*layer_height``.

    Planes that hit a vertex exactly are nudged up by one fixed-point unit.
    """
    lo, hi = mesh.bounds
    if n_layers is None:
        n_layers = int(math.floor((hi[2] - first_layer_z) / layer_height + 1e-9)) + 1
    vz = set(to_fixed(mesh.vertices[:, 2]).tolist())
    out = []
    for i in range(n_layers):
        z = first_layer_z + i * layer_height
        zs = z
        if to_fixed(zs) in vz:
            zs = zs + UNIT
        if zs >= hi[2]:
            continue
        out.append((float(snap(z)), _stitch(_section_segments(mesh, zs), i, tolerance)))
    return out


def load_layer_json(path) -> list[tuple[float, PolygonSet]]:
    """Read ``[{"z": .., "loops": [[[x, y], ...], ...]}, ...]``."""
    doc = json.loads(Path(path).read_text())
    return [(float(e["z"]), orient_polygon_set(snap(np.array(l, dtype=float)) for l in e["loops"])) for e in doc]


# ---------------------------------------------------------------- polygons


def to_shapely(polys: PolygonSet):
    """Build a shapely region from loops using even-odd nesting."""
    geom = sg.Polygon()
    for loop in sorted((np.asarray(l, dtype=float) for l in polys if len(l) >= 3), key=lambda l: -abs(signed_area(l))):
        geom = geom.symmetric_difference(sg.Polygon(loop).buffer(0))
    return geom


def from_shapely(geom) -> PolygonSet:
    out = []
    if geom.is_empty:
        return out
    parts = getattr(geom, "geoms", [geom])
    for part in parts:
        if part.geom_type != "Polygon":
            out.extend(from_shapely(part) if hasattr(part, "geoms") else [])
            continue
        for ring in [part.exterior, *part.interiors]:
            pts = snap(np.asarray(ring.coords)[:-1])
            if len(pts) >= 3:
                out.append(pts)
    return orient_polygon_set(out)


def offset_polygons(polys: PolygonSet, delta: float) -> PolygonSet:
    """Offset outward (delta > 0) or inward (delta < 0) with mitred corners."""
    if not polys:
        return []
    geom = to_shapely(polys)
    res = geom.buffer(delta, join_style="mitre", mitre_limit=2.0 ** 0.5 * 4)
    return [l for l in from_shapely(res) if abs(signed_area(l)) > (2 * UNIT) ** 2]


def clip_polyline_to_area(curve: np.ndarray, area: PolygonSet) -> list[tuple[np.ndarray, bool]]:
    """Pieces of the closed ``curve`` lying inside ``area``.

    Returns ``(points, closed)`` tuples in curve order. A curve entirely inside
    comes back as a single closed piece identical to the input.
    """
    curve = np.asarray(curve, dtype=float)
    if not area or len(curve) < 2:
        return []
    region = to_shapely(area)
    prepared = region.buffer(0)
    if prepared.covers(sg.LinearRing(curve)):
        return [(curve.copy(), True)]
    # start the traversal at a vertex outside so pieces are not split at the seam
    outside = [i for i, p in enumerate(curve) if not prepared.covers(sg.Point(p))]
    if not outside:
        mids = (curve + np.roll(curve, -1, axis=0)) / 2
        i = next(i for i, m in enumerate(mids) if not prepared.covers(sg.Point(m)))
        curve = np.insert(curve, i + 1, mids[i], axis=0)
        outside = [i + 1]
    k = outside[0]
    rolled = np.vstack([curve[k:], curve[:k], curve[k:k + 1]])
    inter = sg.LineString(rolled).intersection(prepared)
    pieces = []
    for g in getattr(inter, "geoms", [inter]):
        if g.is_empty or g.geom_type != "LineString" or g.length <= UNIT:
            continue
        pieces.append(np.asarray(g.coords))
    # order along the curve
    line = sg.LineString(rolled)
    pieces.sort(key=lambda p: line.project(sg.Point(p[0])))
    return [(p, False) for p in pieces]


def segment_distance(p1, p2, q1, q2) -> float:
    """Minimum distance between segments p1p2 and q1q2."""
    p1, p2, q1, q2 = (np.asarray(a, dtype=float) for a in (p1, p2, q1, q2))
    if _segments_intersect(p1, p2, q1, q2):
        return 0.0
    return min(
        point_segment_distance(p1, q1, q2),
        point_segment_distance(p2, q1, q2),
        point_segment_distance(q1, p1, p2),
        point_segment_distance(q2, p1, p2),
    )


def point_segment_distance(p, a, b) -> float:
    p, a, b = (np.asarray(x, dtype=float) for x in (p, a, b))
    ab = b - a
    denom = float(ab @ ab)
    t = 0.0 if denom == 0 else min(1.0, max(0.0, float((p - a) @ ab) / denom))
    d = p - (a + t * ab)
    return float(math.hypot(d[0], d[1]))


def _cross(o, a, b) -> float:
    return float((a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]))


def _segments_intersect(p1, p2, q1, q2) -> bool:
    d1, d2 = _cross(q1, q2, p1), _cross(q1, q2, p2)
    d3, d4 = _cross(p1, p2, q1), _cross(p1, p2, q2)
    return ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0)) and d1 * d2 < 0 and d3 * d4 < 0


def is_simple_loop(points: np.ndarray, tol: float = 0.0) -> bool:
    """True when no two non-adjacent edges of the closed loop touch (within ``tol``)."""
    pts = np.asarray(points, dtype=float)
    n = len(pts)
    if n < 3:
        return False
    line = sg.LinearRing(pts)
    if tol <= 0:
        return line.is_simple
    return min_nonadjacent_distance(pts, closed=True) > tol


def min_nonadjacent_distance(points: np.ndarray, closed: bool = True) -> float:
    """Smallest distance between two non-consecutive segments of a polyline.

    Vectorised over all segment pairs in chunks; suitable for a few thousand
    segments.
    """
    pts = np.asarray(points, dtype=float)
    a = pts
    b = np.roll(pts, -1, axis=0) if closed else pts[1:]
    if not closed:
        a = pts[:-1]
    n = len(a)
    if n < 3:
        return math.inf
    best = math.inf
    idx = np.arange(n)
    for i in range(n):
        j = idx[i + 2:] if not closed else idx[i + 2:]
        if closed and i == 0:
            j = j[:-1]
        if len(j) == 0:
            continue
        d = _seg_seg_dist_vec(a[i], b[i], a[j], b[j])
        best = min(best, float(d.min()))
    return best


def _seg_seg_dist_vec(p1, p2, q1, q2) -> np.ndarray:
    """Distances between segment p1p2 and each segment q1[k]q2[k]."""

    def pt_seg(p, a, b):
        ab = b - a
        denom = np.einsum("ij,ij->i", ab, ab)
        with np.errstate(invalid="ignore", divide="ignore"):
            t = np.where(denom > 0, np.einsum("ij,ij->i", p - a, ab) / np.where(denom > 0, denom, 1), 0.0)
        t = np.clip(t, 0, 1)
        d = p - (a + t[:, None] * ab)
        return np.hypot(d[:, 0], d[:, 1])

    m = len(q1)
    P1 = np.broadcast_to(p1, (m, 2))
    P2 = np.broadcast_to(p2, (m, 2))
    d = np.minimum.reduce([pt_seg(P1, q1, q2), pt_seg(P2, q1, q2), pt_seg(q1, P1, P2), pt_seg(q2, P1, P2)])

    def cross(o, a, b):
        return (a[:, 0] - o[:, 0]) * (b[:, 1] - o[:, 1]) - (a[:, 1] - o[:, 1]) * (b[:, 0] - o[:, 0])

    d1, d2 = cross(q1, q2, P1), cross(q1, q2, P2)
    d3, d4 = cross(P1, P2, q1), cross(P1, P2, q2)
    hit = (d1 * d2 < 0) & (d3 * d4 < 0)
    d[hit] = 0.0
    return d


def polygon_set_area(polys: Sequence[np.ndarray]) -> float:
    return sum(signed_area(p) for p in polys)
