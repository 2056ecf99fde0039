"""Cross-sections of the space-filling surface: one closed curve per layer."""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, replace

import numpy as np

from .forest import Forest, PrismCell
from .surface import Interface, Surface

SQRT2 = math.sqrt(2.0)


class TraversalError(RuntimeError):
    """Following right links did not return to the start cell."""


@dataclass
class LayerCurve:
    """Closed loop of a layer; segment ``k`` runs from ``points[k]`` to ``points[k+1]``.

    ``cells[k]`` is the leaf containing segment ``k``.  ``faces[k]`` is the face
    segment (two points, mm) that vertex ``k`` lies on, or ``None`` for vertices
    added by detouring.
    """

    z: float
    points: np.ndarray
    cells: list[int]
    faces: list
    w: float
    detours: int = 0
    clamped: int = 0

    def __len__(self) -> int:
        return len(self.points)

    @property
    def length(self) -> float:
        d = np.diff(np.vstack([self.points, self.points[:1]]), axis=0)
        return float(np.hypot(d[:, 0], d[:, 1]).sum())

    def segments(self) -> tuple[np.ndarray, np.ndarray]:
        return self.points, np.roll(self.points, -1, axis=0)


# ---------------------------------------------------------------- tracing


def _top(forest: Forest) -> int:
    return max(forest[r].z1 for r in forest.roots)


def _lattice_z(forest: Forest, z_mm: float) -> float:
    z = z_mm / forest.unit
    return min(max(z, 0.0), _top(forest) - 1.0)


def _leaf_covering(forest: Forest, z: float) -> PrismCell:
    cell = forest[forest.roots[0]]
    while cell.children:
        cell = next(forest[c] for c in cell.children if forest[c].z0 <= z < forest[c].z1)
    return cell


def _walk(surface: Surface, z: float) -> tuple[list[int], list[Interface]]:
    """Cells met along the right links at lattice height z and the interfaces crossed."""
    forest = surface.forest
    start = _leaf_covering(forest, z).id
    cells, crossed = [], []
    cur = start
    limit = len(forest.cells) + 1
    while True:
        it = _exit(surface, cur, z)
        crossed.append(it)
        cur = it.right_cell
        cells.append(cur)
        if cur == start:
            break
        if len(cells) > limit:
            raise TraversalError(f"right links at z={z * forest.unit:.4f} mm never return to cell {start}")
    return cells, crossed


def _exit(surface: Surface, cid: int, z: float) -> Interface:
    for it in surface.right_of[cid]:
        if it.z0 <= z < it.z1:
            return it
    raise TraversalError(f"cell {cid} has no right link at z={z}")


def _seg_mm(it: Interface, unit: float):
    (ax, ay), (bx, by) = it.seg
    return ((ax * unit, ay * unit), (bx * unit, by * unit))


def _assemble(forest: Forest, z_mm: float, pts: np.ndarray, cells: list[int],
              faces: list, w: float, start_hint) -> LayerCurve:
    # crossed[k] leads into cells[k], so segment k (vertex k -> k+1) lies in cells[k]
    n = len(cells)
    seg_cells = cells
    if start_hint is not None and n:
        d = np.hypot(pts[:, 0] - start_hint[0], pts[:, 1] - start_hint[1])
        k = int(np.argmin(d))
        pts = np.roll(pts, -k, axis=0)
        seg_cells = seg_cells[k:] + seg_cells[:k]
        faces = faces[k:] + faces[:k]
    return LayerCurve(z_mm, pts, seg_cells, faces, w)


def trace_layer(surface: Surface, z_mm: float, start_hint=None, w: float | None = None) -> LayerCurve:
    """Slice the surface at height ``z_mm`` (forest coordinates).

    The loop starts at the vertex nearest ``start_hint``; a height on a cell
    boundary belongs to the cells above it.
    """
    forest = surface.forest
    z = _lattice_z(forest, z_mm)
    cells, crossed = _walk(surface, z)
    unit = forest.unit
    pts = np.array([it.point_at(z) for it in crossed], dtype=float) * unit
    faces = [_seg_mm(it, unit) for it in crossed]
    return _assemble(forest, z_mm, pts, list(cells), faces, w if w is not None else forest.w, start_hint)


def trace_layers(surface: Surface, zs_mm, start_hint=(0.0, 0.0), w: float | None = None) -> list[LayerCurve]:
    """Slice many heights; the start of each layer is the vertex nearest the previous end.

    Heights between the same pair of consecutive breakpoints (cell boundaries
    and interface knots) share a cell sequence and interpolate linearly, so each
    such band is walked only once.
    """
    forest = surface.forest
    unit = forest.unit
    w = w if w is not None else forest.w
    knots = {0, _top(forest)}
    for it in surface.interfaces.values():
        if it.start_target is None and it.end_target is None:
            knots.add(it.z0)
            knots.add(it.z1)
        else:
            knots.update(it.knots()[0])
    breaks = sorted(float(z) for z in knots)
    cache: dict[int, tuple] = {}
    out = []
    hint = start_hint
    for z_mm in zs_mm:
        z = _lattice_z(forest, z_mm)
        band = bisect.bisect_right(breaks, z) - 1
        if band not in cache:
            za, zb = breaks[band], breaks[band + 1]
            cells, crossed = _walk(surface, za)
            lo = np.array([it.point_at(za) for it in crossed], dtype=float)
            hi = np.array([it.point_at(zb) for it in crossed], dtype=float)
            faces = [_seg_mm(it, unit) for it in crossed]
            cache = {band: (za, zb, cells, faces, lo, hi)}
        za, zb, cells, faces, lo, hi = cache[band]
        t = (z - za) / (zb - za)
        pts = (lo + t * (hi - lo)) * unit
        curve = _assemble(forest, z_mm, pts, list(cells), list(faces), w, hint)
        hint = tuple(curve.points[-1]) if len(curve.points) else hint
        out.append(curve)
    return out


def leaves_at(forest: Forest, z_mm: float) -> set[int]:
    """All leaves whose z-range contains the height (independent of links)."""
    z = _lattice_z(forest, z_mm)
    return {c.id for c in forest.leaves() if c.z0 <= z < c.z1}


# ---------------------------------------------------------------- overlap prevention


def _point_triangle_distance(p, tri) -> float:
    (ax, ay), (bx, by), (cx, cy) = tri
    x, y = p
    d1 = (bx - ax) * (y - ay) - (by - ay) * (x - ax)
    d2 = (cx - bx) * (y - by) - (cy - by) * (x - bx)
    d3 = (ax - cx) * (y - cy) - (ay - cy) * (x - cx)
    if (d1 >= 0 and d2 >= 0 and d3 >= 0) or (d1 <= 0 and d2 <= 0 and d3 <= 0):
        return 0.0
    return min(_pt_seg(p, tri[0], tri[1]), _pt_seg(p, tri[1], tri[2]), _pt_seg(p, tri[2], tri[0]))


def _pt_seg(p, a, b) -> float:
    dx, dy = b[0] - a[0], b[1] - a[1]
    L = dx * dx + dy * dy
    t = 0.0 if L == 0 else max(0.0, min(1.0, ((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / L))
    return math.hypot(p[0] - a[0] - t * dx, p[1] - a[1] - t * dy)


class _CornerIndex:
    """Leaves of a layer indexed by the corners and edge midpoints of their triangles."""

    def __init__(self, forest: Forest, cells):
        self.by_point: dict[tuple, list[int]] = {}
        self.tris = {}
        for cid in set(cells):
            tri = forest[cid].tri
            self.tris[cid] = [forest.point_mm(p) for p in tri]
            keys = list(tri) + [((tri[i][0] + tri[(i + 1) % 3][0]) // 2, (tri[i][1] + tri[(i + 1) % 3][1]) // 2)
                                for i in range(3)]
            for k in keys:
                self.by_point.setdefault(k, []).append(cid)


def clamp_endpoints(curve: LayerCurve, forest: Forest, w: float | None = None) -> LayerCurve:
    """Keep every vertex at least w/2 from the other prisms meeting the ends of its face."""
    w = curve.w if w is None else w
    index = _CornerIndex(forest, curve.cells)
    unit = forest.unit
    pts = curve.points.copy()
    n = len(pts)
    moved = 0
    for k in range(n):
        face = curve.faces[k]
        if face is None:
            continue
        own = {curve.cells[k - 1], curve.cells[k]}
        (ax, ay), (bx, by) = face
        length = math.hypot(bx - ax, by - ay)
        if length == 0:
            continue
        lo, hi = 0.0, length
        for (ex, ey), sign in (((ax, ay), 1.0), ((bx, by), -1.0)):
            key = (round(ex / unit), round(ey / unit))
            others = [c for c in index.by_point.get(key, ()) if c not in own]
            if not others:
                continue
            dx, dy = sign * (bx - ax) / length, sign * (by - ay) / length
            eps = 1e-3 * length
            probe = (ex + eps * dx, ey + eps * dy)
            s = min(_point_triangle_distance(probe, index.tris[c]) for c in others) / eps
            if s <= 1e-9:
                continue
            need = min(0.5 * w / s, 0.5 * length)
            if sign > 0:
                lo = max(lo, need)
            else:
                hi = min(hi, length - need)
        t = (pts[k, 0] - ax) * (bx - ax) / length + (pts[k, 1] - ay) * (by - ay) / length
        if lo > hi:
            lo = hi = 0.5 * length
        if t < lo - 1e-9 or t > hi + 1e-9:
            t = min(max(t, lo), hi)
            pts[k] = (ax + t * (bx - ax) / length, ay + t * (by - ay) / length)
            moved += 1
    return replace(curve, points=pts, clamped=curve.clamped + moved)


def _angle_to_face(seg_dir, face_dir) -> float:
    c = abs(seg_dir[0] * face_dir[0] + seg_dir[1] * face_dir[1])
    return math.degrees(math.acos(min(1.0, c)))


def detour_sharp_turns(curve: LayerCurve, forest: Forest | None = None, w: float | None = None,
                       threshold_deg: float = 45.0) -> LayerCurve:
    """Insert a 45-degree detour vertex where a segment meets its face at less than 45 degrees."""
    w = curve.w if w is None else w
    pts = curve.points
    n = len(pts)
    if n < 3:
        return curve
    new_pts, new_cells, new_faces = [], [], []
    added = 0
    for k in range(n):
        v = pts[k]
        face = curve.faces[k]
        before, after = [], []
        if face is not None:
            (ax, ay), (bx, by) = face
            fl = math.hypot(bx - ax, by - ay)
            fdir = ((bx - ax) / fl, (by - ay) / fl)
            for other, into in ((pts[k - 1], before), (pts[(k + 1) % n], after)):
                d = other - v
                dl = math.hypot(*d)
                if dl <= 1e-12:
                    continue
                sdir = (d[0] / dl, d[1] / dl)
                if _angle_to_face(sdir, fdir) < threshold_deg - 1e-9:
                    along = 1.0 if sdir[0] * fdir[0] + sdir[1] * fdir[1] >= 0 else -1.0
                    e = (along * fdir[0], along * fdir[1])
                    nrm = (-fdir[1], fdir[0])
                    if sdir[0] * nrm[0] + sdir[1] * nrm[1] < 0:
                        nrm = (-nrm[0], -nrm[1])
                    r = w * SQRT2 / 2
                    c45 = SQRT2 / 2
                    p = (v[0] + r * c45 * (e[0] + nrm[0]), v[1] + r * c45 * (e[1] + nrm[1]))
                    into.append(p)
        # incoming detour vertex precedes v and lies in the previous segment's cell
        if before:
            new_pts.append(before[0])
            new_cells.append(curve.cells[k - 1])
            new_faces.append(None)
            added += 1
        new_pts.append(tuple(v))
        new_cells.append(curve.cells[k])
        new_faces.append(face)
        if after:
            new_pts.append(after[0])
            new_cells.append(curve.cells[k])
            new_faces.append(None)
            added += 1
    if not added:
        return curve
    return replace(curve, points=np.array(new_pts, dtype=float), cells=new_cells, faces=new_faces,
                   detours=curve.detours + added)


def prevent_overlap(curve: LayerCurve, forest: Forest, w: float | None = None) -> LayerCurve:
    return detour_sharp_turns(clamp_endpoints(curve, forest, w), forest, w)


# ---------------------------------------------------------------- checks


def turning_angles_deg(points: np.ndarray) -> np.ndarray:
    """Absolute turning angle at every vertex of a closed loop."""
    d_in = points - np.roll(points, 1, axis=0)
    d_out = np.roll(points, -1, axis=0) - points
    a_in = np.arctan2(d_in[:, 1], d_in[:, 0])
    a_out = np.arctan2(d_out[:, 1], d_out[:, 0])
    turn = (a_out - a_in + np.pi) % (2 * np.pi) - np.pi
    return np.degrees(np.abs(turn))


def piece_indices(curve: LayerCurve) -> np.ndarray:
    """Index of the cell crossing each segment belongs to (detour pieces share it)."""
    cells = curve.cells
    idx = np.zeros(len(cells), dtype=int)
    k = 0
    for i in range(1, len(cells)):
        if cells[i] != cells[i - 1]:
            k += 1
        idx[i] = k
    if len(cells) > 1 and cells[-1] == cells[0]:
        idx[idx == k] = 0
    return idx


def clearance(curve: LayerCurve) -> tuple[float, tuple[int, int]]:
    """Smallest distance between segments lying in cells that are not neighbours on the loop.

    Returns the distance and the two segment indices realizing it.
    """
    from .geometry import _seg_seg_dist_vec

    pts = curve.points
    n = len(pts)
    if n < 4:
        return math.inf, (-1, -1)
    a, b = pts, np.roll(pts, -1, axis=0)
    piece = piece_indices(curve)
    m = piece.max() + 1
    best, where = math.inf, (-1, -1)
    for i in range(n):
        gap = np.abs(piece - piece[i])
        gap = np.minimum(gap, m - gap)
        j = np.nonzero(gap >= 2)[0]
        j = j[j > i]
        if len(j) == 0:
            continue
        d = _seg_seg_dist_vec(a[i], b[i], a[j], b[j])
        k = int(np.argmin(d))
        if d[k] < best:
            best, where = float(d[k]), (i, int(j[k]))
    return best, where
