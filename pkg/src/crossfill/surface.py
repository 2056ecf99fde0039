"""Surface patch edges and the continuity repair between cells of different level.

The surface is never built.  What slicing needs is, for every right link
``a -> b`` between leaves, the point where the surface crosses the face the two
cells share, as a function of z.  That function is an :class:`Interface`: a
piecewise-linear parameter ``u(z)`` along a face segment, running from the left
end (0) to the right end (1) as seen along the traversal direction.

Because one interface serves both cells, consecutive cells of a layer always
meet.  The remaining work is vertical: where the cells stacked above and below a
z-boundary differ in level, the crossing curves on a face must still join up.

1. Every interface starts as the sweep of the finer of its two cells, so the
   coarse cell takes over the edge of its finer neighbour (its patch becomes a
   ruled surface).
2. Interfaces meeting at a z-boundary on the same face line are made to agree
   by flipping part of the one on the longer segment.
3. An interface end with no partner on the other side (a face inside a coarser
   cell) is flipped onto that cell's horizontal edge.
"""

from __future__ import annotations

import bisect
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from operator import attrgetter

import numpy as np

from .forest import Forest, PrismCell, face_span, faces_overlap, paused_gc

logger = logging.getLogger(__name__)

STEP_TOLERANCE_UNITS = 2  # fixed-point units (1 um) accepted as a residual gap


class ContinuityError(RuntimeError):
    pass


@dataclass(slots=True)
class Interface:
    """Crossing curve on the face shared by ``left_cell`` -> ``right_cell``."""

    left_cell: int
    right_cell: int
    seg: tuple  # (left end, right end), lattice units
    z0: int
    z1: int
    u0: float  # value of the unflipped sweep at z0 (0 or 1)
    u1: float
    start_target: float | None = None  # flipped value at z0
    end_target: float | None = None  # flipped value at z1
    notes: list = field(default_factory=list)
    _knots: tuple | None = field(default=None, repr=False, compare=False)

    @property
    def slope(self) -> float:
        return (self.u1 - self.u0) / (self.z1 - self.z0)

    @property
    def length2(self) -> int:
        (ax, ay), (bx, by) = self.seg
        return (bx - ax) ** 2 + (by - ay) ** 2

    def knots(self) -> tuple[list[float], list[float]]:
        if self._knots is None:
            self._knots = self._compute_knots()
        return self._knots

    def _compute_knots(self) -> tuple[list[float], list[float]]:
        zs, us = [float(self.z0)], [self.u0]
        s = self.slope
        if self.start_target is not None:
            dz = (self.start_target - self.u0) / (2 * s)
            us[0] = self.start_target
            if dz > 0:
                zs.append(self.z0 + dz)
                us.append(self.u0 + s * dz)
        if self.end_target is not None:
            dz = (self.u1 - self.end_target) / (2 * s)
            if dz > 0:
                zs.append(self.z1 - dz)
                us.append(self.u1 - s * dz)
            zs.append(float(self.z1))
            us.append(self.end_target)
        else:
            zs.append(float(self.z1))
            us.append(self.u1)
        return zs, us

    def u_at(self, z: float) -> float:
        if self.start_target is None and self.end_target is None:
            z0, z1 = self.z0, self.z1
            if z <= z0:
                return self.u0
            if z >= z1:
                return self.u1
            return self.u0 + (self.u1 - self.u0) * (z - z0) / (z1 - z0)
        zs, us = self.knots()
        if z <= zs[0]:
            return us[0]
        for k in range(1, len(zs)):
            if z <= zs[k]:
                za, zb = zs[k - 1], zs[k]
                return us[k - 1] + (us[k] - us[k - 1]) * (z - za) / (zb - za)
        return us[-1]

    def point_at(self, z: float) -> tuple[float, float]:
        u = self.u_at(z)
        (ax, ay), (bx, by) = self.seg
        return (ax + u * (bx - ax), ay + u * (by - ay))

    def u_of_point(self, pt) -> float:
        (ax, ay), (bx, by) = self.seg
        dx, dy = bx - ax, by - ay
        return ((pt[0] - ax) * dx + (pt[1] - ay) * dy) / (dx * dx + dy * dy)

    def flip_start(self, target_u: float) -> float:
        """Flip the lower part so the curve starts at ``target_u``; returns the clamping residual."""
        return self._flip(target_u, start=True)

    def flip_end(self, target_u: float) -> float:
        return self._flip(target_u, start=False)

    def _flip(self, target_u: float, start: bool) -> float:
        self._knots = None
        base = self.u0 if start else self.u1
        # the flipped piece mirrors the sweep, so it can reach any value the sweep covers
        lo, hi = sorted((self.u0, self.u1))
        t = min(max(target_u, lo), hi)
        if abs(t - base) < 1e-15:
            t = None
        if start:
            self.start_target = t
        else:
            self.end_target = t
        return abs(t - target_u) if t is not None else abs(base - target_u)


# ---------------------------------------------------------------- helpers


def _left_end_first(face, inside) -> tuple:
    """Order a face's ends as (left, right) seen when leaving the cell at ``inside``."""
    (ax, ay), (bx, by) = face
    mx, my = (ax + bx) / 2, (ay + by) / 2
    # outward normal
    nx, ny = by - ay, -(bx - ax)
    if (inside[0] / 3 - mx) * nx + (inside[1] / 3 - my) * ny > 0:
        nx, ny = -nx, -ny
    # a point p is on the left of travel direction n if cross(n, p - m) > 0
    if nx * (ay - my) - ny * (ax - mx) > 0:
        return (face[0], face[1])
    return (face[1], face[0])


def _seg_len2(seg) -> int:
    (ax, ay), (bx, by) = seg
    return (bx - ax) ** 2 + (by - ay) ** 2


def canonical_u(cell: PrismCell, z0: float, z1: float) -> tuple[float, float]:
    """Sweep values at the ends of a cell's z-range: C runs left to right, E right to left."""
    return (0.0, 1.0) if cell.kind.embedding == "C" else (1.0, 0.0)


# ---------------------------------------------------------------- patches


@dataclass
class PatchEdge:
    owner: int
    side: str  # "entry" or "exit"
    face: str  # "L", "R" or "H"
    points: list  # [(x, y, z), ...] mm, increasing z
    clamped_to_ruled: bool = False
    flipped: bool = False

    @property
    def endpoints(self):
        return self.points[0], self.points[-1]


@dataclass
class CellPatch:
    cell: int
    kind: str
    entry: list  # PatchEdge pieces bottom to top
    exit: list


def canonical_patch(forest: Forest, cell: PrismCell) -> CellPatch:
    """Unadjusted triangular patch of a cell: one straight edge per crossed face."""
    from .forest import ROUTE_FACES

    names = ROUTE_FACES[(cell.kind.route, cell.kind.direction)]
    z0, z1 = forest.z_range_mm(cell)
    u0, u1 = canonical_u(cell, cell.z0, cell.z1)
    edges = []
    for side, name, face in (("entry", names[0], cell.entry_face), ("exit", names[1], cell.exit_face)):
        left, right = _left_end_first(face, cell.centroid3)
        if side == "entry":
            # the left end seen when entering is the right end seen when leaving
            left, right = right, left
        pts = []
        for z, u in ((z0, u0), (z1, u1)):
            x = left[0] + u * (right[0] - left[0])
            y = left[1] + u * (right[1] - left[1])
            pts.append((x * forest.unit, y * forest.unit, z))
        edges.append(PatchEdge(cell.id, side, name, pts))
    return CellPatch(cell.id, cell.kind.name, [edges[0]], [edges[1]])


class Surface:
    """Interfaces of all right links after continuity enforcement."""

    def __init__(self, forest: Forest, interfaces: dict[tuple[int, int], Interface],
                 residuals: list[tuple[str, float]] | None = None):
        self.forest = forest
        self.interfaces = interfaces
        self.residuals = residuals or []
        self.right_of: dict[int, list[Interface]] = defaultdict(list)
        self.left_of: dict[int, list[Interface]] = defaultdict(list)
        for it in interfaces.values():
            self.right_of[it.left_cell].append(it)
            self.left_of[it.right_cell].append(it)
        by_z0 = attrgetter("z0")
        for d in (self.right_of, self.left_of):
            for lst in d.values():
                if len(lst) > 1:
                    lst.sort(key=by_z0)

    def exit_at(self, cell_id: int, z: float) -> Interface:
        return _covering(self.right_of[cell_id], z)

    def entry_at(self, cell_id: int, z: float) -> Interface:
        return _covering(self.left_of[cell_id], z)

    def patch(self, cell_id: int) -> CellPatch:
        cell = self.forest[cell_id]
        entry = [self._edge(cell, it, "entry") for it in self.left_of[cell_id]]
        exit_ = [self._edge(cell, it, "exit") for it in self.right_of[cell_id]]
        return CellPatch(cell_id, cell.kind.name, entry, exit_)

    def _edge(self, cell: PrismCell, it: Interface, side: str) -> PatchEdge:
        zs, us = it.knots()
        (ax, ay), (bx, by) = it.seg
        unit = self.forest.unit
        pts = [((ax + v * (bx - ax)) * unit, (ay + v * (by - ay)) * unit, z * unit) for z, v in zip(zs, us)]
        name = "?"
        for f in ("L", "R", "H"):
            if faces_overlap(cell.face(f), it.seg):
                name = f
        coarse = _seg_len2(cell.entry_face if side == "entry" else cell.exit_face) > it.length2 or \
            (it.z1 - it.z0) < (cell.z1 - cell.z0)
        return PatchEdge(cell.id, side, name, pts, clamped_to_ruled=coarse,
                         flipped=it.start_target is not None or it.end_target is not None)

    def to_obj(self) -> str:
        """Triangulated ruled patches (debugging aid only)."""
        lines, nv = [], 0
        unit = self.forest.unit
        for c in self.forest.leaves():
            zs = sorted({z for it in self.left_of[c.id] + self.right_of[c.id] for z in it.knots()[0]})
            ring = []
            for z in zs:
                e = _covering(self.left_of[c.id], z).point_at(z)
                x = _covering(self.right_of[c.id], z).point_at(z)
                ring.append((e, x, z))
            for (e0, x0, za), (e1, x1, zb) in zip(ring, ring[1:]):
                for p, z in ((e0, za), (x0, za), (x1, zb), (e1, zb)):
                    lines.append(f"v {p[0] * unit:.5f} {p[1] * unit:.5f} {z * unit:.5f}")
                lines.append(f"f {nv + 1} {nv + 2} {nv + 3}")
                lines.append(f"f {nv + 1} {nv + 3} {nv + 4}")
                nv += 4
        return "\n".join(lines) + "\n"


def _covering(lst: list[Interface], z: float, from_below: bool = False) -> Interface:
    """Interface covering z; at a boundary the upper piece unless ``from_below``."""
    for it in lst:
        if (it.z0 < z <= it.z1) if from_below else (it.z0 <= z < it.z1):
            return it
    if lst and z == lst[-1].z1:
        return lst[-1]
    if lst and z == lst[0].z0:
        return lst[0]
    raise ContinuityError(f"no interface covers z={z}")


# ---------------------------------------------------------------- enforcement


def build_interfaces(forest: Forest) -> dict[tuple[int, int], Interface]:
    """Step 1: one interface per right link, following the finer cell's sweep."""
    out = {}
    cells = forest.cells
    for a in cells:
        if a.children:
            continue
        for bid in a.right:
            b = cells[bid]
            fine, face = (b, b.entry_face) if b.depth > a.depth else (a, a.exit_face)
            seg = _left_end_first(face, a.centroid3)
            u0, u1 = (0.0, 1.0) if fine.kind.embedding == "C" else (1.0, 0.0)
            it = Interface(a.id, b.id, seg, fine.z0, fine.z1, u0, u1)
            if a.depth != b.depth:
                it.notes.append(f"ruled: follows cell {fine.id}")
            out[(a.id, b.id)] = it
    return out


def _pair_vertical(interfaces: list[Interface]) -> tuple[list[tuple[Interface, Interface]], set, set]:
    """Interfaces meeting at a z-boundary on a common face line: (lower, upper) pairs."""
    groups: dict[tuple, list] = defaultdict(list)
    spans = {id(it): face_span(it.seg) for it in interfaces}
    for it in interfaces:
        key, lo, hi = spans[id(it)]
        groups[(key, it.z1)].append((lo, hi, it))
    index = {}
    for k, lst in groups.items():
        # interfaces ending at the same height on one line never overlap each other
        lst.sort(key=lambda e: e[0])
        index[k] = ([e[0] for e in lst], lst)
    pairs = []
    paired_end, paired_start = set(), set()
    for it in interfaces:
        key, lo, hi = spans[id(it)]
        found = index.get((key, it.z0))
        if found is None:
            continue
        los, lst = found
        j = bisect.bisect_left(los, hi) - 1
        while j >= 0 and lst[j][1] > lo:
            other = lst[j][2]
            pairs.append((other, it))
            paired_end.add(id(other))
            paired_start.add(id(it))
            j -= 1
    return pairs, paired_end, paired_start


def _coarser(lower: Interface, upper: Interface) -> str:
    if lower.length2 != upper.length2:
        return "lower" if lower.length2 > upper.length2 else "upper"
    if (lower.z1 - lower.z0) != (upper.z1 - upper.z0):
        return "lower" if (lower.z1 - lower.z0) > (upper.z1 - upper.z0) else "upper"
    return "upper"


def _point_u(it: Interface, other: Interface, u: float) -> float:
    (ax, ay), (bx, by) = other.seg
    return it.u_of_point((ax + u * (bx - ax), ay + u * (by - ay)))


def enforce_continuity(forest: Forest, strict: bool = False) -> Surface:
    """Build all interfaces and apply the three repair steps.

    Residual gaps larger than two fixed-point units are logged and kept in
    :attr:`Surface.residuals`; with ``strict`` they raise :class:`ContinuityError`.
    """
    with paused_gc():
        interfaces = build_interfaces(forest)
    surface = Surface(forest, interfaces, [])
    if len({c.depth for c in forest.leaves()}) == 1:
        # one level everywhere: the canonical patches already join up
        return surface
    _repair(surface)
    for what, gap in surface.residuals:
        logger.warning("continuity residual %s: %.3g mm", what, gap * forest.unit)
    if strict and surface.residuals:
        raise ContinuityError(f"{len(surface.residuals)} residual discontinuities, first: {surface.residuals[0][0]}")
    return surface


def reapply_continuity(surface: Surface) -> int:
    """Run the repair steps again on an enforced surface; returns how many interface ends moved."""
    return _repair(surface)


def _targets(it: Interface) -> tuple:
    return it.start_target, it.end_target


def _repair(surface: Surface) -> int:
    forest = surface.forest
    interfaces = surface.interfaces
    residuals = surface.residuals
    residuals.clear()
    items = sorted(interfaces.values(), key=lambda i: (i.left_cell, i.right_cell))
    before = {id(it): _targets(it) for it in items}
    tol = STEP_TOLERANCE_UNITS * 1e-3 / forest.unit  # lattice units

    # step 2: side continuity
    pairs, paired_end, paired_start = _pair_vertical(items)
    for lower, upper in pairs:
        if lower.seg == upper.seg and lower.end_target is None and upper.start_target is None \
                and lower.u1 == upper.u0:
            continue
        if _coarser(lower, upper) == "lower":
            target = _point_u(lower, upper, upper.u0 if upper.start_target is None else upper.start_target)
            gap = lower.flip_end(target)
            scale = math.sqrt(lower.length2)
            _note(lower, f"side flip at z={lower.z1} to meet {upper.left_cell}->{upper.right_cell}")
        else:
            target = _point_u(upper, lower, lower.u1 if lower.end_target is None else lower.end_target)
            gap = upper.flip_start(target)
            scale = math.sqrt(upper.length2)
            _note(upper, f"side flip at z={upper.z0} to meet {lower.left_cell}->{lower.right_cell}")
        if gap * scale > tol:
            residuals.append((f"side {lower.left_cell}->{lower.right_cell} / {upper.left_cell}->{upper.right_cell}", gap * scale))

    # step 3: mid continuity, against the horizontal edge of the coarser cell across the boundary
    top = max(forest[r].z1 for r in forest.roots)
    for it in items:
        for at_start in (True, False):
            if (id(it) in paired_start) if at_start else (id(it) in paired_end):
                continue
            zb = it.z0 if at_start else it.z1
            if zb == 0 or zb == top:
                continue
            host = _host_across(forest, it, zb, below=at_start)
            if host is None:
                continue
            p = _host_edge_point(surface, host, zb, it)
            if p is None:
                residuals.append((f"mid {it.left_cell}->{it.right_cell} at z={zb}: no crossing", float("inf")))
                continue
            target = it.u_of_point(p)
            gap = it.flip_start(target) if at_start else it.flip_end(target)
            _note(it, f"mid flip at z={zb} onto edge of cell {host.id}")
            if gap * math.sqrt(it.length2) > tol:
                residuals.append((f"mid {it.left_cell}->{it.right_cell} at z={zb}", gap * math.sqrt(it.length2)))

    moved = 0
    for it in items:
        old, new = before[id(it)], _targets(it)
        for a, b in zip(old, new):
            if (a is None) != (b is None) or (a is not None and abs(a - b) * math.sqrt(it.length2) > tol):
                moved += 1
    return moved


def _note(it: Interface, text: str) -> None:
    if text not in it.notes:
        it.notes.append(text)


def _host_across(forest: Forest, it: Interface, zb: int, below: bool) -> PrismCell | None:
    """Leaf on the other side of z-boundary ``zb`` whose footprint contains the interface segment."""
    (ax, ay), (bx, by) = it.seg
    mid3 = (3 * (ax + bx) / 2, 3 * (ay + by) / 2)
    for cid in (it.left_cell, it.right_cell):
        c = forest[cid]
        if (c.z0 if below else c.z1) != zb:
            continue
        for n in (c.down if below else c.up):
            h = forest[n]
            if _strictly_inside(h.tri, mid3):
                return h
    return None


def _strictly_inside(tri, p3) -> bool:
    (ax, ay), (bx, by), (cx, cy) = ((3 * x, 3 * y) for x, y in tri)
    x, y = p3
    return ((bx - ax) * (y - ay) - (by - ay) * (x - ax) > 0
            and (cx - bx) * (y - by) - (cy - by) * (x - bx) > 0
            and (ax - cx) * (y - cy) - (ay - cy) * (x - cx) > 0)


def _host_edge_point(surface: Surface, host: PrismCell, zb: int, it: Interface):
    """Intersection of the host's sliced segment at ``zb`` with the interface's face line."""
    below = host.z1 == zb
    e = _covering(surface.left_of[host.id], zb, below).point_at(zb)
    x = _covering(surface.right_of[host.id], zb, below).point_at(zb)
    (ax, ay), (bx, by) = it.seg
    d1 = (x[0] - e[0], x[1] - e[1])
    d2 = (bx - ax, by - ay)
    den = d1[0] * d2[1] - d1[1] * d2[0]
    if abs(den) <= 1e-9 * math.hypot(*d2) * max(1.0, math.hypot(*d1)):
        # the host's slice has collapsed to a point (pyramid apex or corner)
        if math.hypot(*d1) <= 1.0:
            return e
        return None
    t = ((ax - e[0]) * d2[1] - (ay - e[1]) * d2[0]) / den
    return (e[0] + t * d1[0], e[1] + t * d1[1])


# ---------------------------------------------------------------- checks


def slice_gaps(surface: Surface, z: float) -> float:
    """Largest jump (lattice units) between exit and entry points of linked cells at z.

    Independent of the shared-interface construction: each cell's entry point is
    re-derived from its own interface list and compared with the neighbour's.
    """
    worst = 0.0
    for (a, b), it in surface.interfaces.items():
        if not it.z0 <= z < it.z1:
            continue
        p = surface.exit_at(a, z).point_at(z)
        q = surface.entry_at(b, z).point_at(z)
        worst = max(worst, math.hypot(p[0] - q[0], p[1] - q[1]))
    return worst


def vertical_gaps(surface: Surface) -> float:
    """Largest jump (lattice units) of a cell's slice across a z-boundary inside or between cells.

    For every interface end at an inner z-boundary the crossing point must lie on
    the slice of the cells on the other side of the boundary.
    """
    forest = surface.forest
    top = max(forest[r].z1 for r in forest.roots)
    worst = 0.0
    for it in surface.interfaces.values():
        for zb, below in ((it.z0, True), (it.z1, False)):
            if zb == 0 or zb == top:
                continue
            p = it.point_at(zb)
            best = float("inf")
            for cid in (it.left_cell, it.right_cell):
                if (forest[cid].z0 if below else forest[cid].z1) != zb:
                    continue
                for n in (forest[cid].down if below else forest[cid].up):
                    h = forest[n]
                    e = _covering(surface.left_of[h.id], zb, below).point_at(zb)
                    x = _covering(surface.right_of[h.id], zb, below).point_at(zb)
                    best = min(best, _point_seg_dist(p, e, x))
            if best < float("inf"):
                worst = max(worst, best)
    return worst


def _point_seg_dist(p, a, b) -> float:
    dx, dy = b[0] - a[0], b[1] - a[1]
    L = dx * dx + dy * dy
    t = 0.0 if L == 0 else max(0.0, min(1.0, ((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / L))
    return math.hypot(p[0] - a[0] - t * dx, p[1] - a[1] - t * dy)


def max_overhang_deg(surface: Surface, samples: int = 5) -> float:
    """Largest sampled overhang angle (degrees from vertical) over all patches."""
    forest = surface.forest
    worst = 0.0
    for c in forest.leaves():
        zs = sorted({z for it in surface.left_of[c.id] + surface.right_of[c.id] for z in it.knots()[0]})
        for za, zb in zip(zs, zs[1:]):
            if zb - za <= 1e-6 * (c.z1 - c.z0):
                continue
            zm = 0.5 * (za + zb)
            dz = 0.25 * (zb - za)
            e0 = np.array(surface.entry_at(c.id, zm).point_at(zm - dz))
            e1 = np.array(surface.entry_at(c.id, zm).point_at(zm + dz))
            x0 = np.array(surface.exit_at(c.id, zm).point_at(zm - dz))
            x1 = np.array(surface.exit_at(c.id, zm).point_at(zm + dz))
            for t in np.linspace(0.0, 1.0, samples):
                p0 = e0 + t * (x0 - e0)
                p1 = e1 + t * (x1 - e1)
                seg = (x0 + x1 - e0 - e1) / 2
                n = np.linalg.norm(seg)
                if n == 0:
                    continue
                perp = np.array([-seg[1], seg[0]]) / n
                horiz = abs(np.dot(p1 - p0, perp))
                worst = max(worst, math.degrees(math.atan2(horiz, 2 * dz)))
    return worst
