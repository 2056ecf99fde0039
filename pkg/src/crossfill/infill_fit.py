"""Fitting a layer curve into the infill area and merging all loops into one path.

The curve is trimmed to the infill area shrunk by w/2.  Where it leaves the
area, the open ends are joined along the shrunk boundary, which is the same as
taking the boundary of (region enclosed by the curve) & (shrunk area).  Parts of
the area the curve never reaches become loops of their own.

Loops are then merged pairwise by bridges: two parallel connectors ``pp'`` and
``qq'`` replace a short stretch ``pq`` of one loop and ``p'q'`` of the other.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import shapely
from shapely import geometry as sg

from .geometry import PolygonSet, UNIT, loop_length, offset_polygons, signed_area, to_shapely

logger = logging.getLogger(__name__)

BRIDGE_FACTOR = 1.5


class UnbridgeableError(RuntimeError):
    """A loop has no bridge of acceptable length to any other loop."""

    def __init__(self, centroid, shortest: float):
        self.centroid = tuple(float(c) for c in centroid)
        self.shortest = shortest
        super().__init__(f"no bridge <= 1.5w from the loop around ({self.centroid[0]:.3f}, "
                         f"{self.centroid[1]:.3f}); nearest other loop is {shortest:.3f} mm away")


@dataclass(frozen=True)
class Bridge:
    p: tuple[float, float]
    q: tuple[float, float]
    p2: tuple[float, float]
    q2: tuple[float, float]
    score: float = 0.0

    @property
    def length(self) -> float:
        return math.dist(self.p, self.p2)

    @property
    def other_length(self) -> float:
        return math.dist(self.q, self.q2)


@dataclass
class LayerPlan:
    z: float
    walls: list[np.ndarray] = field(default_factory=list)
    infill_loops: list[np.ndarray] = field(default_factory=list)
    bridges: list[Bridge] = field(default_factory=list)
    toolpaths: list[np.ndarray] = field(default_factory=list)
    unbridged: int = 0

    @property
    def toolpath(self) -> np.ndarray | None:
        """The merged path (the last one when the outer wall is kept separate)."""
        return self.toolpaths[-1] if self.toolpaths else None

    def extrusion_length(self) -> float:
        return sum(loop_length(p) for p in self.toolpaths)


# ---------------------------------------------------------------- fitting


def _rings(geom) -> list[np.ndarray]:
    out = []
    for part in getattr(geom, "geoms", [geom]):
        if part.is_empty:
            continue
        if part.geom_type != "Polygon":
            out.extend(_rings(part) if hasattr(part, "geoms") else [])
            continue
        for ring in [part.exterior, *part.interiors]:
            pts = np.asarray(ring.coords)[:-1]
            if len(pts) >= 3 and abs(signed_area(pts)) > UNIT * UNIT:
                out.append(pts)
    return out


def fit_to_area(curve, infill_area: PolygonSet, w: float) -> list[np.ndarray]:
    """Closed loops of the curve fitted into ``infill_area`` shrunk by ``w/2``.

    ``curve`` is a :class:`~crossfill.slicing.LayerCurve` or an (n, 2) array.
    """
    pts = np.asarray(getattr(curve, "points", curve), dtype=float)
    shrunk = offset_polygons(infill_area, -0.5 * w)
    if not shrunk:
        return []
    area = to_shapely(shrunk)
    if len(pts) < 3:
        return _rings(area)
    ring = sg.LinearRing(pts)
    if area.covers(ring):
        return [pts.copy()]
    inside = sg.Polygon(pts)
    if not inside.is_valid:
        inside = shapely.make_valid(inside)
    loops = _rings(inside.intersection(area))
    for part in getattr(area, "geoms", [area]):
        if not part.intersects(ring) and not inside.covers(part.representative_point()):
            loops.extend(_rings(part))
    return loops


# ---------------------------------------------------------------- bridging


def _closed(loop: np.ndarray) -> np.ndarray:
    return np.vstack([loop, loop[:1]])


def _arc_params(loop: np.ndarray) -> np.ndarray:
    d = np.diff(_closed(loop), axis=0)
    return np.concatenate([[0.0], np.cumsum(np.hypot(d[:, 0], d[:, 1]))])


def _point_at(loop: np.ndarray, cum: np.ndarray, s: float) -> np.ndarray:
    s = s % cum[-1]
    i = min(int(np.searchsorted(cum, s, side="right")) - 1, len(loop) - 1)
    a, b = loop[i], loop[(i + 1) % len(loop)]
    seg = cum[i + 1] - cum[i]
    t = 0.0 if seg <= 0 else (s - cum[i]) / seg
    return a + t * (b - a)


def _chord_end(loop: np.ndarray, cum: np.ndarray, s: float, w: float) -> float | None:
    """Arc parameter after ``s`` of the first point at straight distance ``w``."""
    total = cum[-1]
    p = _point_at(loop, cum, s)
    arcs = np.concatenate([cum[:-1], cum[:-1] + total, [s + total]])
    arcs = np.unique(arcs[(arcs > s) & (arcs <= s + total)])
    prev_s, prev = s, p
    for a in arcs:
        v = _point_at(loop, cum, a)
        if np.hypot(*(v - p)) >= w:
            d, f = v - prev, prev - p
            qa, qb, qc = d @ d, 2 * f @ d, f @ f - w * w
            t = (-qb + math.sqrt(max(qb * qb - 4 * qa * qc, 0.0))) / (2 * qa)
            return prev_s + t * (a - prev_s)
        prev_s, prev = a, v
    return None


def _vertex_turns(loop: np.ndarray) -> np.ndarray:
    u = loop - np.roll(loop, 1, axis=0)
    v = np.roll(loop, -1, axis=0) - loop
    return np.abs(np.arctan2(u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0], (u * v).sum(axis=1)))


def _turning(turns: np.ndarray, cum: np.ndarray, s0: float, s1: float) -> float:
    """Total absolute turning at the vertices strictly within arc (s0, s1)."""
    d = (cum[:-1] - s0) % cum[-1]
    return float(turns[(d > 0) & (d < s1 - s0)].sum())


def curvature_criterion(candidate: dict) -> float:
    return candidate["turn"]


def interior_criterion(candidate: dict) -> float:
    # larger distance from the area boundary first
    return -candidate["interior"]


CRITERIA: dict[str, Callable[[dict], float]] = {
    "curvature": curvature_criterion,
    "interior": interior_criterion,
}


def _nearest_hit(hit, origin: np.ndarray):
    if hit is None or hit.is_empty:
        return None
    coords = shapely.get_coordinates(hit)
    return coords[np.argmin(np.hypot(*(coords - origin).T))]


def _candidates(src: np.ndarray, others: list[np.ndarray], w: float, step: float,
                boundary=None) -> tuple[list[dict], float, list]:
    """Bridge candidates from ``src`` without the clearance test, plus the shortest gap and the rings."""
    cum = _arc_params(src)
    total = cum[-1]
    rings = [sg.LinearRing(o) for o in others]
    union = sg.MultiLineString([r.coords for r in rings])
    blockers = [sg.LinearRing(src)] + rings
    limit = BRIDGE_FACTOR * w + 1e-9
    samples = np.unique(np.concatenate([cum[:-1], np.arange(0.0, total, step)]))
    closed = _closed(src)
    pts = np.column_stack([np.interp(samples, cum, closed[:, 0]), np.interp(samples, cum, closed[:, 1])])
    near = shapely.distance(shapely.points(pts), union)
    shortest = float(near.min()) if len(near) else math.inf
    ok = (near <= limit) & (near > UNIT)
    if not ok.any():
        return [], shortest, blockers
    s_ok, p_ok, dist = samples[ok], pts[ok], near[ok]
    ends = shapely.get_coordinates(shapely.shortest_line(shapely.points(p_ok), union)).reshape(-1, 2, 2)[:, 1]
    owner = np.argmin(np.array([shapely.distance(shapely.points(ends), r) for r in rings]), axis=0)

    # q: the chord of length w; on a straight stretch it is simply s + w
    nxt = cum[np.searchsorted(cum, s_ok, side="right")]
    sq = np.where(nxt - s_ok >= w, s_ok + w, np.nan)
    for i in np.nonzero(np.isnan(sq))[0]:
        r = _chord_end(src, cum, s_ok[i], w)
        sq[i] = np.nan if r is None else r
    good = ~np.isnan(sq) & (sq - s_ok < total - w)
    s_ok, p_ok, dist, ends, owner, sq = s_ok[good], p_ok[good], dist[good], ends[good], owner[good], sq[good]
    q = np.column_stack([np.interp(sq % total, cum, closed[:, 0]), np.interp(sq % total, cum, closed[:, 1])])
    d = (ends - p_ok) / dist[:, None]
    rays = shapely.linestrings(np.stack([q, q + d * (limit + UNIT)], axis=1))

    turns = _vertex_turns(src)
    out = []
    for k in np.unique(owner):
        sel = np.nonzero(owner == k)[0]
        oring = rings[k]
        hits = shapely.intersection(rays[sel], oring)
        ocum = _arc_params(others[k])
        oturns = _vertex_turns(others[k])
        for j, hit in zip(sel, hits):
            q2 = _nearest_hit(hit, q[j])
            if q2 is None or np.hypot(*(q2 - q[j])) > limit or np.hypot(*(q2 - ends[j])) <= UNIT:
                continue
            sp2, sq2 = shapely.line_locate_point(oring, shapely.points([ends[j], q2]))
            lo, hi = sorted((sp2, sq2))
            if hi - lo > 0.5 * ocum[-1]:
                lo, hi = hi, lo + ocum[-1]
            out.append({
                "s": float(s_ok[j]), "sq": float(sq[j]), "p": p_ok[j], "q": q[j], "p2": ends[j], "q2": q2,
                "target": int(k), "length": float(dist[j]),
                "turn": _turning(turns, cum, s_ok[j], sq[j]) + _turning(oturns, ocum, lo, hi),
            })
    if boundary is not None and out:
        mids = shapely.points(np.array([0.5 * (c["p"] + c["q"]) for c in out]))
        for c, v in zip(out, shapely.distance(mids, boundary)):
            c["interior"] = float(v)
    else:
        for c in out:
            c["interior"] = 0.0
    return out, shortest, blockers


def _bridge_clear(p, p2, q, q2, blockers, target_index) -> bool:
    """The two connectors touch nothing but their own endpoints and don't cross."""
    a = sg.LineString([p, p2])
    b = sg.LineString([q, q2])
    if a.intersects(b):
        return False
    for idx, ring in enumerate(blockers):
        for seg, ends in ((a, (p, p2)), (b, (q, q2))):
            hit = seg.intersection(ring)
            if hit.is_empty:
                continue
            allowed = ends[0] if idx == 0 else ends[1]
            if idx not in (0, target_index):
                return False
            if hit.geom_type != "Point" or hit.distance(sg.Point(allowed)) > 10 * UNIT:
                return False
    return True


def _arc_vertices(loop: np.ndarray, cum: np.ndarray, start: float, length: float, forward: bool) -> list:
    """Vertices met walking ``length`` along the loop from arc parameter ``start``."""
    total = cum[-1]
    d = ((cum[:-1] - start) if forward else (start - cum[:-1])) % total
    idx = np.nonzero((d > 0) & (d < length))[0]
    return [loop[i] for i in idx[np.argsort(d[idx], kind="stable")]]


def _splice(src: np.ndarray, s_p: float, s_q: float, dst: np.ndarray, p2, q2) -> np.ndarray:
    """Walk src from q around to p, cross to p', walk dst the long way to q', close at q."""
    cum = _arc_params(src)
    total = cum[-1]
    out = [_point_at(src, cum, s_q)]
    out += _arc_vertices(src, cum, s_q % total, total - (s_q - s_p), True)
    out.append(_point_at(src, cum, s_p))
    ring = sg.LinearRing(dst)
    dcum = _arc_params(dst)
    dtotal = dcum[-1]
    sp2 = ring.project(sg.Point(p2))
    forward = (ring.project(sg.Point(q2)) - sp2) % dtotal
    out.append(np.asarray(p2, dtype=float))
    if forward > 0.5 * dtotal:
        out += _arc_vertices(dst, dcum, sp2, forward, True)
    else:
        out += _arc_vertices(dst, dcum, sp2, dtotal - forward, False)
    out.append(np.asarray(q2, dtype=float))
    res = np.array(out, dtype=float)
    keep = np.ones(len(res), dtype=bool)
    keep[1:] = np.hypot(*np.diff(res, axis=0).T) > 1e-9
    if np.hypot(*(res[-1] - res[0])) <= 1e-9:
        keep[-1] = False
    return res[keep]


def _order_key(loop: np.ndarray):
    c = loop.mean(axis=0)
    return (abs(signed_area(loop)), round(float(c[0]), 6), round(float(c[1]), 6))


def connect_polygons(loops: Sequence[np.ndarray], w: float, criteria: str | Callable = "curvature",
                     boundary=None, step: float | None = None,
                     unbridged: list | None = None) -> tuple[np.ndarray, list[Bridge]]:
    """Merge all loops into one closed polyline, smallest loop first.

    ``boundary`` (a shapely geometry) feeds the most-interior criterion.
    A loop without any acceptable bridge raises :class:`UnbridgeableError`,
    unless an ``unbridged`` list is given to collect such loops instead.
    Returns the merged loop and the bridges applied.
    """
    score = CRITERIA[criteria] if isinstance(criteria, str) else criteria
    work = [np.asarray(l, dtype=float) for l in loops if len(l) >= 3]
    if not work:
        raise ValueError("need at least one loop")
    step = step or 0.25 * w
    bridges: list[Bridge] = []
    while len(work) > 1:
        work.sort(key=_order_key)
        src, others = work[0], work[1:]
        cands, shortest, blockers = _candidates(src, others, w, step, boundary)
        cands.sort(key=lambda c: (score(c), c["length"], c["s"]))
        best = next((c for c in cands if _bridge_clear(c["p"], c["p2"], c["q"], c["q2"], blockers,
                                                      c["target"] + 1)), None)
        if best is None:
            err = UnbridgeableError(src.mean(axis=0), shortest)
            if unbridged is None:
                raise err
            logger.warning("%s; printing it as a separate loop", err)
            unbridged.append(src)
            work = others
            continue
        k = best["target"]
        merged = _splice(src, best["s"], best["sq"], others[k], best["p2"], best["q2"])
        bridges.append(Bridge(tuple(best["p"]), tuple(best["q"]), tuple(best["p2"]), tuple(best["q2"]),
                              float(score(best))))
        work = [merged] + [o for i, o in enumerate(others) if i != k]
    return work[0], bridges


def connect_to_walls(infill_loops: Sequence[np.ndarray], walls: Sequence[np.ndarray], w: float,
                     z: float = 0.0, outer_count: int = 1, separate_outer_wall: bool = False,
                     criteria: str | Callable = "curvature", boundary=None,
                     on_unbridgeable: str = "error") -> LayerPlan:
    """Bridge the infill loops and the walls into the layer's toolpath.

    ``walls`` are ordered outermost first; the first ``outer_count`` loops form
    the outer wall, which with ``separate_outer_wall`` is printed as its own
    leading loop.  ``on_unbridgeable="separate"`` prints loops that cannot be
    bridged as their own paths, ahead of the merged one, instead of failing.
    """
    if on_unbridgeable not in ("error", "separate"):
        raise ValueError(f"unknown unbridgeable policy {on_unbridgeable!r}")
    walls = [np.asarray(wl, dtype=float) for wl in walls]
    plan = LayerPlan(z=z, walls=walls, infill_loops=[np.asarray(l, dtype=float) for l in infill_loops])
    lead = walls[:outer_count] if separate_outer_wall else []
    merge = plan.infill_loops + walls[len(lead):]
    if merge:
        loose: list | None = [] if on_unbridgeable == "separate" else None
        path, plan.bridges = connect_polygons(merge, w, criteria, boundary, unbridged=loose)
        plan.unbridged = len(loose or [])
        plan.toolpaths = lead + list(loose or []) + [path]
    else:
        plan.toolpaths = lead
    return plan


def wall_loops(outline: PolygonSet, wall_count: int, w: float) -> tuple[list[np.ndarray], int, PolygonSet]:
    """Wall centre lines (outermost first), number of loops in the outer wall, infill area.

    Wall ``k`` runs at ``(k + 1/2) w`` inside the outline; the infill area is the
    region inside the innermost wall's bead.
    """
    walls: list[np.ndarray] = []
    outer = 0
    for k in range(wall_count):
        loops = offset_polygons(outline, -(k + 0.5) * w)
        if k == 0:
            outer = len(loops)
        walls.extend(loops)
    area = offset_polygons(outline, -wall_count * w) if wall_count else list(outline)
    return walls, outer, area


def plan_layer(curve, outline: PolygonSet, w: float, wall_count: int = 2, z: float | None = None,
               separate_outer_wall: bool = False, criteria: str | Callable = "curvature",
               on_unbridgeable: str = "error") -> LayerPlan:
    """Walls, fitted infill and bridges for one layer."""
    walls, outer, area = wall_loops(outline, wall_count, w)
    loops = fit_to_area(curve, area, w)
    z = float(getattr(curve, "z", 0.0)) if z is None else z
    boundary = to_shapely(area).boundary if area and criteria == "interior" else None
    return connect_to_walls(loops, walls, w, z, outer, separate_outer_wall, criteria, boundary, on_unbridgeable)


def material_bound(plan: LayerPlan, w: float) -> float:
    """Expected change of path length caused by the bridges when bridged stretches are straight."""
    return sum(b.length + b.other_length - 2 * w for b in plan.bridges)
