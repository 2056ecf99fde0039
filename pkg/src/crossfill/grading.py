"""Choosing subdivision levels so the simplified mass tracks the target mass.

Three passes run on a :class:`~crossfill.forest.Forest`:

* :func:`build_lower_bound` refines top-down while one more level would still
  not exceed the target mass.
* :func:`dither` visits the leaves in a Morton-like order and decides between
  the current level and one level deeper, pushing the quantization error to
  unprocessed neighbours along the connectivity graph.
* :func:`enforce_skin_support` forces a minimum level under top skins.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .density_field import CellTargets, DensityField
from .forest import Forest, PrismCell, footprints_overlap

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DiffusionWeights:
    """Error-diffusion weights by position relative to the current cell.

    Positions are taken on the unfolded surface: horizontal is the traversal
    direction, vertical is z.  ``left`` and ``down`` only matter when such a
    neighbour happens to be unprocessed (e.g. where the traversal wraps around).
    """

    up_left: float = 1.0
    up: float = 2.0
    up_right: float = 1.0
    right: float = 2.0
    down_right: float = 0.0
    left: float = 2.0
    down: float = 2.0

    def __post_init__(self):
        if any(v < 0 for v in asdict(self).values()):
            raise ValueError("diffusion weights must be non-negative")


@dataclass
class GradingReport:
    leaves_per_depth: dict[int, int] = field(default_factory=dict)
    target_mass: float = 0.0
    realized_mass: float = 0.0
    dropped_error: float = 0.0
    forced_subdivisions: int = 0
    dithered_subdivisions: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)


def _targets(forest: Forest, field: DensityField | CellTargets) -> CellTargets:
    return field if isinstance(field, CellTargets) else CellTargets(forest, field)


# ------------------------------------------------------------------ lower bound


def build_lower_bound(forest: Forest, field: DensityField | CellTargets) -> CellTargets:
    """Refine every leaf with ``M_N < M_T`` until none is left (or max depth).

    Forced splits of shallower neighbours can create leaves behind the sweep, so
    the top-down pass repeats until nothing changes.
    """
    targets = _targets(forest, field)
    changed = True
    while changed:
        changed = False
        stack = list(reversed(forest.roots))
        while stack:
            cell = forest[stack.pop()]
            if cell.is_leaf and cell.depth < forest.max_depth:
                if forest.mass_after_subdivision(cell) < targets.mass(cell):
                    forest.subdivide(cell.id)
                    changed = True
            stack.extend(reversed(cell.children))
    return targets


# ------------------------------------------------------------------ dithering


def _z_overlap(a: PrismCell, b: PrismCell) -> bool:
    return min(a.z1, b.z1) > max(a.z0, b.z0)


def neighbourhood_weights(forest: Forest, cell: PrismCell, weights: DiffusionWeights) -> dict[int, float]:
    """Unnormalized weights for the unprocessed cells around ``cell``."""
    cells = forest.cells
    right = [cells[n] for n in cell.right]
    left = [cells[n] for n in cell.left]
    up = [cells[n] for n in cell.up]
    down = [cells[n] for n in cell.down]
    out: dict[int, float] = {}
    covered: set[str] = set()

    def add(c: PrismCell, w: float):
        if not c.processed and w > 0:
            out[c.id] = out.get(c.id, 0.0) + w

    for group, w_mid, w_above, w_below, tag in (
        (right, weights.right, weights.up_right, weights.down_right, "right"),
        (left, weights.left, weights.up_left, 0.0, "left"),
    ):
        for c in group:
            w = w_mid / len(group)
            if c.z1 > cell.z1:
                w += w_above
                covered.add("up_" + tag)
            if c.z0 < cell.z0:
                w += w_below
                covered.add("down_" + tag)
            add(c, w)
    for group, w_mid, tag in ((up, weights.up, "up"), (down, weights.down, "down")):
        for c in group:
            w = w_mid / len(group)
            if tag == "up" and c.depth < cell.depth:
                # a coarser cell above also covers a diagonal position
                if "up_right" not in covered and any(footprints_overlap(c, r) for r in right):
                    w += weights.up_right
                    covered.add("up_right")
                if "up_left" not in covered and any(footprints_overlap(c, l) for l in left):
                    w += weights.up_left
                    covered.add("up_left")
            add(c, w)

    direct = {c.id for c in right + left + up + down}
    for pos, w, horiz, above in (
        ("up_right", weights.up_right, right, True),
        ("up_left", weights.up_left, left, True),
        ("down_right", weights.down_right, right, False),
    ):
        if pos in covered or w <= 0:
            continue
        vert = up if above else down
        cand = {}
        for h in horiz:
            for n in (h.up if above else h.down):
                cand[n] = cells[n]
        for v in vert:
            for n in (v.right if horiz is right else v.left):
                cand[n] = cells[n]
        for cid in sorted(cand):
            c = cand[cid]
            if cid == cell.id or cid in direct or _z_overlap(c, cell) or footprints_overlap(c, cell):
                continue
            if any(footprints_overlap(c, h) for h in horiz):
                add(c, w)
                break
    return out


def dither(forest: Forest, field: DensityField | CellTargets,
           weights: DiffusionWeights | None = None) -> GradingReport:
    """Error-diffusion pass over the leaves; returns mass bookkeeping.

    ``dropped_error`` is the error that had no unprocessed recipient, signed so
    that ``target_mass - realized_mass == dropped_error``.
    """
    weights = weights or DiffusionWeights()
    targets = _targets(forest, field)
    for c in forest.cells:
        c.error = 0.0
        c.processed = False
    report = GradingReport()
    for cell in list(forest.morton_leaves()):
        m_c = forest.current_mass(cell)
        m_t = targets.mass(cell)
        # neighbours are fixed before a split moves the links onto the children
        hood = neighbourhood_weights(forest, cell, weights)
        cell.processed = True
        m = m_c
        if forest.can_subdivide_locally(cell):
            m_n = forest.mass_after_subdivision(cell)
            if 0.5 * (m_c + m_n) + cell.error < m_t:
                for cid in forest.subdivide(cell.id):
                    forest[cid].processed = True
                m = m_n
                report.dithered_subdivisions += 1
        err = m + cell.error - m_t
        report.target_mass += m_t
        report.realized_mass += m
        total = sum(hood.values())
        if total > 0:
            for cid, w in hood.items():
                forest[cid].error += err * w / total
        else:
            report.dropped_error -= err
    if abs(report.dropped_error) > 1e-9 * max(1.0, report.target_mass):
        logger.info("dithering dropped %.6g mm^3 of error", report.dropped_error)
    report.leaves_per_depth = leaves_per_depth(forest)
    return report


def leaves_per_depth(forest: Forest) -> dict[int, int]:
    counts: dict[int, int] = {}
    for c in forest.leaves():
        counts[c.depth] = counts.get(c.depth, 0) + 1
    return dict(sorted(counts.items()))


def realized_simplified_mass(forest: Forest) -> float:
    return sum(forest.current_mass(c) for c in forest.leaves())


# ------------------------------------------------------------------ skins


def enforce_skin_support(forest: Forest, skin_areas: Iterable[tuple[float, Sequence[np.ndarray]]],
                         min_level: int, offset=(0.0, 0.0, 0.0)) -> int:
    """Refine every leaf that meets a skin area to at least ``min_level``.

    ``skin_areas`` holds ``(z, polygons)`` pairs in model coordinates; ``offset``
    is the model position of the forest's origin.  Returns the number of splits.
    """
    from shapely import Polygon as ShapelyPolygon

    from .geometry import to_shapely

    layers = [(z - offset[2], to_shapely([np.asarray(p) - np.asarray(offset[:2]) for p in polys]))
              for z, polys in skin_areas]
    layers = [(z, g) for z, g in layers if not g.is_empty]
    if not layers:
        return 0
    min_level = min(min_level, forest.max_depth)
    splits = 0
    changed = True
    while changed:
        changed = False
        for cell in list(forest.leaves()):
            if not cell.is_leaf or cell.depth >= min_level:
                continue
            z0, z1 = forest.z_range_mm(cell)
            tri = ShapelyPolygon(forest.tri_mm(cell))
            if any(z0 <= z <= z1 and tri.intersects(g) and tri.intersection(g).area > 0 for z, g in layers):
                forest.subdivide(cell.id)
                splits += 1
                changed = True
    return splits


def grade(forest: Forest, field: DensityField, weights: DiffusionWeights | None = None,
          use_dithering: bool = True) -> GradingReport:
    """Lower bound followed by optional dithering."""
    targets = build_lower_bound(forest, field)
    if use_dithering:
        return dither(forest, targets, weights)
    report = GradingReport(leaves_per_depth=leaves_per_depth(forest))
    report.target_mass = sum(targets.mass(c) for c in forest.leaves())
    report.realized_mass = realized_simplified_mass(forest)
    report.dropped_error = report.target_mass - report.realized_mass
    return report
