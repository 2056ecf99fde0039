"""Subdivision tree and connectivity graph of typed prism cells.

Cells are right-isosceles triangular prisms.  A triangle is stored as
``(S, P, Q)``: the right-angle corner ``S`` followed by the ends of its left
and right catheti, always counterclockwise.  The route of a cell names the two
faces its surface patch crosses (``A``: both catheti, ``L``/``R``: hypotenuse
and the left/right cathetus); the direction gives the order in which they are
crossed.  With this convention the four root cells travel clockwise around the
centre of the starting square.

Geometry is kept on an integer lattice of ``2**LATTICE_BITS`` units per side
of the starting cube so adjacency tests are exact; :meth:`Forest.to_mm`
converts to millimetres.
"""

from __future__ import annotations

import gc
import json
import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Iterator, NamedTuple

LATTICE_BITS = 40
SQRT2 = math.sqrt(2.0)

# faces of a triangle (S, P, Q): left cathetus S-P, right cathetus S-Q, hypotenuse P-Q
FACE_LEFT, FACE_RIGHT, FACE_HYP = "L", "R", "H"

# (route, direction) -> (entry face, exit face)
ROUTE_FACES = {
    ("A", +1): (FACE_LEFT, FACE_RIGHT),
    ("A", -1): (FACE_RIGHT, FACE_LEFT),
    ("L", +1): (FACE_LEFT, FACE_HYP),
    ("L", -1): (FACE_HYP, FACE_LEFT),
    ("R", +1): (FACE_HYP, FACE_RIGHT),
    ("R", -1): (FACE_RIGHT, FACE_HYP),
}

# Horizontal production x -> a | b.  Child 0 is (M, S, P) and child 1 is (M, Q, S)
# where M is the hypotenuse midpoint; entries are listed in traversal order.
PRODUCTIONS = {
    ("A", +1): ((0, "L", -1), (1, "R", -1)),
    ("A", -1): ((1, "R", +1), (0, "L", +1)),
    ("L", +1): ((0, "L", -1), (1, "A", -1)),
    ("L", -1): ((1, "A", +1), (0, "L", +1)),
    ("R", +1): ((0, "A", -1), (1, "R", -1)),
    ("R", -1): ((1, "R", +1), (0, "A", +1)),
}


class SubdivisionError(RuntimeError):
    pass


class CellKind(NamedTuple):
    shape: str  # "H" or "Q"
    route: str  # "A", "L" or "R"
    direction: int  # +1 or -1
    embedding: str  # "C" or "E"

    @property
    def name(self) -> str:
        return f"{self.shape}{self.embedding}{self.route}{'+' if self.direction > 0 else '-'}"

    @classmethod
    def parse(cls, name: str) -> "CellKind":
        shape, emb, route, sign = name
        return cls(shape, route, +1 if sign == "+" else -1, emb)


def all_kinds() -> list[CellKind]:
    """The twelve cell kinds: H-prisms travel in + direction, Q-prisms in -."""
    return [
        CellKind(shape, route, +1 if shape == "H" else -1, emb)
        for shape in "HQ"
        for emb in "CE"
        for route in "ALR"
    ]


def child_kinds(kind: CellKind) -> list[list[CellKind]]:
    """Rows (bottom first) of child kinds in traversal order."""
    row = PRODUCTIONS[(kind.route, kind.direction)]
    if kind.shape == "H":
        return [[CellKind("Q", r, d, kind.embedding) for _, r, d in row]]
    # a Q-prism splits into a contracting row below an expanding row, so that
    # every column alternates C/E and the uniform surface is continuous in z
    return [[CellKind("H", r, d, emb) for _, r, d in row] for emb in ("C", "E")]



@contextmanager
def paused_gc():
    """Suspend cyclic collection while building many acyclic objects at once."""
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        yield
    finally:
        if was_enabled:
            gc.enable()

@dataclass(eq=False, slots=True, init=False)
class PrismCell:
    id: int
    kind: CellKind
    depth: int
    tri: tuple  # ((sx, sy), (px, py), (qx, qy)) lattice units
    z0: int
    z1: int
    parent: int | None
    # tuples of ids rather than lists: the garbage collector stops scanning them
    children: tuple[int, ...]
    left: tuple[int, ...]
    right: tuple[int, ...]
    up: tuple[int, ...]
    down: tuple[int, ...]
    error: float  # diffused quantization error M_E, mm^3
    processed: bool
    entry_face: tuple
    exit_face: tuple
    entry_span: tuple
    exit_span: tuple
    centroid3: tuple

    def __init__(self, id: int, kind: CellKind, depth: int, tri: tuple, z0: int, z1: int,
                 parent: int | None = None):
        # written out by hand: millions of cells are created in deep uniform forests
        self.id, self.kind, self.depth, self.tri = id, kind, depth, tri
        self.z0, self.z1, self.parent = z0, z1, parent
        self.children = self.left = self.right = self.up = self.down = ()
        self.error, self.processed = 0.0, False
        entry, exit_ = ROUTE_FACES[(kind.route, kind.direction)]
        self.entry_face, self.exit_face = self.face(entry), self.face(exit_)
        self.entry_span = face_span(self.entry_face)
        self.exit_span = face_span(self.exit_face)
        (sx, sy), (px, py), (qx, qy) = tri
        self.centroid3 = (sx + px + qx, sy + py + qy)

    @property
    def is_leaf(self) -> bool:
        return not self.children

    def links(self) -> Iterator[int]:
        yield from self.left
        yield from self.right
        yield from self.up
        yield from self.down

    def face(self, name: str) -> tuple:
        s, p, q = self.tri
        if name == FACE_LEFT:
            return (s, p)
        if name == FACE_RIGHT:
            return (s, q)
        return (p, q)



def _cross(o, a, b) -> int:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def line_key(seg) -> tuple:
    """Exact key of the infinite line through a lattice segment."""
    (ax, ay), (bx, by) = seg
    dx, dy = bx - ax, by - ay
    if dx == 0 or dy == 0 or dx == dy or dx == -dy:
        # faces of the tiling are axis-aligned or diagonal
        dx, dy = (dx > 0) - (dx < 0), (dy > 0) - (dy < 0)
    else:
        g = math.gcd(dx, dy)
        dx, dy = dx // g, dy // g
    if dx < 0 or (dx == 0 and dy < 0):
        dx, dy = -dx, -dy
    return (dx, dy, dx * ay - dy * ax)


def face_span(seg) -> tuple:
    """(line key, lo, hi): the segment as an interval along its line."""
    key = line_key(seg)
    (ax, ay), (bx, by) = seg
    kx, ky = key[0], key[1]
    pa, pb = ax * kx + ay * ky, bx * kx + by * ky
    return (key, pa, pb) if pa < pb else (key, pb, pa)


def spans_overlap(s, t) -> bool:
    return s[0] == t[0] and min(s[2], t[2]) > max(s[1], t[1])


def faces_overlap(e, f) -> bool:
    """True when two lattice segments are collinear and share a positive length."""
    (a, b), (c, d) = e, f
    if _cross(a, b, c) != 0 or _cross(a, b, d) != 0:
        return False
    axis = 0 if a[0] != b[0] else 1
    lo1, hi1 = sorted((a[axis], b[axis]))
    lo2, hi2 = sorted((c[axis], d[axis]))
    return min(hi1, hi2) - max(lo1, lo2) > 0


def _contains_centroid(big, c3) -> bool:
    # lattice-exact: 3*centroid tested against 3*vertices; triangles are counterclockwise
    (ax, ay), (bx, by), (cx, cy) = big
    x, y = c3
    ax, ay, bx, by, cx, cy = 3 * ax, 3 * ay, 3 * bx, 3 * by, 3 * cx, 3 * cy
    return (
        (bx - ax) * (y - ay) - (by - ay) * (x - ax) > 0
        and (cx - bx) * (y - by) - (cy - by) * (x - bx) > 0
        and (ax - cx) * (y - cy) - (ay - cy) * (x - cx) > 0
    )


def footprints_overlap(a: "PrismCell", b: "PrismCell") -> bool:
    # cells of one depth tile the square without overlap and deeper cells nest
    # inside shallower ones, so one exact test decides
    if a.depth == b.depth:
        return a.centroid3 == b.centroid3
    big, small = (a, b) if a.depth < b.depth else (b, a)
    return _contains_centroid(big.tri, small.centroid3)


def _link_kind(a: PrismCell, b: PrismCell) -> str | None:
    """Relation of ``b`` as seen from ``a``: 'right', 'left', 'up', 'down' or None."""
    if a.z1 == b.z0:
        return "up" if footprints_overlap(a, b) else None
    if b.z1 == a.z0:
        return "down" if footprints_overlap(a, b) else None
    if min(a.z1, b.z1) <= max(a.z0, b.z0):
        return None
    if spans_overlap(a.exit_span, b.entry_span):
        return "right"
    if spans_overlap(a.entry_span, b.exit_span):
        return "left"
    return None


_MIRROR = {"right": "left", "left": "right", "up": "down", "down": "up"}


class Forest:
    """Arena of prism cells with four roots tiling the starting cube."""

    def __init__(self, l_init: float, w: float, max_depth: int | None = None):
        ratio = l_init / w
        i = round(math.log2(ratio)) if ratio > 0 else -1
        if i < 0 or not math.isclose(2.0 ** i, ratio, rel_tol=1e-9):
            raise ValueError(f"l_init={l_init} is not a power-of-two multiple of w={w}")
        self.l_init = float(l_init)
        self.w = float(w)
        self.exponent = i
        self.max_depth = default_max_depth(i) if max_depth is None else int(max_depth)
        self.unit = self.l_init / (1 << LATTICE_BITS)
        self.cells: list[PrismCell] = []
        self.roots: list[int] = []
        self.log: list[str] = []
        n = 1 << LATTICE_BITS
        c = (n // 2, n // 2)
        corners = [(0, 0), (0, n), (n, n), (n, 0)]  # clockwise
        for k in range(4):
            # left end first so that (S, P, Q) is counterclockwise; route A- runs Q-side -> P-side
            p, q = corners[(k + 1) % 4], corners[k]
            cell = self._new(CellKind("Q", "A", -1, "C"), 1, (c, p, q), 0, n, None)
            self.roots.append(cell.id)
        for k in range(4):
            a = self.cells[self.roots[k]]
            b = self.cells[self.roots[(k + 1) % 4]]
            if spans_overlap(a.exit_span, b.entry_span):
                a.right += (b.id,)
                b.left += (a.id,)
            else:
                b.right += (a.id,)
                a.left += (b.id,)

    # ------------------------------------------------------------ basics

    def _new(self, kind, depth, tri, z0, z1, parent) -> PrismCell:
        cell = PrismCell(len(self.cells), kind, depth, tri, z0, z1, parent)
        self.cells.append(cell)
        return cell

    def __getitem__(self, cid: int) -> PrismCell:
        return self.cells[cid]

    def leaves(self) -> Iterator[PrismCell]:
        return (c for c in self.cells if not c.children)

    def to_mm(self, value) -> float:
        return value * self.unit

    def point_mm(self, p) -> tuple[float, float]:
        return (p[0] * self.unit, p[1] * self.unit)

    def z_range_mm(self, cell: PrismCell) -> tuple[float, float]:
        return cell.z0 * self.unit, cell.z1 * self.unit

    def tri_mm(self, cell: PrismCell) -> list[tuple[float, float]]:
        return [self.point_mm(p) for p in cell.tri]

    def cathetus(self, cell: PrismCell) -> float:
        return self.l_init * 2.0 ** (-cell.depth / 2.0)

    def volume(self, cell: PrismCell) -> float:
        l = self.cathetus(cell)
        return 0.5 * l * l * (cell.z1 - cell.z0) * self.unit

    # ------------------------------------------------------------ measures

    def current_density(self, cell: PrismCell) -> float:
        return self.w / self.cathetus(cell) * (SQRT2 if cell.kind.route == "A" else 1.0)

    def current_mass(self, cell: PrismCell) -> float:
        return self.current_density(cell) * self.volume(cell)

    def mass_after_subdivision(self, cell: PrismCell) -> float:
        return self.current_mass(cell) * (1.0 if cell.kind.route == "A" else 1.0 + SQRT2 / 2.0)

    # ------------------------------------------------------------ subdivision

    def subdivide(self, cid: int) -> list[int]:
        """Split leaf ``cid``; shallower linked leaves are split first."""
        cell = self.cells[cid]
        if cell.children:
            raise SubdivisionError(f"cell {cid} is not a leaf")
        if cell.depth >= self.max_depth:
            raise SubdivisionError(f"cell {cid} already at max depth {self.max_depth}")
        cells = self.cells
        while True:
            for links in (cell.left, cell.right, cell.up, cell.down):
                shallow = next((n for n in links if cells[n].depth < cell.depth), None)
                if shallow is not None:
                    break
            if shallow is None:
                break
            self.subdivide(shallow)
        return self._split(cell)

    def can_subdivide_locally(self, cell: PrismCell) -> bool:
        return (not cell.children and cell.depth < self.max_depth
                and all(self.cells[n].depth >= cell.depth for n in cell.links()))

    def _split(self, cell: PrismCell) -> list[int]:
        s, p, q = cell.tri
        m = ((p[0] + q[0]) // 2, (p[1] + q[1]) // 2)
        sub = ((m, s, p), (m, q, s))
        rows = child_kinds(cell.kind)
        prod = PRODUCTIONS[(cell.kind.route, cell.kind.direction)]
        if len(rows) == 1:
            zs = [(cell.z0, cell.z1)]
        else:
            zm = (cell.z0 + cell.z1) // 2
            zs = [(cell.z0, zm), (zm, cell.z1)]
        grid = []
        for (z0, z1), row in zip(zs, rows):
            grid.append([self._new(kind, cell.depth + 1, sub[which], z0, z1, cell.id)
                         for (which, _, _), kind in zip(prod, row)])
        children = [c for row in grid for c in row]
        cell.children = tuple(c.id for c in children)

        cid = cell.id
        old_left, old_right, old_up, old_down = cell.left, cell.right, cell.up, cell.down
        cell.left = cell.right = cell.up = cell.down = ()
        cells = self.cells
        for olds, attr in ((old_left, "right"), (old_right, "left"), (old_up, "down"), (old_down, "up")):
            for n in olds:
                nc = cells[n]
                setattr(nc, attr, tuple(x for x in getattr(nc, attr) if x != cid))
        # siblings: consecutive in a row along the traversal, rows stacked in z
        for row in grid:
            for a, b in zip(row, row[1:]):
                a.right += (b.id,)
                b.left += (a.id,)
        for a, b in zip(*grid) if len(grid) == 2 else ():
            a.up += (b.id,)
            b.down += (a.id,)
        for n in old_left:
            nc = cells[n]
            for c in children:
                if c.z0 < nc.z1 and nc.z0 < c.z1 and spans_overlap(c.entry_span, nc.exit_span):
                    c.left += (n,)
                    nc.right += (c.id,)
        for n in old_right:
            nc = cells[n]
            for c in children:
                if c.z0 < nc.z1 and nc.z0 < c.z1 and spans_overlap(c.exit_span, nc.entry_span):
                    c.right += (n,)
                    nc.left += (c.id,)
        for n in old_up:
            nc = cells[n]
            for c in grid[-1]:
                if footprints_overlap(c, nc):
                    c.up += (n,)
                    nc.down += (c.id,)
        for n in old_down:
            nc = cells[n]
            for c in grid[0]:
                if footprints_overlap(c, nc):
                    c.down += (n,)
                    nc.up += (c.id,)
        return cell.children

    def subdivide_uniform(self, steps: int = 1) -> None:
        with paused_gc():
            for _ in range(steps):
                for leaf in [c.id for c in self.leaves()]:
                    if self.cells[leaf].is_leaf:
                        self.subdivide(leaf)

    # ------------------------------------------------------------ queries

    def right_at(self, cell: PrismCell, z: int) -> PrismCell | None:
        for n in cell.right:
            c = self.cells[n]
            if c.z0 <= z < c.z1:
                return c
        return None

    def leaf_at(self, x: float, y: float, z: float) -> PrismCell | None:
        """Leaf containing the point (mm); boundary ties resolved arbitrarily."""
        px, py, pz = (v / self.unit for v in (x, y, z))
        for r in self.roots:
            cell = self.cells[r]
            if _tri_contains(cell.tri, (px, py)) and cell.z0 <= pz <= cell.z1:
                while cell.children:
                    cell = next(
                        (self.cells[c] for c in cell.children
                         if _tri_contains(self.cells[c].tri, (px, py)) and self.cells[c].z0 <= pz <= self.cells[c].z1),
                        None,
                    )
                    if cell is None:
                        break
                if cell is not None:
                    return cell
        return None

    def morton_leaves(self) -> Iterator[PrismCell]:
        """Leaves in depth-first order, children bottom row first, each row along the traversal."""
        stack = list(reversed(self.roots))
        while stack:
            c = self.cells[stack.pop()]
            if c.children:
                stack.extend(reversed(c.children))
            else:
                yield c

    def audit(self) -> list[str]:
        """Check link symmetry, geometric consistency and the level constraint."""
        problems = []
        leaves = {c.id for c in self.leaves()}
        for c in self.leaves():
            for rel in ("left", "right", "up", "down"):
                for n in getattr(c, rel):
                    if n not in leaves:
                        problems.append(f"{c.id} {rel}-links non-leaf {n}")
                        continue
                    other = self.cells[n]
                    if c.id not in getattr(other, _MIRROR[rel]):
                        problems.append(f"{c.id} {rel}-link to {n} not mirrored")
                    if _link_kind(c, other) != rel:
                        problems.append(f"{c.id} {rel}-link to {n} not geometric")
                    if abs(other.depth - c.depth) > 1:
                        problems.append(f"{c.id}/{n} depth {c.depth}/{other.depth}")
        return problems

    # ------------------------------------------------------------ export

    def to_json(self) -> str:
        doc = {
            "l_init": self.l_init,
            "w": self.w,
            "max_depth": self.max_depth,
            "roots": self.roots,
            "cells": [
                {
                    "id": c.id,
                    "kind": c.kind.name,
                    "depth": c.depth,
                    "triangle": [list(self.point_mm(p)) for p in c.tri],
                    "z": list(self.z_range_mm(c)),
                    "children": c.children,
                    "links": {"left": c.left, "right": c.right, "up": c.up, "down": c.down},
                }
                for c in self.cells
            ],
        }
        return json.dumps(doc, indent=1)


def _tri_contains(tri, pt) -> bool:
    s0 = _cross(tri[0], tri[1], pt)
    s1 = _cross(tri[1], tri[2], pt)
    s2 = _cross(tri[2], tri[0], pt)
    return (s0 >= 0 and s1 >= 0 and s2 >= 0) or (s0 <= 0 and s1 <= 0 and s2 <= 0)


def default_max_depth(exponent: int) -> int:
    """Deepest level whose cathetus stays at or above 2*sqrt(2)*w."""
    return max(1, 2 * exponent - 3)


def init_forest(l_init: float, w: float, max_depth: int | None = None) -> Forest:
    return Forest(l_init, w, max_depth)


def uniform_forest(l_init: float, w: float, steps: int, max_depth: int | None = None) -> Forest:
    f = Forest(l_init, w, max_depth if max_depth is not None else max(steps + 1, 1))
    f.subdivide_uniform(steps)
    return f
