"""G-code, SVG and statistics output."""

from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DEFAULT_HEADER = """; generated by crossfill
G21 ; millimetres
G90 ; absolute positioning
M82 ; absolute extrusion
G92 E0
"""
DEFAULT_FOOTER = """M107
M84 ; motors off
"""


@dataclass(frozen=True)
class PrintProfile:
    w: float = 0.38
    layer_height: float = 0.1
    speed: float = 25.0
    filament_diameter: float = 2.85
    first_layer_z: float = 0.1
    travel_speed: float = 120.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not value > 0:
                raise ValueError(f"print profile {name} must be positive, got {value}")

    @property
    def filament_area(self) -> float:
        return math.pi * (0.5 * self.filament_diameter) ** 2

    def extrusion(self, length: float) -> float:
        """Filament length fed for a bead of ``length`` mm."""
        return length * self.w * self.layer_height / self.filament_area


def _fmt(x: float, digits: int = 3) -> str:
    s = f"{x:.{digits}f}".rstrip("0").rstrip(".")
    return "0" if s in ("-0", "") else s


def emit_gcode(plans: Sequence, profile: PrintProfile, header: str = DEFAULT_HEADER,
               footer: str = DEFAULT_FOOTER) -> str:
    """Marlin G-code: a travel to each path start, then one G1 per segment of the closed path."""
    lines = [header.rstrip("\n")]
    e = 0.0
    feed = _fmt(profile.speed * 60, 1)
    travel = _fmt(profile.travel_speed * 60, 1)
    for index, plan in enumerate(plans):
        lines.append(f";LAYER:{index} Z:{_fmt(plan.z)}")
        lines.append(f"G0 F{travel} Z{_fmt(plan.z)}")
        for path in plan.toolpaths:
            pts = np.asarray(path, dtype=float)
            if len(pts) < 2:
                continue
            lines.append(f"G0 F{travel} X{_fmt(pts[0, 0])} Y{_fmt(pts[0, 1])}")
            lines.append(f"G1 F{feed}")
            prev = pts[0]
            for p in np.vstack([pts[1:], pts[:1]]):
                e += profile.extrusion(float(np.hypot(*(p - prev))))
                lines.append(f"G1 X{_fmt(p[0])} Y{_fmt(p[1])} E{_fmt(e, 5)}")
                prev = p
    lines.append(footer.rstrip("\n"))
    return "\n".join(lines) + "\n"


_WORD = re.compile(r"([GXYZEF])(-?\d+(?:\.\d*)?)")


@dataclass
class ParsedMove:
    layer: int
    start: tuple[float, float]
    end: tuple[float, float]
    z: float
    extruded: float

    @property
    def length(self) -> float:
        return math.dist(self.start, self.end)


def parse_gcode(text: str) -> list[ParsedMove]:
    """Extruding moves of a G-code file (absolute coordinates and extrusion)."""
    x = y = z = e = 0.0
    layer = -1
    moves = []
    for raw in text.splitlines():
        if raw.startswith(";LAYER:"):
            layer = int(raw.split()[0].split(":")[1])
        line = raw.split(";", 1)[0]
        if not line.strip():
            continue
        words = dict((k, float(v)) for k, v in _WORD.findall(line))
        if words.get("G") not in (0.0, 1.0):
            if line.startswith("G92") and "E" in words:
                e = words["E"]
            continue
        nx, ny, nz = words.get("X", x), words.get("Y", y), words.get("Z", z)
        ne = words.get("E", e)
        if ne > e and (nx, ny) != (x, y):
            moves.append(ParsedMove(layer, (x, y), (nx, ny), nz, ne - e))
        x, y, z, e = nx, ny, nz, ne
    return moves


def gcode_volume(text: str, profile: PrintProfile) -> float:
    """Deposited volume implied by the extrusion amounts."""
    return sum(m.extruded for m in parse_gcode(text)) * profile.filament_area


# ---------------------------------------------------------------- svg

WALL_COLOR = "#d62728"
INFILL_COLOR = "#1f77b4"


def _path_d(pts: np.ndarray) -> str:
    head = f"M{_fmt(pts[0, 0])} {_fmt(pts[0, 1])}"
    return head + "".join(f" L{_fmt(p[0])} {_fmt(p[1])}" for p in pts[1:]) + " Z"


def emit_svg(plan, stroke: float | None = None, show_sources: bool = False,
             heat_tiles: Iterable[tuple[float, float, float, float]] | None = None) -> str:
    """One ``path`` per toolpath, stroke width ``w``, y pointing up.

    With ``show_sources`` the walls and the fitted infill loops are drawn in
    distinct colours instead of the merged path.  ``heat_tiles`` holds
    ``(x, y, size, value)`` squares with value in [0, 1] drawn underneath.
    """
    stroke = stroke if stroke is not None else 0.38
    paths = []
    if show_sources:
        paths += [(p, WALL_COLOR) for p in plan.walls]
        paths += [(p, INFILL_COLOR) for p in plan.infill_loops]
    else:
        paths += [(p, INFILL_COLOR) for p in plan.toolpaths]
    pts_all = [np.asarray(p, dtype=float) for p, _ in paths if len(p)]
    if pts_all:
        allp = np.vstack(pts_all)
        lo, hi = allp.min(axis=0) - stroke, allp.max(axis=0) + stroke
    else:
        lo, hi = np.zeros(2), np.ones(2)
    size = hi - lo
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="{_fmt(lo[0])} {_fmt(-hi[1])} '
           f'{_fmt(size[0])} {_fmt(size[1])}" width="{_fmt(size[0])}mm" height="{_fmt(size[1])}mm">',
           '<g transform="scale(1,-1)">']
    for x, y, s, v in heat_tiles or ():
        v = min(max(v, 0.0), 1.0)
        out.append(f'<rect x="{_fmt(x)}" y="{_fmt(y)}" width="{_fmt(s)}" height="{_fmt(s)}" '
                   f'fill="rgb({int(255 * v)},0,{int(255 * (1 - v))})" fill-opacity="0.4"/>')
    for p, color in paths:
        pts = np.asarray(p, dtype=float)
        if len(pts) < 2:
            continue
        out.append(f'<path d="{_path_d(pts)}" fill="none" stroke="{color}" stroke-width="{_fmt(stroke)}" '
                   'stroke-linecap="round" stroke-linejoin="round"/>')
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_outputs(out_dir, plans: Sequence, profile: PrintProfile, stats: dict,
                  svg: bool = True, name: str = "print") -> dict[str, Path]:
    """Write ``<name>.gcode``, one SVG per layer and ``stats.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    gcode = out / f"{name}.gcode"
    gcode.write_text(emit_gcode(plans, profile))
    files["gcode"] = gcode
    if svg:
        svg_dir = out / "layers"
        svg_dir.mkdir(exist_ok=True)
        digits = max(4, len(str(len(plans))))
        for i, plan in enumerate(plans):
            (svg_dir / f"layer_{i:0{digits}d}.svg").write_text(emit_svg(plan, profile.w))
        files["svg"] = svg_dir
    path = out / "stats.json"
    path.write_text(json.dumps(stats, indent=1, sort_keys=True) + "\n")
    files["stats"] = path
    return files
