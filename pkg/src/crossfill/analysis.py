"""Measurements on generated structures: realized density, local error, compensation.

Structures for measurement are whole cubes: the layer curves are used directly,
without walls or fitting, so the extruded volume is exactly
``sum(length) * w * layer_height``.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import PchipInterpolator

from .density_field import DensityField, integrate_prism
from .forest import Forest
from .grading import GradingReport, grade
from .infill_fit import LayerPlan
from .slicing import prevent_overlap, trace_layers
from .surface import enforce_continuity

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Box:
    x0: float
    y0: float
    z0: float
    x1: float
    y1: float
    z1: float

    @classmethod
    def cube(cls, size: float, origin=(0.0, 0.0, 0.0)) -> "Box":
        x, y, z = origin
        return cls(x, y, z, x + size, y + size, z + size)

    @property
    def volume(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0) * (self.z1 - self.z0)


# ---------------------------------------------------------------- realized density


def _split_lengths(a: np.ndarray, b: np.ndarray, x0: float, y0: float, k: float, nx: int, ny: int) -> np.ndarray:
    """Length of the segments ``a -> b`` inside each cell of an ``nx`` by ``ny`` grid of pitch ``k``.

    Segments are cut exactly at grid lines; parts outside the grid are dropped.
    """
    out = np.zeros((nx, ny))
    if len(a) == 0:
        return out
    ts = [np.zeros(len(a)), np.ones(len(a))]
    seg_ids = [np.arange(len(a)), np.arange(len(a))]
    for axis, origin in ((0, x0), (1, y0)):
        ia = np.floor((a[:, axis] - origin) / k)
        ib = np.floor((b[:, axis] - origin) / k)
        lo = np.minimum(ia, ib).astype(np.int64)
        n = np.abs(ib - ia).astype(np.int64)
        if n.sum() == 0:
            continue
        sid = np.repeat(np.arange(len(a)), n)
        offs = np.arange(n.sum()) - np.repeat(np.cumsum(n) - n, n)
        line = origin + k * (lo[sid] + 1 + offs)
        d = b[sid, axis] - a[sid, axis]
        ts.append((line - a[sid, axis]) / d)
        seg_ids.append(sid)
    t = np.concatenate(ts)
    sid = np.concatenate(seg_ids)
    order = np.lexsort((t, sid))
    t, sid = t[order], sid[order]
    same = sid[1:] == sid[:-1]
    t0, t1, s = t[:-1][same], t[1:][same], sid[:-1][same]
    seg = b - a
    length = np.hypot(seg[:, 0], seg[:, 1])
    mid = a[s] + 0.5 * (t0 + t1)[:, None] * seg[s]
    ix = np.floor((mid[:, 0] - x0) / k).astype(np.int64)
    iy = np.floor((mid[:, 1] - y0) / k).astype(np.int64)
    ok = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny)
    np.add.at(out, (ix[ok], iy[ok]), ((t1 - t0) * length[s])[ok])
    return out


def _segments(path: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pts = np.asarray(path, dtype=float)
    return pts, np.roll(pts, -1, axis=0)


def realized_volume(plans: Sequence[LayerPlan], region: Box, w: float, layer_height: float) -> float:
    """Extruded volume inside ``region``; a layer belongs to it when its z is in [z0, z1)."""
    total = 0.0
    for plan in plans:
        if not region.z0 <= plan.z < region.z1:
            continue
        for path in plan.toolpaths:
            a, b = _segments(path)
            total += _clip_rect_lengths(a, b, region).sum()
    return total * w * layer_height


def _clip_rect_lengths(a: np.ndarray, b: np.ndarray, r: Box) -> np.ndarray:
    """Liang-Barsky clipped segment lengths against the region's rectangle."""
    d = b - a
    t0 = np.zeros(len(a))
    t1 = np.ones(len(a))
    for axis, lo, hi in ((0, r.x0, r.x1), (1, r.y0, r.y1)):
        da = d[:, axis]
        with np.errstate(divide="ignore", invalid="ignore"):
            ta = (lo - a[:, axis]) / da
            tb = (hi - a[:, axis]) / da
        flat = da == 0
        inside = (a[:, axis] >= lo) & (a[:, axis] < hi)
        enter = np.where(flat, np.where(inside, 0.0, 1.0), np.minimum(ta, tb))
        leave = np.where(flat, np.where(inside, 1.0, 0.0), np.maximum(ta, tb))
        t0 = np.maximum(t0, enter)
        t1 = np.minimum(t1, leave)
    return np.clip(t1 - t0, 0.0, None) * np.hypot(d[:, 0], d[:, 1])


def realized_density(plans: Sequence[LayerPlan], region: Box, w: float, layer_height: float) -> float:
    """Extruded volume in ``region`` over the region's volume."""
    if not plans:
        return 0.0
    return realized_volume(plans, region, w, layer_height) / region.volume


# ---------------------------------------------------------------- local error


def box_mean_density(field: DensityField, box: Box) -> float:
    square = [(box.x0, box.y0), (box.x1, box.y0), (box.x1, box.y1), (box.x0, box.y1)]
    weighted, volume = integrate_prism(field, square, box.z0, box.z1)
    return weighted / volume


def realized_grid(plans: Sequence[LayerPlan], box: Box, kernel: float, w: float,
                  layer_height: float) -> np.ndarray:
    """Realized density of every full ``kernel``-sized subcube of ``box``, indexed [ix, iy, iz].

    The volume of a subcube is counted as the slabs of the layers assigned to it,
    so the result does not depend on how layers align with subcube boundaries.
    """
    n = [int(math.floor((hi - lo) / kernel + 1e-9)) for lo, hi in
         ((box.x0, box.x1), (box.y0, box.y1), (box.z0, box.z1))]
    lengths = np.zeros(n)
    layers = np.zeros(n[2])
    for plan in plans:
        iz = int(math.floor((plan.z - box.z0) / kernel))
        if not 0 <= iz < n[2]:
            continue
        layers[iz] += 1
        for path in plan.toolpaths:
            a, b = _segments(path)
            lengths[:, :, iz] += _split_lengths(a, b, box.x0, box.y0, kernel, n[0], n[1])
    with np.errstate(invalid="ignore", divide="ignore"):
        dens = lengths * w * layer_height / (kernel * kernel * layers * layer_height)
    return np.nan_to_num(dens)


def spec_grid(field: DensityField, box: Box, kernel: float) -> np.ndarray:
    n = [int(math.floor((hi - lo) / kernel + 1e-9)) for lo, hi in
         ((box.x0, box.x1), (box.y0, box.y1), (box.z0, box.z1))]
    out = np.zeros(n)
    for i in range(n[0]):
        for j in range(n[1]):
            for k in range(n[2]):
                sub = Box(box.x0 + i * kernel, box.y0 + j * kernel, box.z0 + k * kernel,
                          box.x0 + (i + 1) * kernel, box.y0 + (j + 1) * kernel, box.z0 + (k + 1) * kernel)
                out[i, j, k] = box_mean_density(field, sub)
    return out


def local_error_curve(spec: DensityField, plans: Sequence[LayerPlan], kernel_sizes: Sequence[float],
                      box: Box, w: float, layer_height: float,
                      compensation: "CompensationCurve | None" = None) -> list[tuple[float, float]]:
    """Mean over subcubes of |spec mean - realized| for each kernel size.

    With ``compensation`` the realized densities are first mapped back to the
    simplified densities they correspond to, so the structure is compared with
    the spec it was generated from.
    """
    out = []
    for k in kernel_sizes:
        real = realized_grid(plans, box, k, w, layer_height)
        if compensation is not None:
            real = compensation.inverse(real)
        want = spec_grid(spec, box, k)
        out.append((float(k), float(np.mean(np.abs(want - real))) if real.size else 0.0))
    return out


# ---------------------------------------------------------------- test specs


def homogeneous_spec(density: float, size: float, n: int = 1) -> DensityField:
    return DensityField.uniform(density, size, n)


def gradient_spec(size: float, lo: float = 0.1, hi: float = 0.4, n: int = 64) -> DensityField:
    """Linear ramp along the cube's main diagonal."""
    return DensityField.from_function(lambda x, y, z: lo + (hi - lo) * (x + y + z) / (3 * size), size, n)


def contrast_plane_spec(size: float, lo: float = 0.1, hi: float = 0.4, n: int = 64,
                        azimuth_deg: float = 22.5, overhang_deg: float = 45.0) -> DensityField:
    """Two halves split by a plane through the centre, turned in-plane and tilted."""
    a, t = math.radians(azimuth_deg), math.radians(overhang_deg)
    normal = np.array([math.cos(a) * math.sin(t), math.sin(a) * math.sin(t), math.cos(t)])
    c = 0.5 * size

    def fn(x, y, z):
        side = (x - c) * normal[0] + (y - c) * normal[1] + (z - c) * normal[2]
        return np.where(side > 0, hi, lo)

    return DensityField.from_function(fn, size, n)


def sphere_shell_spec(size: float, shell: float = 0.4, rest: float = 0.1, n: int = 64) -> DensityField:
    """Shell of the inscribed sphere, one seventh of the side thick."""
    r, thick, c = 0.5 * size, size / 7.0, 0.5 * size

    def fn(x, y, z):
        d = np.sqrt((x - c) ** 2 + (y - c) ** 2 + (z - c) ** 2)
        return np.where((d <= r) & (d >= r - thick), shell, rest)

    return DensityField.from_function(fn, size, n)


TEST_SPECS: dict[str, Callable[[float], DensityField]] = {
    "homogeneous_20": lambda s: homogeneous_spec(0.2, s),
    "homogeneous_40": lambda s: homogeneous_spec(0.4, s),
    "gradient": gradient_spec,
    "contrast_plane": contrast_plane_spec,
    "sphere_shell": sphere_shell_spec,
}


# ---------------------------------------------------------------- pipeline on a cube


def cube_layer_heights(size: float, layer_height: float) -> tuple[np.ndarray, float]:
    """Slab centres of an integral number of layers filling ``size``; returns (zs, actual height)."""
    n = max(1, round(size / layer_height))
    h = size / n
    return (np.arange(n) + 0.5) * h, h


@dataclass
class Structure:
    forest: Forest
    plans: list[LayerPlan]
    report: GradingReport
    layer_height: float
    timings: dict[str, float] = field(default_factory=dict)

    @property
    def box(self) -> Box:
        return Box.cube(self.forest.l_init)

    def realized_density(self) -> float:
        return realized_density(self.plans, self.box, self.forest.w, self.layer_height)


def cube_plans(forest: Forest, layer_height: float, w: float | None = None) -> tuple[list[LayerPlan], float]:
    """Continuity enforcement, tracing and overlap prevention over the whole cube."""
    w = w if w is not None else forest.w
    surface = enforce_continuity(forest)
    zs, h = cube_layer_heights(forest.l_init, layer_height)
    plans = []
    for curve in trace_layers(surface, zs, w=w):
        curve = prevent_overlap(curve, forest, w)
        plans.append(LayerPlan(z=float(curve.z), toolpaths=[curve.points]))
    return plans, h


def build_structure(spec: DensityField, l_init: float, w: float, layer_height: float = 0.1,
                    dithering: bool = True, max_depth: int | None = None) -> Structure:
    t0 = time.perf_counter()
    forest = Forest(l_init, w, max_depth)
    report = grade(forest, spec, use_dithering=dithering)
    t1 = time.perf_counter()
    plans, h = cube_plans(forest, layer_height, w)
    t2 = time.perf_counter()
    return Structure(forest, plans, report, h, {"grading": t1 - t0, "toolpaths": t2 - t1})


# ---------------------------------------------------------------- compensation


@dataclass
class CompensationCurve:
    """Monotone map from simplified density to realized density, with its inverse."""

    simplified: np.ndarray
    realized: np.ndarray
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        x = np.asarray(self.simplified, dtype=float)
        y = np.asarray(self.realized, dtype=float)
        order = np.argsort(x, kind="stable")
        self.simplified, self.realized = x[order], y[order]
        xs, ys = _smoothed(self.simplified, self.realized)
        self._fx, self._fy = xs, ys
        self._forward = PchipInterpolator(xs, ys, extrapolate=False)
        # the inverse reads a dense table of the forward map, so both agree between knots
        self._table_x = np.linspace(xs[0], xs[-1], 8193)
        self._table_y = np.maximum.accumulate(self._forward(self._table_x))

    @property
    def realized_range(self) -> tuple[float, float]:
        return float(self._fy[0]), float(self._fy[-1])

    def __call__(self, simplified):
        x = np.clip(np.asarray(simplified, dtype=float), self._fx[0], self._fx[-1])
        return self._forward(x)

    def inverse(self, realized):
        lo, hi = self.realized_range
        y = np.clip(np.asarray(realized, dtype=float), lo, hi)
        return np.interp(y, self._table_y, self._table_x)

    def to_dict(self) -> dict:
        return {"simplified": [float(v) for v in self.simplified],
                "realized": [float(v) for v in self.realized],
                "warnings": list(self.warnings)}

    @classmethod
    def from_dict(cls, data: dict) -> "CompensationCurve":
        return cls(np.array(data["simplified"]), np.array(data["realized"]), list(data.get("warnings", [])))


def _smoothed(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Three-point local average, then the running maximum so the fit is monotone."""
    if len(y) >= 3:
        pad = np.concatenate([[y[0]], y, [y[-1]]])
        avg = (pad[:-2] + pad[1:-1] + pad[2:]) / 3.0
        avg[0], avg[-1] = y[0], y[-1]
    else:
        avg = y.copy()
    avg = np.maximum.accumulate(avg)
    # unique x for interpolation
    xs, idx = np.unique(x, return_index=True)
    return xs, avg[idx]


def _calibration_sample(args) -> tuple[float, float]:
    s, l_init, w, layer_height, max_depth = args
    if s <= 0:
        return s, 0.0
    st = build_structure(homogeneous_spec(s, l_init), l_init, w, layer_height, True, max_depth)
    return s, st.realized_density()


def full_density_depth(l_init: float, w: float) -> int:
    """Depth at which route-A cells reach 100 % simplified density."""
    return 2 * round(math.log2(l_init / w)) - 1


def calibrate_compensation(l_init: float, w: float, densities: Sequence[float], layer_height: float = 0.1,
                           max_depth: int | None = None, threads: int = 1,
                           tolerance: float = 0.01) -> CompensationCurve:
    """Measure realized density of homogeneous cubes and fit the compensation curve.

    ``max_depth`` defaults to the depth that allows the full simplified range.
    Raw samples that decrease by more than ``tolerance`` are listed in
    ``warnings``.
    """
    max_depth = full_density_depth(l_init, w) if max_depth is None else max_depth
    jobs = [(float(s), l_init, w, layer_height, max_depth) for s in densities]
    if 0.0 not in [j[0] for j in jobs]:
        jobs.insert(0, (0.0, l_init, w, layer_height, max_depth))
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_calibration_sample, jobs))
    else:
        results = [_calibration_sample(j) for j in jobs]
    results.sort()
    xs = np.array([r[0] for r in results])
    ys = np.array([r[1] for r in results])
    warnings = []
    for i in range(1, len(ys)):
        drop = ys[:i].max() - ys[i]
        if drop > tolerance:
            warnings.append(f"realized density drops by {drop:.4f} at simplified {xs[i]:.4f}")
    for msg in warnings:
        logger.warning(msg)
    return CompensationCurve(xs, ys, warnings)


# ---------------------------------------------------------------- export


def curves_to_csv(curves: dict[str, list[tuple[float, float]]]) -> str:
    """Long-format CSV: name, kernel, mean_abs_error."""
    buf = io.StringIO()
    out = csv.writer(buf, lineterminator="\n")
    out.writerow(["name", "kernel", "mean_abs_error"])
    for name in sorted(curves):
        for k, e in curves[name]:
            out.writerow([name, f"{k:.6g}", f"{e:.6g}"])
    return buf.getvalue()


def compensation_to_csv(curve: CompensationCurve) -> str:
    buf = io.StringIO()
    out = csv.writer(buf, lineterminator="\n")
    out.writerow(["simplified", "realized", "fitted"])
    for x, y in zip(curve.simplified, curve.realized):
        out.writerow([f"{x:.6g}", f"{y:.6g}", f"{float(curve(x)):.6g}"])
    return buf.getvalue()
