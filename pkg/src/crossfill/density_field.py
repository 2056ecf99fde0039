"""Voxel density specification and its integration over prism cells."""

from __future__ import annotations

import glob as globmod
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)


class DensityFieldError(ValueError):
    pass


@dataclass(frozen=True)
class GrayMap:
    """Linear map from gray value to density; values outside are clamped."""

    gray_at_zero: float = 0.0
    gray_at_full: float = 255.0
    density_at_zero: float = 0.0
    density_at_full: float = 1.0

    def __call__(self, gray: np.ndarray) -> np.ndarray:
        t = (np.asarray(gray, dtype=float) - self.gray_at_zero) / (self.gray_at_full - self.gray_at_zero)
        t = np.clip(t, 0.0, 1.0)
        return np.clip(self.density_at_zero + t * (self.density_at_full - self.density_at_zero), 0.0, 1.0)


@dataclass(frozen=True, eq=False)
class DensityField:
    """Piecewise-constant densities on an axis-aligned voxel grid.

    ``values`` is indexed ``[ix, iy, iz]``.  Outside the grid the nearest voxel
    applies, which is the same as clamping indices onto the grid.
    """

    values: np.ndarray
    voxel_size: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 3 or min(v.shape) < 1:
            raise DensityFieldError("density grid must be a non-empty 3D array")
        if np.any(v < 0) or np.any(v > 1) or not np.all(np.isfinite(v)):
            raise DensityFieldError("densities must lie in [0, 1]")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "voxel_size", tuple(float(s) for s in np.broadcast_to(self.voxel_size, (3,))))
        object.__setattr__(self, "origin", tuple(float(s) for s in self.origin))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    def edges(self, axis: int) -> np.ndarray:
        n = self.values.shape[axis]
        return self.origin[axis] + self.voxel_size[axis] * np.arange(n + 1)

    @classmethod
    def uniform(cls, density: float, size: float, n: int = 1) -> "DensityField":
        return cls(np.full((n, n, n), float(density)), (size / n,) * 3)

    @classmethod
    def from_function(cls, fn, size: float, n: int, origin=(0.0, 0.0, 0.0)) -> "DensityField":
        """Sample ``fn(x, y, z)`` (vectorised, mm) at voxel centres of an n^3 grid."""
        h = size / n
        c = origin[0] + h * (np.arange(n) + 0.5)
        x, y, z = np.meshgrid(c, c - origin[0] + origin[1], c - origin[0] + origin[2], indexing="ij")
        return cls(np.clip(fn(x, y, z), 0.0, 1.0), (h, h, h), origin)

    def sample(self, x, y, z):
        """Density at points (nearest-voxel outside the grid)."""
        idx = []
        for axis, coord in enumerate((x, y, z)):
            i = np.floor((np.asarray(coord, dtype=float) - self.origin[axis]) / self.voxel_size[axis]).astype(int)
            idx.append(np.clip(i, 0, self.values.shape[axis] - 1))
        return self.values[tuple(idx)]


def load_image_stack(files: Sequence[str] | str, gray_map: GrayMap | None = None,
                     voxel_size=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> DensityField:
    """Build a field from gray-scale slices; image ``k`` becomes voxel layer ``k``.

    Image rows run along -y so that the picture appears upright when viewed from
    above.
    """
    from PIL import Image, UnidentifiedImageError

    if isinstance(files, str):
        files = sorted(globmod.glob(files))
    files = list(files)
    if not files:
        raise DensityFieldError("no density images given")
    gray_map = gray_map or GrayMap()
    layers = []
    shape = None
    for f in files:
        try:
            with Image.open(f) as im:
                arr = np.asarray(im.convert("L"), dtype=float)
        except (OSError, UnidentifiedImageError) as exc:
            raise DensityFieldError(f"cannot read density image {f}: {exc}") from exc
        if shape is None:
            shape = arr.shape
        elif arr.shape != shape:
            raise DensityFieldError(f"image {Path(f).name} is {arr.shape[1]}x{arr.shape[0]}, expected {shape[1]}x{shape[0]}")
        layers.append(gray_map(arr[::-1, :].T))
    return DensityField(np.stack(layers, axis=2), voxel_size, origin)


# ---------------------------------------------------------------- integration


def _clip_areas(poly: np.ndarray, x0, x1, y0, y1) -> np.ndarray:
    """Area of a convex polygon intersected with each box ``[x0,x1]x[y0,y1]``.

    Vectorised clipping: crossing points are inserted on each clip line and the
    remaining vertices clamped onto it; flattened parts then enclose no area.
    """
    m = len(x0)
    pts = np.broadcast_to(np.asarray(poly, dtype=float), (m,) + np.shape(poly)).copy()
    for axis, bound, upper in ((0, x0, False), (0, x1, True), (1, y0, False), (1, y1, True)):
        b = bound[:, None]
        nxt = np.roll(pts, -1, axis=1)
        a_c, n_c = pts[:, :, axis], nxt[:, :, axis]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (b - a_c) / (n_c - a_c)
        crosses = ((a_c - b) * (n_c - b) < 0)
        t = np.where(crosses, t, 0.0)
        inter = pts + t[:, :, None] * (nxt - pts)
        inter = np.where(crosses[:, :, None], inter, pts)
        out = np.empty((m, 2 * pts.shape[1], 2))
        out[:, 0::2] = pts
        out[:, 1::2] = inter
        out[:, :, axis] = np.minimum(out[:, :, axis], b) if upper else np.maximum(out[:, :, axis], b)
        pts = out
    x, y = pts[:, :, 0], pts[:, :, 1]
    return 0.5 * np.abs(np.sum(x * np.roll(y, -1, axis=1) - np.roll(x, -1, axis=1) * y, axis=1))


def _axis_edges(field: DensityField, axis: int, lo: float, hi: float):
    """Voxel boundaries restricted to [lo, hi], outermost voxels stretched to cover it."""
    e = field.edges(axis)
    n = len(e) - 1
    i0 = int(np.clip(np.searchsorted(e, lo, side="right") - 1, 0, n - 1))
    i1 = int(np.clip(np.searchsorted(e, hi, side="left") - 1, 0, n - 1))
    sub = e[i0:i1 + 2].copy()
    sub[0] = lo
    sub[-1] = hi
    sub = np.clip(sub, lo, hi)
    return i0, sub


def integrate_prism(field: DensityField, triangle, z0: float, z1: float) -> tuple[float, float]:
    """Return (sum Vol(v_i & P) * rho(v_i), sum Vol(v_i & P)) for a triangular prism."""
    tri = np.asarray(triangle, dtype=float)
    lo, hi = tri.min(axis=0), tri.max(axis=0)
    ix0, xe = _axis_edges(field, 0, lo[0], hi[0])
    iy0, ye = _axis_edges(field, 1, lo[1], hi[1])
    iz0, ze = _axis_edges(field, 2, z0, z1)
    nx, ny = len(xe) - 1, len(ye) - 1
    gx, gy = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    gx, gy = gx.ravel(), gy.ravel()
    areas = _clip_areas(tri, xe[gx], xe[gx + 1], ye[gy], ye[gy + 1]).reshape(nx, ny)
    dz = np.diff(ze)
    block = field.values[ix0:ix0 + nx, iy0:iy0 + ny, iz0:iz0 + len(dz)]
    weighted = float(np.einsum("ij,ijk,k->", areas, block, dz))
    volume = float(areas.sum() * dz.sum())
    return weighted, volume


def target_density(field: DensityField, triangle, z0: float, z1: float) -> float:
    weighted, volume = integrate_prism(field, triangle, z0, z1)
    if volume <= 0:
        return float(field.sample(*np.mean(triangle, axis=0), 0.5 * (z0 + z1)))
    return min(1.0, max(0.0, weighted / volume))


def target_mass(field: DensityField, triangle, z0: float, z1: float) -> float:
    tri = np.asarray(triangle, dtype=float)
    (ax, ay), (bx, by) = tri[1] - tri[0], tri[2] - tri[0]
    area = 0.5 * abs(ax * by - ay * bx)
    return target_density(field, tri, z0, z1) * area * (z1 - z0)


def monte_carlo_density(field: DensityField, triangle, z0: float, z1: float,
                        samples: int = 100_000, rng=None) -> float:
    """Independent estimate of the target density by uniform sampling of the prism."""
    rng = np.random.default_rng(rng)
    tri = np.asarray(triangle, dtype=float)
    u, v = rng.random(samples), rng.random(samples)
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    pts = tri[0] + u[:, None] * (tri[1] - tri[0]) + v[:, None] * (tri[2] - tri[0])
    z = z0 + rng.random(samples) * (z1 - z0)
    return float(field.sample(pts[:, 0], pts[:, 1], z).mean())


class CellTargets:
    """Cached target densities/masses of forest cells against one field."""

    def __init__(self, forest, field: DensityField, offset=(0.0, 0.0, 0.0)):
        self.forest = forest
        self.field = field
        self.offset = np.asarray(offset, dtype=float)
        self._density: dict[int, float] = {}

    def density(self, cell) -> float:
        d = self._density.get(cell.id)
        if d is None:
            tri = np.array(self.forest.tri_mm(cell)) + self.offset[:2]
            z0, z1 = self.forest.z_range_mm(cell)
            d = target_density(self.field, tri, z0 + self.offset[2], z1 + self.offset[2])
            self._density[cell.id] = d
        return d

    def mass(self, cell) -> float:
        return self.density(cell) * self.forest.volume(cell)
