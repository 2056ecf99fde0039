"""Command-line front end: ``crossfill slice | calibrate | accuracy | dump-forest``."""

from __future__ import annotations

import json
import logging
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import click
import numpy as np
import tomli

from . import analysis
from .density_field import CellTargets, DensityField, DensityFieldError, GrayMap, load_image_stack
from .export import PrintProfile, write_outputs
from .forest import Forest
from .geometry import (GeometryError, PolygonSet, from_shapely, load_layer_json, load_stl, polygon_set_area,
                       slice_mesh, to_shapely)
from .grading import build_lower_bound, dither, enforce_skin_support, leaves_per_depth
from .infill_fit import UnbridgeableError, plan_layer, wall_loops
from .slicing import prevent_overlap, trace_layers
from .surface import enforce_continuity

logger = logging.getLogger("crossfill")


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"{stage}: {message}")


@dataclass
class RunConfig:
    model: str | None = None
    density: str | None = None
    gray_zero: float = 0.0
    gray_full: float = 255.0
    voxel_size: tuple[float, float, float] = (1.0, 1.0, 1.0)
    density_origin: tuple[float, float, float] | None = None
    profile: PrintProfile = field(default_factory=PrintProfile)
    l_init: float | None = None
    max_depth: int | None = None
    walls: int = 2
    separate_outer_wall: bool = False
    on_unbridgeable: str = "separate"
    dithering: bool = True
    skin_min_level: int = 0
    top_skin_thickness: float = 0.8
    compensation: str | None = None
    output: str = "out"
    svg: bool = True
    threads: int = 1
    # calibrate / accuracy
    calibration_exponent: int = 5
    calibration_samples: int = 17
    specs: tuple[str, ...] = tuple(analysis.TEST_SPECS)
    accuracy_exponent: int = 6
    kernels: tuple[float, ...] = (2.0, 4.0, 8.0, 16.0, 32.0)  # multiples of w

    @classmethod
    def load(cls, path: str | None, overrides: dict[str, Any]) -> "RunConfig":
        data: dict[str, Any] = {}
        if path:
            with open(path, "rb") as fh:
                doc = tomli.load(fh)
            for key, value in doc.items():
                if isinstance(value, dict):
                    data.update(value)
                else:
                    data[key] = value
        data.update({k: v for k, v in overrides.items() if v is not None})
        prof = {f.name: data.pop(f.name) for f in fields(PrintProfile) if f.name in data}
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise click.UsageError(f"unknown config keys: {', '.join(unknown)}")
        for key in ("voxel_size", "density_origin", "specs", "kernels"):
            if data.get(key) is not None:
                data[key] = tuple(data[key])
        cfg = cls(**data)
        try:
            cfg.profile = PrintProfile(**prof)
        except (TypeError, ValueError) as exc:
            raise click.UsageError(str(exc)) from exc
        return cfg


# ---------------------------------------------------------------- sizing


def auto_l_init(extent: float, w: float) -> float:
    """Smallest ``2^i * w`` that is at least ``extent``."""
    i = max(0, math.ceil(math.log2(extent / w) - 1e-9))
    return (2 ** i) * w


def check_l_init(l_init: float, extent: float, w: float) -> None:
    ratio = l_init / w
    i = round(math.log2(ratio))
    if not math.isclose(2.0 ** i, ratio, rel_tol=1e-9):
        raise click.UsageError(f"l_init {l_init} is not a power-of-two multiple of w={w}")
    if l_init < extent - 1e-9:
        raise click.UsageError(f"l_init {l_init} does not enclose the model (extent {extent:.3f})")


# ---------------------------------------------------------------- pipeline


def load_layers(cfg: RunConfig) -> list[tuple[float, PolygonSet]]:
    path = Path(cfg.model)
    p = cfg.profile
    try:
        if path.suffix.lower() == ".json":
            return load_layer_json(path)
        return slice_mesh(load_stl(path), p.layer_height, p.first_layer_z)
    except OSError as exc:
        raise StageError("model", str(exc)) from exc
    except GeometryError as exc:
        raise StageError("model", str(exc)) from exc


def top_skins(layers: list[tuple[float, PolygonSet]], thickness: float) -> list[tuple[float, PolygonSet]]:
    """Parts of each layer with no model somewhere within ``thickness`` above."""
    regions = [(z, to_shapely(polys)) for z, polys in layers]
    top = regions[-1][0]
    out = []
    for k, (z, region) in enumerate(regions):
        if z + thickness > top + 1e-9:
            skin = region
        else:
            cover = region
            for z2, other in regions[k + 1:]:
                if z2 - z > thickness + 1e-9:
                    break
                cover = cover.intersection(other)
            skin = region.difference(cover)
        if not skin.is_empty and skin.area > 1e-6:
            out.append((z, from_shapely(skin)))
    return out


def _bounds(layers) -> tuple[np.ndarray, np.ndarray]:
    pts = np.vstack([p for _, polys in layers for p in polys])
    zs = [z for z, _ in layers]
    return np.array([*pts.min(axis=0), min(zs)]), np.array([*pts.max(axis=0), max(zs)])


def load_density(cfg: RunConfig, origin) -> DensityField:
    if not cfg.density:
        raise click.UsageError("no density stack given (--density)")
    org = cfg.density_origin if cfg.density_origin is not None else tuple(origin)
    try:
        field_ = load_image_stack(cfg.density, GrayMap(cfg.gray_zero, cfg.gray_full), cfg.voxel_size, org)
    except DensityFieldError as exc:
        if "no density images" in str(exc):
            raise click.UsageError(f"density stack {cfg.density!r} matched no images") from exc
        raise StageError("density", str(exc)) from exc
    if cfg.compensation:
        curve = analysis.CompensationCurve.from_dict(json.loads(Path(cfg.compensation).read_text()))
        field_ = replace(field_, values=np.clip(curve.inverse(field_.values), 0.0, 1.0))
    return field_


def _prepare(cfg: RunConfig):
    """Layers, forest side length, model offset of the forest origin, and density field."""
    p = cfg.profile
    layers = [(z, polys) for z, polys in load_layers(cfg) if polys]
    if not layers:
        raise StageError("model", "the model has no cross-sections")
    lo, hi = _bounds(layers)
    lo[2] = layers[0][0] - 0.5 * p.layer_height
    hi[2] = layers[-1][0] + 0.5 * p.layer_height
    extent = float(np.max(hi - lo))
    if cfg.l_init is not None:
        check_l_init(cfg.l_init, extent, p.w)
        l_init = cfg.l_init
    else:
        l_init = auto_l_init(extent, p.w)
    offset = (float(lo[0]), float(lo[1]), float(lo[2]))
    return layers, l_init, offset, load_density(cfg, lo)


def run_slice(cfg: RunConfig) -> tuple[list, dict]:
    """Full pipeline; returns the layer plans and the statistics document."""
    p = cfg.profile
    w = p.w
    layers, l_init, offset, field_ = _prepare(cfg)
    forest = Forest(l_init, w, cfg.max_depth)
    targets = CellTargets(forest, field_, offset)
    build_lower_bound(forest, targets)
    report = dither(forest, targets) if cfg.dithering else None
    skin_splits = 0
    if cfg.skin_min_level > 0:
        skin_splits = enforce_skin_support(forest, top_skins(layers, cfg.top_skin_thickness),
                                           cfg.skin_min_level, offset)
    surface = enforce_continuity(forest)
    zs = [z - offset[2] for z, _ in layers]
    curves = trace_layers(surface, zs, w=w)

    def make(args):
        (z, polys), curve = args
        curve = prevent_overlap(curve, forest, w)
        pts = curve.points + np.array(offset[:2])
        try:
            return curve.length, plan_layer(pts, polys, w, cfg.walls, z, cfg.separate_outer_wall,
                                            on_unbridgeable=cfg.on_unbridgeable)
        except UnbridgeableError as exc:
            raise StageError("infill_fit", f"layer z={z:.3f}: {exc}") from exc

    with ThreadPoolExecutor(max_workers=max(1, cfg.threads)) as pool:
        results = list(pool.map(make, zip(layers, curves)))
    plans = [pl for _, pl in results]
    curve_len = sum(length for length, _ in results)

    infill_len = sum(float(np.hypot(*np.diff(np.vstack([l, l[:1]]), axis=0).T).sum())
                     for pl in plans for l in pl.infill_loops)
    infill_area = 0.0
    for _, polys in layers:
        infill_area += polygon_set_area(wall_loops(polys, cfg.walls, w)[2])
    total_len = sum(pl.extrusion_length() for pl in plans)
    stats = {
        "l_init": l_init,
        "forest_origin": list(offset),
        "max_depth": forest.max_depth,
        "leaves_per_depth": {str(k): v for k, v in leaves_per_depth(forest).items()},
        "layers": len(plans),
        "bridges": sum(len(pl.bridges) for pl in plans),
        "unbridged_loops": sum(pl.unbridged for pl in plans),
        "extruded_volume": total_len * w * p.layer_height,
        "structure_density": curve_len * w / (l_init * l_init * len(plans)),
        "infill_density": infill_len * w / infill_area if infill_area > 0 else 0.0,
        "skin_subdivisions": skin_splits,
    }
    if report is not None:
        stats["grading"] = {"target_mass": report.target_mass, "realized_mass": report.realized_mass,
                            "dropped_error": report.dropped_error,
                            "dithered_subdivisions": report.dithered_subdivisions}
    return plans, stats


# ---------------------------------------------------------------- commands


def _fail(exc: Exception) -> None:
    click.echo(f"error: {exc}", err=True)
    sys.exit(1)


@click.group()
@click.option("-v", "--verbose", count=True)
def main(verbose: int) -> None:
    """Graded, self-supporting, single-path foam infill."""
    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2), format="%(levelname)s %(name)s: %(message)s")


def _common(f):
    opts = [
        click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False)),
        click.option("--out", "output"),
        click.option("--threads", type=int),
        click.option("--w", "w", type=float),
        click.option("--layer-height", type=float),
    ]
    for o in reversed(opts):
        f = o(f)
    return f


def _config(config_path, **overrides) -> RunConfig:
    return RunConfig.load(config_path, overrides)


@main.command("slice")
@_common
@click.option("--model", type=click.Path())
@click.option("--density", help="glob of gray-scale density images")
@click.option("--voxel-size", type=float, nargs=3)
@click.option("--gray-zero", type=float)
@click.option("--gray-full", type=float)
@click.option("--l-init", type=float)
@click.option("--max-depth", type=int)
@click.option("--walls", type=int)
@click.option("--compensation", type=click.Path(exists=True, dir_okay=False))
@click.option("--on-unbridgeable", type=click.Choice(["error", "separate"]),
              help="fail, or print loops with no bridge within 1.5w as separate paths")
@click.option("--no-svg", "svg", flag_value=False, default=None)
def cmd_slice(config_path, **opts) -> None:
    """Generate G-code, per-layer SVG and stats.json for a model."""
    cfg = _config(config_path, **opts)
    if not cfg.model:
        raise click.UsageError("no model given (--model)")
    if not Path(cfg.model).exists():
        raise click.UsageError(f"model {cfg.model!r} does not exist")
    try:
        plans, stats = run_slice(cfg)
        files = write_outputs(cfg.output, plans, cfg.profile, stats, cfg.svg)
    except (StageError, ValueError, RuntimeError) as exc:
        _fail(exc)
    click.echo(f"wrote {files['gcode']}")


@main.command("calibrate")
@_common
@click.option("--exponent", "calibration_exponent", type=int, help="cube side is 2^exponent * w")
@click.option("--samples", "calibration_samples", type=int)
def cmd_calibrate(config_path, **opts) -> None:
    """Measure realized against simplified density and write compensation.json."""
    cfg = _config(config_path, **opts)
    w = cfg.profile.w
    l_init = 2 ** cfg.calibration_exponent * w
    densities = np.linspace(0.01, 0.80, cfg.calibration_samples)
    try:
        curve = analysis.calibrate_compensation(l_init, w, densities, cfg.profile.layer_height,
                                                threads=cfg.threads)
    except (ValueError, RuntimeError) as exc:
        _fail(exc)
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    (out / "compensation.json").write_text(json.dumps(curve.to_dict(), indent=1) + "\n")
    (out / "compensation.csv").write_text(analysis.compensation_to_csv(curve))
    for msg in curve.warnings:
        click.echo(f"warning: {msg}", err=True)
    click.echo(f"wrote {out / 'compensation.json'}")


@main.command("accuracy")
@_common
@click.option("--spec", "specs", multiple=True, type=click.Choice(sorted(analysis.TEST_SPECS)))
@click.option("--exponent", "accuracy_exponent", type=int)
@click.option("--no-dithering", "dithering", flag_value=False, default=None)
def cmd_accuracy(config_path, **opts) -> None:
    """Local error against kernel size for the procedural test specs."""
    opts["specs"] = opts["specs"] or None
    cfg = _config(config_path, **opts)
    w = cfg.profile.w
    l_init = 2 ** cfg.accuracy_exponent * w
    kernels = [k * w for k in cfg.kernels]
    curves = {}
    try:
        for name in cfg.specs:
            spec = analysis.TEST_SPECS[name](l_init)
            st = analysis.build_structure(spec, l_init, w, cfg.profile.layer_height, cfg.dithering)
            curves[name] = analysis.local_error_curve(spec, st.plans, kernels, st.box, w, st.layer_height)
    except (ValueError, RuntimeError) as exc:
        _fail(exc)
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    (out / "stats.json").write_text(json.dumps({"local_error": curves}, indent=1, sort_keys=True) + "\n")
    (out / "local_error.csv").write_text(analysis.curves_to_csv(curves))
    click.echo(f"wrote {out / 'local_error.csv'}")


@main.command("dump-forest")
@_common
@click.option("--model", type=click.Path())
@click.option("--density")
@click.option("--voxel-size", type=float, nargs=3)
@click.option("--l-init", type=float)
@click.option("--max-depth", type=int)
def cmd_dump_forest(config_path, **opts) -> None:
    """Grade the forest for a model and density stack and write forest.json."""
    cfg = _config(config_path, **opts)
    if not cfg.model:
        raise click.UsageError("no model given (--model)")
    try:
        _, l_init, offset, field_ = _prepare(cfg)
        forest = Forest(l_init, cfg.profile.w, cfg.max_depth)
        targets = CellTargets(forest, field_, offset)
        build_lower_bound(forest, targets)
        if cfg.dithering:
            dither(forest, targets)
    except (StageError, ValueError, RuntimeError) as exc:
        _fail(exc)
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    (out / "forest.json").write_text(forest.to_json())
    click.echo(f"wrote {out / 'forest.json'}")


if __name__ == "__main__":
    main()
