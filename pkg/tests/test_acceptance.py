"""Acceptance criteria 1-14, one test each; a PASS/FAIL line per criterion is printed at the end."""

import math
import os
import time
from contextlib import contextmanager

import numpy as np
import pytest
import shapely.geometry as sg
from click.testing import CliRunner
from PIL import Image

from crossfill.analysis import (
    Box,
    TEST_SPECS,
    build_structure,
    calibrate_compensation,
    cube_plans,
    full_density_depth,
    homogeneous_spec,
    local_error_curve,
    realized_density,
)
from crossfill.cli import main
from crossfill.density_field import DensityField, monte_carlo_density, target_density
from crossfill.forest import Forest, uniform_forest
from crossfill.geometry import box_mesh, clip_polyline_to_area, save_stl
from crossfill.grading import build_lower_bound, grade, realized_simplified_mass
from crossfill.infill_fit import BRIDGE_FACTOR, plan_layer
from crossfill.slicing import clearance, leaves_at, prevent_overlap, trace_layer, trace_layers, turning_angles_deg
from crossfill.surface import STEP_TOLERANCE_UNITS, enforce_continuity, reapply_continuity, slice_gaps, vertical_gaps

from .conftest import ACCEPTANCE_RESULTS, SLOTTED_OUTLINE, W, random_field
from .oracles import clip_sampling_oracle, euler_single_loop

pytestmark = pytest.mark.slow


@contextmanager
def criterion(n: int, title: str):
    """Record and print one PASS/FAIL line; failures still propagate."""
    info: dict = {}
    try:
        yield info
    except BaseException as exc:
        line = f"criterion {n:2d} FAIL  {title}: {info.get('detail', '')} [{type(exc).__name__}: {exc}]"
        ACCEPTANCE_RESULTS[n] = line.splitlines()[0]
        print(ACCEPTANCE_RESULTS[n])
        raise
    ACCEPTANCE_RESULTS[n] = f"criterion {n:2d} PASS  {title}: {info.get('detail', '')}"
    print(ACCEPTANCE_RESULTS[n])


# ---------------------------------------------------------------- 1


def test_01_closed_curve_invariant():
    with criterion(1, "uniform layers are simple closed loops turning by 45 or 90 degrees") as info:
        start = time.perf_counter()
        f = Forest(2 ** 6 * W, W, max_depth=11)
        zs = np.arange(0.05, f.l_init, 0.1)
        bad_loops, bad_turns, layers = 0, set(), 0
        for steps in range(11):
            if steps:
                f.subdivide_uniform(1)
            for curve in trace_layers(enforce_continuity(f), zs):
                layers += 1
                if not sg.LinearRing(curve.points).is_simple:
                    bad_loops += 1
                turns = np.round(turning_angles_deg(curve.points), 6)
                bad_turns |= set(turns[turns > 1e-6]) - {45.0, 90.0}
        elapsed = time.perf_counter() - start
        info["detail"] = f"{layers} layers over depths 0-10, {bad_loops} non-simple, {elapsed:.1f} s"
        assert bad_loops == 0
        assert not bad_turns, f"unexpected turning angles {sorted(bad_turns)[:5]}"
        assert elapsed < 10.0


# ---------------------------------------------------------------- 2


def test_02_density_formula():
    with criterion(2, "realized density of uniform structures follows the route-averaged formula") as info:
        size = 2 ** 5 * W
        rows = []
        for depth in range(4, 8):
            f = uniform_forest(size, W, depth - 1, max_depth=depth)
            plans, h = cube_plans(f, 0.1, W)
            real = realized_density(plans, Box.cube(size), W, h)
            l = f.cathetus(next(f.leaves()))
            formula = (W / l) * (math.sqrt(2) + 2) / 3
            rows.append((l / W, real, formula))
        info["detail"] = ", ".join(f"l={l:.2f}w: {r:.4f} vs {e:.4f}" for l, r, e in rows)
        for _, real, formula in rows:
            assert abs(real / formula - 1) <= 0.05
        l, real, _ = rows[-1]
        assert l == pytest.approx(2 * math.sqrt(2))
        assert abs(real - 0.40) <= 0.02


# ---------------------------------------------------------------- 3


def test_03_route_ratio():
    with criterion(3, "route fractions approach one third") as info:
        f = uniform_forest(2 ** 6 * W, W, 9, max_depth=10)
        counts = {r: 0 for r in "ALR"}
        for c in f.leaves():
            assert c.depth == 10
            counts[c.kind.route] += 1
        total = sum(counts.values())
        fractions = {r: n / total for r, n in counts.items()}
        info["detail"] = "depth 10: " + ", ".join(f"{r} {v:.4f}" for r, v in fractions.items())
        assert all(abs(v - 1 / 3) <= 0.01 for v in fractions.values())


# ---------------------------------------------------------------- 4


def test_04_density_cap():
    with criterion(4, "full target density caps the simplified density") as info:
        size = 2 ** 5 * W
        f = Forest(size, W, full_density_depth(size, W))
        grade(f, DensityField.uniform(1.0, size))
        cap = realized_simplified_mass(f) / size ** 3
        info["detail"] = f"max simplified density {cap:.4f} (max depth {f.max_depth})"
        assert abs(cap - 0.8047) <= 0.005


# ---------------------------------------------------------------- 5


def test_05_lower_bound_postcondition():
    with criterion(5, "lower bound leaves cannot take another level; neighbour levels differ by at most 1") as info:
        leaves = 0
        for seed in range(50):
            f = Forest(2 ** 4 * W, W)
            targets = build_lower_bound(f, random_field(seed, f.l_init, lo=0.0, hi=1.0))
            for c in f.leaves():
                leaves += 1
                assert f.mass_after_subdivision(c) >= targets.mass(c) or c.depth == f.max_depth
                assert all(abs(f[n].depth - c.depth) <= 1 for n in c.links())
        info["detail"] = f"50 fields, {leaves} leaves checked"


# ---------------------------------------------------------------- 6, 7


@pytest.fixture(scope="module")
def spec_structures():
    size = 2 ** 6 * W
    start = time.perf_counter()
    dithered, lower = {}, {}
    for name, make in TEST_SPECS.items():
        spec = make(size)
        st = build_structure(spec, size, W)
        dithered[name] = (spec, st)
        if name in ("gradient", "homogeneous_20", "homogeneous_40"):
            lower[name] = (spec, build_structure(spec, size, W, dithering=False))
    return dithered, lower, time.perf_counter() - start


def _error_at(spec, st, kernel):
    ((_, e),) = local_error_curve(spec, st.plans, [kernel], st.box, W, st.layer_height)
    return e


def test_06_dithering_improvement(spec_structures):
    with criterion(6, "dithering lowers local error; spec ranking at kernel 16w") as info:
        dithered, lower, elapsed = spec_structures
        start = time.perf_counter()
        k = 16 * W
        err = {name: _error_at(spec, st, k) for name, (spec, st) in dithered.items()}
        lb = {name: _error_at(spec, st, k) for name, (spec, st) in lower.items()}
        elapsed += time.perf_counter() - start
        info["detail"] = (", ".join(f"{n} {err[n]:.4f}" + (f" (lower bound {lb[n]:.4f})" if n in lb else "")
                                    for n in err) + f"; {elapsed:.0f} s")
        for name in lb:
            assert err[name] < lb[name], name
        easy = max(err["gradient"], err["homogeneous_20"], err["homogeneous_40"])
        assert easy < err["contrast_plane"] < err["sphere_shell"]
        assert elapsed < 120.0


def test_07_mass_accounting(spec_structures):
    with criterion(7, "target minus realized simplified mass equals the dropped error") as info:
        reports = [st.report for _, st in spec_structures[0].values()]
        for seed in range(10):
            f = Forest(2 ** 4 * W, W)
            reports.append(grade(f, random_field(seed, f.l_init)))
        worst = max(abs(r.target_mass - r.realized_mass - r.dropped_error) / r.target_mass for r in reports)
        info["detail"] = f"{len(reports)} dithering runs, worst relative mismatch {worst:.2e}"
        assert worst <= 1e-6


# ---------------------------------------------------------------- 8, 9


@pytest.fixture(scope="module")
def dithered_layers():
    """Traced and overlap-corrected layers of five dithered random-field structures."""
    out = []
    for seed in range(5):
        f = Forest(2 ** 5 * W, W)
        grade(f, random_field(100 + seed, f.l_init))
        zs = np.arange(0.05, f.l_init, 0.1)
        curves = trace_layers(enforce_continuity(f), zs, w=W)
        out.append((f, [prevent_overlap(c, f, W) for c in curves]))
    return out


def test_08_overlap_free_toolpaths(dithered_layers):
    with criterion(8, "clearance between non-adjacent parts of a layer is at least 0.95w") as info:
        rng = np.random.default_rng(8)
        worst, where = math.inf, None
        for f, curves in dithered_layers:
            for k in rng.choice(len(curves), 20, replace=False):
                d, _ = clearance(curves[k])
                if d < worst:
                    worst, where = d, curves[k].z
        info["detail"] = f"100 layers, minimum clearance {worst / W:.3f}w (at z={where:.2f})"
        assert worst >= 0.95 * W


def test_09_self_support(dithered_layers):
    with criterion(9, "each layer lies within the support reach of the layer below") as info:
        h = 0.1
        reach = h * math.tan(math.radians(55.0)) + W / 2
        worst = 0.0
        for _, curves in dithered_layers:
            for lower, upper in zip(curves, curves[1:]):
                ring = sg.LinearRing(lower.points)
                worst = max(worst, max(ring.distance(sg.Point(p)) for p in upper.points))
        info["detail"] = f"largest horizontal step {worst:.4f} mm, reach {reach:.4f} mm"
        assert worst <= reach


# ---------------------------------------------------------------- 10


def test_10_continuity_enforcement():
    with criterion(10, "no slice discontinuities on dithered forests; enforcement is idempotent") as info:
        rng = np.random.default_rng(10)
        checked = 0
        for seed in range(100):
            f = Forest(2 ** 4 * W, W)
            grade(f, random_field(1000 + seed, f.l_init, n=4))
            s = enforce_continuity(f)
            assert s.residuals == []
            assert vertical_gaps(s) <= STEP_TOLERANCE_UNITS
            for z in rng.uniform(0.0, f.l_init, 20):
                assert slice_gaps(s, z / f.unit) == 0.0
                curve = trace_layer(s, z)
                assert set(curve.cells) == leaves_at(f, z)
                tris = {c: sg.Polygon(f.tri_mm(f[c])) for c in curve.cells}
                for k, p in enumerate(curve.points):
                    pt = sg.Point(p)
                    # each vertex sits on the boundary of both cells it joins
                    assert tris[curve.cells[k]].exterior.distance(pt) <= 1e-6
                    assert tris[curve.cells[k - 1]].exterior.distance(pt) <= 1e-6
                checked += 1
            assert reapply_continuity(s) == 0
        info["detail"] = f"100 forests, {checked} slices, second pass moved nothing"


# ---------------------------------------------------------------- 11


def test_11_fit_and_bridge():
    with criterion(11, "split curve plus orphan region become one closed polyline") as info:
        f = uniform_forest(2 ** 5 * W, W, 5)
        curve = prevent_overlap(trace_layer(enforce_continuity(f), 2.05), f)
        plan = plan_layer(curve, [SLOTTED_OUTLINE], W)
        longest = max(max(b.length, b.other_length) for b in plan.bridges)
        info["detail"] = (f"{len(plan.infill_loops)} infill loops + {len(plan.walls)} walls, "
                          f"{len(plan.bridges)} bridges, longest {longest / W:.3f}w")
        assert len(plan.toolpaths) == 1
        assert longest <= BRIDGE_FACTOR * W + 1e-9
        assert sg.LinearRing(plan.toolpath).is_simple
        assert euler_single_loop(plan.toolpath)


# ---------------------------------------------------------------- 12


def test_12_compensation_closed_loop():
    with criterion(12, "calibrated compensation realizes a requested 30%") as info:
        start = time.perf_counter()
        size = 2 ** 5 * W
        curve = calibrate_compensation(size, W, np.linspace(0.01, 0.80, 17), threads=os.cpu_count() or 1)
        request = float(curve.inverse(0.30))
        st = build_structure(homogeneous_spec(request, size), size, W, max_depth=full_density_depth(size, W))
        real = st.realized_density()
        elapsed = time.perf_counter() - start
        info["detail"] = f"simplified {request:.4f} -> realized {real:.4f}, {elapsed:.0f} s"
        assert abs(real - 0.30) <= 0.02
        assert elapsed < 300.0


# ---------------------------------------------------------------- 13


def test_13_oracle_equivalence():
    with criterion(13, "cell integration and clipping agree with sampling oracles") as info:
        rng = np.random.default_rng(13)
        worst_density = 0.0
        for seed in range(50):
            f = Forest(2 ** 4 * W, W)
            for _ in range(int(rng.integers(0, 30))):
                leaves = [c for c in f.leaves() if c.depth < f.max_depth]
                f.subdivide(leaves[int(rng.integers(len(leaves)))].id)
            field = random_field(seed, f.l_init, n=int(rng.integers(2, 10)), lo=0.0, hi=1.0)
            leaves = list(f.leaves())
            cell = leaves[int(rng.integers(len(leaves)))]
            tri, (z0, z1) = f.tri_mm(cell), f.z_range_mm(cell)
            exact = target_density(field, tri, z0, z1)
            estimate = monte_carlo_density(field, tri, z0, z1, samples=200_000, rng=seed)
            worst_density = max(worst_density, abs(exact - estimate))
        worst_clip = 0.0
        for _ in range(200):
            curve = rng.uniform(-2, 12, (int(rng.integers(3, 12)), 2))
            angles = np.sort(rng.uniform(0, 2 * np.pi, int(rng.integers(5, 12))))
            radii = rng.uniform(2, 5, len(angles))
            outer = np.c_[5 + radii * np.cos(angles), 5 + radii * np.sin(angles)]
            hole = np.array([[4.5, 4.5], [4.5, 5.5], [5.5, 5.5], [5.5, 4.5]])
            area = [outer, hole]
            pieces = clip_polyline_to_area(curve, area)
            inside, clipped = clip_sampling_oracle(curve, area, pieces)
            length = float(np.hypot(*(np.roll(curve, -1, axis=0) - curve).T).sum())
            worst_clip = max(worst_clip, abs(inside - clipped) / length)
        info["detail"] = (f"worst density gap {worst_density:.4f}; "
                          f"worst clipped-length gap {100 * worst_clip:.3f}% of curve length")
        assert worst_density <= 0.005
        assert worst_clip <= 0.005


# ---------------------------------------------------------------- 14


def test_14_determinism(tmp_path):
    with criterion(14, "two slice runs give byte-identical outputs") as info:
        save_stl(box_mesh(6.0), tmp_path / "cube.stl")
        for k in range(6):
            img = np.tile(np.linspace(40, 200, 6).astype(np.uint8), (6, 1)) + 5 * k
            Image.fromarray(img).save(tmp_path / f"d{k}.png")
        outs = []
        for name, threads in (("a", 1), ("b", 4)):
            args = ["slice", "--model", str(tmp_path / "cube.stl"), "--density", str(tmp_path / "d*.png"),
                    "--out", str(tmp_path / name), "--threads", str(threads)]
            result = CliRunner().invoke(main, args, catch_exceptions=False)
            assert result.exit_code == 0, result.output
            outs.append(tmp_path / name)
        same_gcode = (outs[0] / "print.gcode").read_bytes() == (outs[1] / "print.gcode").read_bytes()
        same_stats = (outs[0] / "stats.json").read_bytes() == (outs[1] / "stats.json").read_bytes()
        info["detail"] = f"gcode identical: {same_gcode}, stats identical: {same_stats}"
        assert same_gcode and same_stats
