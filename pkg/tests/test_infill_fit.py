import math

import numpy as np
import pytest
import shapely.geometry as sg
from hypothesis import given, settings, strategies as st

from crossfill.forest import uniform_forest
from crossfill.geometry import loop_length, offset_polygons
from crossfill.infill_fit import (
    BRIDGE_FACTOR,
    UnbridgeableError,
    connect_polygons,
    connect_to_walls,
    fit_to_area,
    material_bound,
    plan_layer,
    wall_loops,
)
from crossfill.slicing import prevent_overlap, trace_layer
from crossfill.surface import enforce_continuity

from .conftest import SLOTTED_OUTLINE, W, random_forest
from .oracles import euler_single_loop


def square(x0, y0, s):
    return np.array([[x0, y0], [x0 + s, y0], [x0 + s, y0 + s], [x0, y0 + s]], dtype=float)


@pytest.fixture(scope="module")
def slotted_layer():
    f = uniform_forest(2 ** 5 * W, W, 5)
    curve = prevent_overlap(trace_layer(enforce_continuity(f), 2.05), f)
    return curve, SLOTTED_OUTLINE


def test_fit_inside_returns_curve_unchanged():
    curve = square(2, 2, 3)
    (loop,) = fit_to_area(curve, [square(0, 0, 10)], W)
    assert np.array_equal(loop, curve)


def test_fit_trims_to_shrunk_area():
    curve = square(-1, -1, 12)
    (loop,) = fit_to_area(curve, [square(0, 0, 10)], W)
    assert abs(sg.Polygon(loop).area) == pytest.approx((10 - W) ** 2)


def test_fit_keeps_orphan_regions(slotted_layer):
    curve, outline = slotted_layer
    _, _, area = wall_loops([outline], 2, W)
    loops = fit_to_area(curve, area, W)
    orphan = [l for l in loops if l.mean(axis=0)[0] > 12.5]
    assert len(orphan) == 1
    shrunk = sg.MultiPolygon([sg.Polygon(p) for p in offset_polygons(area, -W / 2)]).buffer(1e-6)
    assert all(shrunk.covers(sg.LinearRing(l)) for l in loops)


def test_wall_offsets():
    walls, outer, area = wall_loops([square(0, 0, 10)], 2, W)
    assert outer == 1 and len(walls) == 2
    assert loop_length(walls[0]) == pytest.approx(4 * (10 - W))
    assert loop_length(walls[1]) == pytest.approx(4 * (10 - 3 * W))
    assert abs(sg.Polygon(area[0]).area) == pytest.approx((10 - 4 * W) ** 2)


def test_concentric_squares_single_bridge():
    outer, inner = square(0, 0, 10), square(0.4, 0.4, 9.2)
    path, bridges = connect_polygons([outer, inner], 0.4)
    assert len(bridges) == 1
    b = bridges[0]
    assert b.length == pytest.approx(0.4) and b.other_length == pytest.approx(0.4)
    assert loop_length(path) == pytest.approx(loop_length(outer) + loop_length(inner) + material_bound(
        connect_to_walls([inner], [outer], 0.4), 0.4))
    assert sg.LinearRing(path).is_simple and euler_single_loop(path)


def test_bridged_fixture_is_one_closed_polyline(slotted_layer):
    curve, outline = slotted_layer
    plan = plan_layer(curve, [outline], W)
    assert len(plan.toolpaths) == 1 and plan.unbridged == 0
    path = plan.toolpath
    assert sg.LinearRing(path).is_simple and euler_single_loop(path)
    assert len(plan.bridges) == len(plan.infill_loops) + len(plan.walls) - 1
    for b in plan.bridges:
        assert b.length <= BRIDGE_FACTOR * W + 1e-9 and b.other_length <= BRIDGE_FACTOR * W + 1e-9
    total = sum(loop_length(l) for l in plan.infill_loops + plan.walls)
    assert loop_length(path) == pytest.approx(total + material_bound(plan, W))


def test_interior_criterion_also_bridges(slotted_layer):
    curve, outline = slotted_layer
    plan = plan_layer(curve, [outline], W, criteria="interior")
    assert len(plan.toolpaths) == 1 and sg.LinearRing(plan.toolpath).is_simple


def test_separate_outer_wall(slotted_layer):
    curve, _ = slotted_layer
    plan = plan_layer(curve, [square(0.3, 0.3, 11.5)], W, separate_outer_wall=True)
    assert len(plan.toolpaths) == 2
    assert np.array_equal(plan.toolpaths[0], plan.walls[0])


def test_unbridgeable_policy():
    far = [square(0, 0, 2), square(5, 0, 2)]
    with pytest.raises(UnbridgeableError) as info:
        connect_polygons(far, W)
    assert info.value.shortest == pytest.approx(3.0)
    plan = connect_to_walls(far[:1], far[1:], W, on_unbridgeable="separate")
    assert plan.unbridged == 1 and len(plan.toolpaths) == 2
    with pytest.raises(ValueError):
        connect_to_walls(far[:1], far[1:], W, on_unbridgeable="ignore")


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 100_000))
def test_random_layers_bridge_within_limit(seed):
    f = random_forest(seed, exponent=5, splits=60, max_depth=7)
    z = float(np.random.default_rng(seed).uniform(0.5, f.l_init - 0.5))
    curve = prevent_overlap(trace_layer(enforce_continuity(f), z), f)
    outline = [square(0.5, 0.5, f.l_init - 1.0)]
    plan = plan_layer(curve, outline, W, on_unbridgeable="separate")
    for b in plan.bridges:
        assert max(b.length, b.other_length) <= BRIDGE_FACTOR * W + 1e-9
    for p in plan.toolpaths:
        assert sg.LinearRing(p).is_simple
    assert len(plan.toolpaths) == 1 + plan.unbridged
    total = sum(loop_length(l) for l in plan.infill_loops + plan.walls)
    assert sum(loop_length(p) for p in plan.toolpaths) == pytest.approx(total + material_bound(plan, W), rel=0.02)
    assert not math.isnan(plan.extrusion_length())
