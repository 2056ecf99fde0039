import math

import numpy as np
import pytest
import shapely.geometry as sg
from hypothesis import given, settings, strategies as st

from crossfill.analysis import (
    Box,
    CompensationCurve,
    _clip_rect_lengths,
    _split_lengths,
    box_mean_density,
    build_structure,
    compensation_to_csv,
    cube_layer_heights,
    curves_to_csv,
    full_density_depth,
    gradient_spec,
    homogeneous_spec,
    local_error_curve,
    realized_density,
    realized_grid,
    realized_volume,
    sphere_shell_spec,
)
from crossfill.infill_fit import LayerPlan

from .conftest import W


def line_layers(size, spacing, layer_height, w=W):
    """Layers of back-and-forth lines along x: realized density 2w/spacing."""
    zs, _ = cube_layer_heights(size, layer_height)
    ys = np.arange(spacing / 2, size, spacing)
    return [LayerPlan(z=float(z), toolpaths=[np.array([[0.0, y], [size, y]]) for y in ys]) for z in zs]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_rect_clipping_matches_shapely(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(-2, 12, (30, 2)), rng.uniform(-2, 12, (30, 2))
    a[:5, 0] = b[:5, 0]  # vertical segments
    box = Box(1.0, 2.0, 0.0, 8.0, 9.5, 1.0)
    rect = sg.box(box.x0, box.y0, box.x1, box.y1)
    got = _clip_rect_lengths(a, b, box)
    want = [sg.LineString([p, q]).intersection(rect).length for p, q in zip(a, b)]
    assert got == pytest.approx(want, abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_grid_splitting_matches_per_cell_clipping(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(0, 6, (20, 2)), rng.uniform(0, 6, (20, 2))
    k = 1.5
    grid = _split_lengths(a, b, 0.0, 0.0, k, 4, 4)
    for i in range(4):
        for j in range(4):
            cell = sg.box(i * k, j * k, (i + 1) * k, (j + 1) * k)
            want = sum(sg.LineString([p, q]).intersection(cell).length for p, q in zip(a, b))
            assert grid[i, j] == pytest.approx(want, abs=1e-9)


def test_realized_density_definition():
    plan = LayerPlan(z=0.05, toolpaths=[np.array([[1.0, 1.0], [3.0, 1.0], [3.0, 3.0], [1.0, 3.0]])])
    box = Box(0, 0, 0, 4, 4, 0.1)
    assert realized_volume([plan], box, W, 0.1) == pytest.approx(8 * W * 0.1)
    assert realized_density([plan], box, W, 0.1) == pytest.approx(8 * W * 0.1 / 1.6)
    assert realized_density([], box, W, 0.1) == 0.0


def test_realized_volume_is_additive():
    plans = line_layers(6.0, 0.7, 0.25)
    plans[3].toolpaths.append(np.array([[0.2, 0.3], [5.1, 4.4], [2.2, 5.9]]))
    whole = Box(0, 0, 0, 6, 6, 6)
    parts = [Box(0, 0, 0, 2.3, 6, 3.1), Box(2.3, 0, 0, 6, 6, 3.1), Box(0, 0, 3.1, 6, 2.9, 6), Box(0, 2.9, 3.1, 6, 6, 6)]
    total = realized_volume(plans, whole, W, 0.25)
    assert sum(realized_volume(plans, p, W, 0.25) for p in parts) == pytest.approx(total)


def test_realized_grid_of_parallel_lines():
    size, spacing = 4.0, 1.0
    plans = line_layers(size, spacing, 0.1)
    grid = realized_grid(plans, Box.cube(size), 1.0, W, 0.1)
    assert grid.shape == (4, 4, 4)
    assert np.allclose(grid, 2 * W / spacing)
    spec = homogeneous_spec(2 * W / spacing, size)
    assert all(e == pytest.approx(0.0, abs=1e-9) for _, e in local_error_curve(spec, plans, [1.0, 2.0], Box.cube(size), W, 0.1))


def test_box_mean_density_of_gradient():
    spec = gradient_spec(8.0, n=32)
    assert box_mean_density(spec, Box.cube(8.0)) == pytest.approx(0.25, abs=1e-9)


def test_sphere_shell_values():
    spec = sphere_shell_spec(7.0, n=35)
    assert spec.sample(3.5, 3.5, 3.5) == pytest.approx(0.1)
    assert spec.sample(3.5, 3.5, 3.5 + 3.5 - 0.4) == pytest.approx(0.4)


def test_cube_layer_heights():
    zs, h = cube_layer_heights(12.16, 0.1)
    assert len(zs) == 122 and h == pytest.approx(12.16 / 122)
    assert zs[0] == pytest.approx(h / 2) and zs[-1] == pytest.approx(12.16 - h / 2)


def test_full_density_depth():
    assert full_density_depth(2 ** 5 * W, W) == 9


def test_small_structure():
    st_ = build_structure(homogeneous_spec(0.2, 2 ** 4 * W), 2 ** 4 * W, W)
    assert st_.report.target_mass == pytest.approx(0.2 * st_.forest.l_init ** 3)
    assert 0.1 < st_.realized_density() < 0.35
    assert len(st_.plans) == round(st_.forest.l_init / 0.1)


def test_compensation_monotone_and_invertible():
    x = np.linspace(0, 0.8, 17)
    y = 0.9 * x + 0.02 * np.sin(40 * x)  # small wiggles
    curve = CompensationCurve(x, y)
    fine = np.linspace(0, 0.8, 400)
    assert np.all(np.diff(curve(fine)) >= -1e-12)
    mid = np.linspace(*curve.realized_range, 50)[1:-1]
    assert curve(curve.inverse(mid)) == pytest.approx(mid, abs=1e-6)
    again = CompensationCurve.from_dict(curve.to_dict())
    assert again(fine) == pytest.approx(curve(fine))
    assert curve.inverse(5.0) == pytest.approx(curve.inverse(curve.realized_range[1]))


def test_csv_output():
    text = curves_to_csv({"b": [(1.0, 0.5)], "a": [(2.0, 0.25)]})
    assert text.splitlines() == ["name,kernel,mean_abs_error", "a,2,0.25", "b,1,0.5"]
    rows = compensation_to_csv(CompensationCurve([0, 0.5, 1], [0, 0.4, 0.8])).splitlines()
    assert rows[0] == "simplified,realized,fitted" and len(rows) == 4
    assert math.isclose(float(rows[2].split(",")[2]), 0.4)
