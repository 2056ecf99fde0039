import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crossfill.density_field import DensityField
from crossfill.forest import Forest
from crossfill.grading import (
    DiffusionWeights,
    build_lower_bound,
    enforce_skin_support,
    grade,
    leaves_per_depth,
    neighbourhood_weights,
    realized_simplified_mass,
)

from .conftest import W, random_field


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 100_000))
def test_lower_bound_postcondition(seed):
    f = Forest(2 ** 4 * W, W)
    targets = build_lower_bound(f, random_field(seed, f.l_init))
    for c in f.leaves():
        if c.depth < f.max_depth:
            assert f.mass_after_subdivision(c) >= targets.mass(c)
        for n in c.links():
            assert abs(f[n].depth - c.depth) <= 1


def test_lower_bound_uniform_field_is_uniform():
    f = Forest(2 ** 5 * W, W)
    build_lower_bound(f, DensityField.uniform(0.2, f.l_init))
    assert len(leaves_per_depth(f)) <= 2


def test_zero_density_stays_at_roots():
    f = Forest(2 ** 4 * W, W)
    report = grade(f, DensityField.uniform(0.0, f.l_init))
    assert leaves_per_depth(f) == {1: 4}
    assert report.dithered_subdivisions == 0


def test_full_density_reaches_max_depth():
    f = Forest(2 ** 3 * W, W)
    grade(f, DensityField.uniform(1.0, f.l_init))
    assert set(leaves_per_depth(f)) == {f.max_depth}


def test_dropped_error_identity(small_dithered):
    for f, _, report in small_dithered:
        assert report.realized_mass == pytest.approx(realized_simplified_mass(f), rel=1e-12)
        gap = report.target_mass - report.realized_mass
        assert gap == pytest.approx(report.dropped_error, rel=1e-6, abs=1e-9 * report.target_mass)


def test_target_mass_is_total_of_field(small_dithered):
    for f, field, report in small_dithered:
        total = field.values.mean() * f.l_init ** 3
        assert report.target_mass == pytest.approx(total, rel=1e-9)


def test_dithering_tracks_mass_better_than_lower_bound():
    field = DensityField.uniform(0.2, 2 ** 5 * W)
    lb = Forest(2 ** 5 * W, W)
    no_dither = grade(lb, field, use_dithering=False)
    d = Forest(2 ** 5 * W, W)
    dithered = grade(d, field)
    assert abs(dithered.dropped_error) < abs(no_dither.dropped_error)


def test_without_dithering_report_is_consistent():
    f = Forest(2 ** 4 * W, W)
    report = grade(f, random_field(1, f.l_init), use_dithering=False)
    assert report.dithered_subdivisions == 0
    assert report.target_mass - report.realized_mass == pytest.approx(report.dropped_error)


def test_negative_weights_rejected():
    with pytest.raises(ValueError):
        DiffusionWeights(up=-1)


def test_neighbourhood_only_unprocessed():
    f = Forest(2 ** 4 * W, W)
    f.subdivide_uniform(2)
    cell = next(f.morton_leaves())
    hood = neighbourhood_weights(f, cell, DiffusionWeights())
    assert hood and all(w > 0 for w in hood.values())
    assert cell.id not in hood
    for cid in hood:
        f[cid].processed = True
    assert neighbourhood_weights(f, cell, DiffusionWeights()) == {}


def test_dithering_is_deterministic():
    a, b = Forest(2 ** 4 * W, W), Forest(2 ** 4 * W, W)
    field = random_field(11, a.l_init)
    grade(a, field)
    grade(b, field)
    assert [(c.kind, c.tri, c.z0) for c in a.leaves()] == [(c.kind, c.tri, c.z0) for c in b.leaves()]


def test_skin_support_refines_under_skin():
    f = Forest(2 ** 4 * W, W)
    size = f.l_init
    square = np.array([[1.0, 1.0], [3.0, 1.0], [3.0, 3.0], [1.0, 3.0]])
    splits = enforce_skin_support(f, [(size - 0.05, [square])], min_level=4)
    assert splits > 0
    for c in f.leaves():
        z0, z1 = f.z_range_mm(c)
        if z0 <= size - 0.05 <= z1 and f.leaf_at(2.0, 2.0, size - 0.05) is c:
            assert c.depth >= 4
    assert f.audit() == []
    assert enforce_skin_support(f, [], 4) == 0
