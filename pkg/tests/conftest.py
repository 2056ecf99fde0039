from __future__ import annotations

import random

import numpy as np
import pytest

from crossfill.density_field import DensityField
from crossfill.forest import Forest
from crossfill.grading import grade

W = 0.38

# outline cut by a slot that splits the infill curve, with an orphan blob behind a narrow neck
SLOTTED_OUTLINE = np.array([
    [0.3, 0.3], [11.8, 0.3], [11.8, 5.75], [12.8, 5.75], [12.8, 4.5], [16, 4.5], [16, 7.5], [12.8, 7.5],
    [12.8, 6.25], [11.8, 6.25], [11.8, 11.8], [6.3, 11.8], [6.3, 3.0], [5.8, 3.0], [5.8, 11.8], [0.3, 11.8],
])


def random_forest(seed: int, exponent: int = 5, splits: int = 60, max_depth: int = 7, w: float = W) -> Forest:
    """Forest refined at randomly chosen leaves (the level constraint is kept by subdivide)."""
    rng = random.Random(seed)
    f = Forest(2 ** exponent * w, w, max_depth)
    for _ in range(splits):
        leaves = [c for c in f.leaves() if c.depth < max_depth]
        if not leaves:
            break
        f.subdivide(rng.choice(leaves).id)
    return f


def random_field(seed: int, size: float, n: int = 8, lo: float = 0.02, hi: float = 0.45) -> DensityField:
    rng = np.random.default_rng(seed)
    return DensityField(rng.uniform(lo, hi, (n, n, n)), (size / n,) * 3)


def dithered_forest(seed: int, exponent: int = 4, w: float = W):
    size = 2 ** exponent * w
    f = Forest(size, w)
    field = random_field(seed, size, n=4)
    report = grade(f, field)
    return f, field, report


@pytest.fixture(scope="session")
def small_dithered():
    return [dithered_forest(s) for s in range(6)]


ACCEPTANCE_RESULTS: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(ACCEPTANCE_RESULTS[n])
