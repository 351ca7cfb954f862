import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from lod1kit.geometry import Footprint

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

DATA = Path(__file__).parent / "data"


def square(x0=0.0, y0=0.0, size=1.0, id="0", source="predicted", holes=()):
    return Footprint.from_coords(
        [[x0, y0], [x0 + size, y0], [x0 + size, y0 + size], [x0, y0 + size]], holes, id=id, source=source
    )


def rect(x0, y0, w, h, id="0", source="predicted"):
    return Footprint.from_coords([[x0, y0], [x0 + w, y0], [x0 + w, y0 + h], [x0, y0 + h]], id=id, source=source)


def l_shape(id="L"):
    # 10x10 minus the 5x5 upper-right corner: area 75, perimeter 40
    return Footprint.from_coords([[0, 0], [10, 0], [10, 5], [5, 5], [5, 10], [0, 10]], id=id)


def star_polygon(rng, n, r_lo=3.0, r_hi=10.0, center=(0.0, 0.0)):
    """Random star-shaped simple polygon: jittered sorted angles, random radii."""
    base = np.linspace(0, 2 * math.pi, n, endpoint=False)
    ang = base + rng.uniform(0, 0.8 * 2 * math.pi / n, n)
    r = rng.uniform(r_lo, r_hi, n)
    return np.column_stack([center[0] + r * np.cos(ang), center[1] + r * np.sin(ang)])


def random_footprint(rng, n, with_hole=False, id="0"):
    outer = star_polygon(rng, n)
    holes = []
    if with_hole:
        # adjacent outer vertices are at most 1.8 * 2pi/n apart, so for n >= 6 every outer
        # edge stays at least 3 * cos(54 deg) = 1.76 from the centre, clear of the 1.5 hole
        if n < 6:
            raise ValueError("holes need n >= 6")
        k = int(rng.integers(3, 8))
        holes.append(star_polygon(rng, k, 0.5, 1.5))
    return Footprint.from_coords(outer, holes, id=id)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance lines recorded by test_acceptance.py, printed once at the end of the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
