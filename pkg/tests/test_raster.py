
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lod1kit.errors import DomainError, ParseError, TriangulationError
from lod1kit.geometry import Point2, polygon_area
from lod1kit.pointcloud import PointCloud
from lod1kit.raster import (
    NODATA,
    Grid,
    majority_filter,
    polygonize,
    rasterize_dsm,
    rasterize_footprints,
    rasterize_polygon,
    read_grid,
    write_grid,
)

from conftest import square


def cloud(xy, z):
    xy = np.asarray(xy, float)
    return PointCloud(np.column_stack([xy, np.broadcast_to(z, len(xy))]), np.full(len(xy), 6))


def mask(rows, cell=1.0, origin=(0.5, 0.5)):
    """Grid from a list of strings, first string = northern row."""
    v = np.array([[1.0 if ch == "1" else (NODATA if ch == "n" else 0.0) for ch in r] for r in rows])[::-1]
    return Grid(Point2(*origin), cell, v)


# --- DSM ------------------------------------------------------------------

def test_dsm_constant_field():
    g = rasterize_dsm(cloud([[0, 0], [1, 0], [0, 1], [1, 1]], 5.0), 0.5)
    assert g.origin == (0.25, 0.25)
    assert np.all(g.values[:2, :2] == 5.0)
    # the third column/row of centers (1.25) lies outside the hull
    assert np.all(g.values[2, :] == NODATA) and np.all(g.values[:, 2] == NODATA)


def test_dsm_reproduces_ramp():
    rng = np.random.default_rng(0)
    xy = rng.uniform(0, 20, (100, 2))
    g = rasterize_dsm(cloud(xy, xy[:, 0]), 0.37)
    xs, ys = g.centers()
    gx, _ = np.meshgrid(xs, ys)
    ok = g.valid
    assert ok.sum() > 1000
    assert np.max(np.abs(g.values[ok] - gx[ok])) < 1e-9


def test_dsm_outside_hull_nodata():
    g = rasterize_dsm(cloud([[0, 0], [4, 0], [0, 4]], 1.0), 0.5)
    xs, ys = g.centers()
    gx, gy = np.meshgrid(xs, ys)
    outside = gx + gy > 4 + 1e-9
    assert np.all(g.values[outside] == NODATA)
    assert np.all(g.values[~outside] == 1.0)


def test_dsm_workers_do_not_change_result():
    rng = np.random.default_rng(1)
    xy = rng.uniform(0, 30, (400, 2))
    pc = cloud(xy, rng.normal(size=400))
    one = rasterize_dsm(pc, 0.23)
    for w in (2, 3, 7):
        assert rasterize_dsm(pc, 0.23, workers=w) == one


def test_dsm_edge_ties_are_deterministic():
    # grid points exactly on shared triangle edges and on vertices
    xy = np.array([[x, y] for x in range(5) for y in range(5)], float)
    z = np.arange(25, dtype=float) ** 1.5
    a = rasterize_dsm(cloud(xy, z), 0.5, origin=Point2(0, 0), shape=(9, 9))
    b = rasterize_dsm(cloud(xy, z), 0.5, workers=4, origin=Point2(0, 0), shape=(9, 9))
    assert a == b
    # centers on vertices take the vertex z exactly
    assert a.values[0, 0] == z[0]
    assert a.values[2, 4] == z[2 * 5 + 1]
    assert np.all(a.valid)


@pytest.mark.parametrize("xy", [[[0, 0], [1, 1]], [[0, 0], [1, 1], [2, 2], [3, 3]]])
def test_dsm_degenerate_inputs(xy):
    with pytest.raises(TriangulationError):
        rasterize_dsm(cloud(xy, 0.0), 0.5)


# --- majority filter ------------------------------------------------------

def test_isolated_pixel_removed():
    g = mask(["000", "010", "000"])
    assert majority_filter(g).values.sum() == 0


def test_large_block_interior_unchanged():
    v = np.zeros((12, 12))
    v[2:10, 2:10] = 1
    out = majority_filter(Grid(Point2(0, 0), 1.0, v)).values
    assert np.array_equal(out[3:9, 3:9], v[3:9, 3:9])


@pytest.mark.parametrize("rows,centre", [(["101", "010", "101"], 1.0), (["010", "101", "010"], 0.0)])
def test_checkerboard_centre(rows, centre):
    g = mask(rows)
    nb = [g.values[r, c] for r in range(3) for c in range(3) if (r, c) != (1, 1)]
    assert nb.count(1.0) == nb.count(0.0) == 4  # enumerated by hand: a 4-4 tie
    assert majority_filter(g).values[1, 1] == centre


def test_majority_strict_flip():
    g = mask(["111", "101", "111"])
    assert majority_filter(g).values[1, 1] == 1.0


def test_majority_ignores_nodata():
    g = mask(["nnn", "n1n", "000"])
    # three valid neighbours, all zero
    assert majority_filter(g).values[1, 1] == 0.0
    assert majority_filter(g).values[2, 1] == NODATA


def test_majority_rejects_non_binary():
    with pytest.raises(DomainError):
        majority_filter(Grid(Point2(0, 0), 1.0, np.array([[0.0, 2.0]])))


@st.composite
def block_grids(draw, min_side):
    n = draw(st.integers(1, 4))
    v = np.zeros((40, 40))
    for k in range(n):
        h = draw(st.integers(min_side, 9))
        w = draw(st.integers(min_side, 9))
        # two free cells to the grid border: a block one cell from the edge grows into the
        # border row, whose cells only see five neighbours
        r = (k // 2) * 20 + draw(st.integers(2, 20 - h - 2))
        c = (k % 2) * 20 + draw(st.integers(2, 20 - w - 2))
        v[r:r + h, c:c + w] = 1
    return Grid(Point2(0, 0), 1.0, v)


@given(block_grids(4))
def test_majority_idempotent_on_solid_blocks(g):
    once = majority_filter(g)
    assert majority_filter(once) == once


def test_majority_three_by_three_block_erodes():
    # corner cells of a 3x3 block see 3 ones and 5 zeros, so they flip; a second pass
    # erodes the remaining plus shape further. Idempotence therefore needs blocks >= 4x4.
    v = np.zeros((7, 7))
    v[2:5, 2:5] = 1
    g = Grid(Point2(0, 0), 1.0, v)
    once = majority_filter(g)
    assert once.values.sum() == 5
    assert majority_filter(once).values.sum() < 5


# --- polygonize -----------------------------------------------------------

def test_single_cell():
    fps = polygonize(mask(["1"], origin=(0.5, 0.5)))
    assert len(fps) == 1
    assert polygon_area(fps[0]) == 1.0
    assert fps[0].bounds == (0.0, 0.0, 1.0, 1.0)


def test_block_two_by_three():
    fps = polygonize(mask(["111", "111"]))
    assert len(fps) == 1 and polygon_area(fps[0]) == 6.0
    assert len(fps[0].outer) == 4


def test_ring_with_hole():
    fps = polygonize(mask(["111", "101", "111"]))
    assert len(fps) == 1
    fp = fps[0]
    assert len(fp.holes) == 1
    assert polygon_area(fp) == 9 - 1


def test_diagonal_connectivity():
    g = mask(["10", "01"])
    assert len(polygonize(g, "eight")) == 1
    assert len(polygonize(g, "four")) == 2
    assert polygon_area(polygonize(g, "eight")[0]) == 2.0


def test_pinch_hole_eight_connectivity():
    # a hole that touches the outer boundary only diagonally
    g = mask(["1111", "1001", "1110", "1111"])
    fps = polygonize(g, "eight")
    total = sum(polygon_area(f) for f in fps)
    assert total == (g.values == 1).sum()


def test_ids_in_scanline_order():
    g = mask(["0001", "0000", "1000"])
    fps = polygonize(g)
    assert [f.id for f in fps] == ["b0000", "b0001"]
    assert fps[0].bounds[0] == 3.0  # the northern component comes first


def test_empty_grid():
    assert polygonize(mask(["000"])) == []


def test_polygonize_world_coordinates():
    g = Grid(Point2(100.115, 200.115), 0.23, np.ones((2, 2)))
    fp = polygonize(g)[0]
    assert np.allclose(fp.bounds, (100.0, 200.0, 100.46, 200.46))


@st.composite
def random_masks(draw):
    h = draw(st.integers(1, 12))
    w = draw(st.integers(1, 12))
    bits = draw(st.lists(st.booleans(), min_size=h * w, max_size=h * w))
    return Grid(Point2(3.5, -7.5), 1.0, np.array(bits, float).reshape(h, w))


@given(random_masks(), st.sampled_from(["four", "eight"]))
def test_polygonize_area_and_round_trip(g, conn):
    fps = polygonize(g, conn)
    assert sum(polygon_area(f) for f in fps) == g.values.sum()
    back = rasterize_footprints(fps, g)
    assert np.array_equal(back.values, g.values)


# --- rasterize_polygon ----------------------------------------------------

def test_rasterize_unit_square_half_cells():
    template = Grid.zeros(Point2(0.25, 0.25), 0.5, 4, 4)
    out = rasterize_polygon(square(), template)
    assert out.values.sum() == 4
    assert np.all(out.values[:2, :2] == 1)


def test_rasterize_disjoint():
    template = Grid.zeros(Point2(0.25, 0.25), 0.5, 4, 4)
    assert rasterize_polygon(square(50, 50), template).values.sum() == 0


# --- ESRI ASCII -----------------------------------------------------------

def test_one_cell_grid_file(tmp_path):
    p = tmp_path / "g.asc"
    write_grid(Grid(Point2(0, 0), 1.0, np.array([[5.0]])), p)
    lines = p.read_text().splitlines()
    assert len(lines) == 7
    assert lines[:6] == ["ncols 1", "nrows 1", "xllcenter 0", "yllcenter 0", "cellsize 1", "NODATA_value -9999"]
    assert lines[6] == "5"


def test_grid_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(5)
    v = rng.normal(size=(100, 100)) * 1e3
    v[rng.random((100, 100)) < 0.05] = NODATA
    g = Grid(Point2(123456.789, 456789.012), 0.23, v)
    p = tmp_path / "r.asc"
    write_grid(g, p)
    back = read_grid(p)
    assert back == g
    assert back.values.tobytes() == g.values.tobytes()


def test_top_row_written_first(tmp_path):
    p = tmp_path / "o.asc"
    write_grid(Grid(Point2(0, 0), 1.0, np.array([[1.0, 2.0], [3.0, 4.0]])), p)
    assert p.read_text().splitlines()[6:] == ["3 4", "1 2"]


def test_corner_header_accepted(tmp_path):
    p = tmp_path / "c.asc"
    p.write_text("ncols 2\nnrows 1\nxllcorner 10\nyllcorner 20\ncellsize 2\n1 0\n")
    g = read_grid(p)
    assert g.origin == (11.0, 21.0) and g.nodata == NODATA


@pytest.mark.parametrize("text,match", [
    ("ncols 3\nnrows 1\nxllcenter 0\nyllcenter 0\ncellsize 1\n1 2\n", "ncols"),
    ("ncols 2\nnrows 2\nxllcenter 0\nyllcenter 0\ncellsize 1\n1 2\n", "nrows"),
    ("ncols 2\nncols 2\nnrows 1\nxllcenter 0\nyllcenter 0\ncellsize 1\n1 2\n", "line 2"),
    ("nrows 1\nxllcenter 0\nyllcenter 0\ncellsize 1\n1 2\n", "ncols"),
    ("ncols 2\nnrows 1\nxllcenter 0\nyllcenter 0\ncellsize 1\n1 a\n", "line 6"),
    ("ncols 2\nnrows 1\nxllcenter 0\nyllcenter 0\ncellsize 1\nfoo 3\n1 2\n", "foo"),
])
def test_grid_parse_errors(tmp_path, text, match):
    p = tmp_path / "bad.asc"
    p.write_text(text)
    with pytest.raises(ParseError, match=match):
        read_grid(p)
