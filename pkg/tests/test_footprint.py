import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lod1kit.errors import AlignmentError, StageError
from lod1kit.footprint import (
    PostprocessConfig,
    douglas_peucker_indices,
    drop_small,
    merge_tiles,
    postprocess,
    regularize,
)
from lod1kit.geometry import Footprint, Point2, min_area_rect, polygon_area, polygon_iou
from lod1kit.raster import NODATA, Grid, polygonize, rasterize_footprints, rasterize_polygon

from conftest import rect

CELL = 0.23


def staircase(fp, cell=CELL):
    """Polygonized raster of ``fp`` at ``cell``: the pixel-staircase outline."""
    x0, y0, x1, y1 = fp.bounds
    t = Grid.zeros(Point2(x0 - 1 + cell / 2, y0 - 1 + cell / 2), cell,
                   int((y1 - y0 + 2) / cell) + 1, int((x1 - x0 + 2) / cell) + 1)
    return polygonize(rasterize_polygon(fp, t))[0]


def rotated_rect(w, h, deg, at=(50.03, 50.07)):
    a = math.radians(deg)
    rot = np.array([[math.cos(a), math.sin(a)], [-math.sin(a), math.cos(a)]])
    return Footprint.from_coords(rect(0, 0, w, h).outer.vertices @ rot + at)


# --- config ---------------------------------------------------------------

def test_config_defaults():
    c = PostprocessConfig()
    assert (c.min_area, c.buffer_dist, c.simplify_tol, c.snap_angle_tol, c.connectivity) == (10.0, 0.05, 0.3, 15.0, "eight")


@pytest.mark.parametrize("kw", [{"min_area": -1}, {"buffer_dist": float("nan")}, {"connectivity": "six"}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        PostprocessConfig(**kw)


# --- merge_tiles ----------------------------------------------------------

def tile(x0, y0, values, cell=1.0):
    return Grid(Point2(x0, y0), cell, np.asarray(values, float))


def test_merge_disjoint_tiles():
    a = tile(0.5, 0.5, [[1, 0], [0, 1]])
    b = tile(4.5, 0.5, [[0, 1], [1, 1]])
    m = merge_tiles([a, b])
    assert m.origin == (0.5, 0.5) and m.values.shape == (2, 6)
    assert np.array_equal(m.values[:, :2], a.values)
    assert np.array_equal(m.values[:, 4:], b.values)
    assert np.all(m.values[:, 2:4] == NODATA)


def test_merge_overlap_is_or():
    a = tile(0.5, 0.5, [[1, 0], [0, 0]])
    b = tile(1.5, 0.5, [[1, 0], [0, 1]])
    m = merge_tiles([a, b])
    assert m.values.tolist() == [[1, 1, 0], [0, 0, 1]]


def test_merge_single_identity():
    a = tile(3.5, 7.5, [[1, 0, 1]])
    assert merge_tiles([a]) == a


def test_merge_alignment_errors():
    with pytest.raises(AlignmentError):
        merge_tiles([tile(0.5, 0.5, [[1]]), tile(0.5, 0.5, [[1]], cell=0.5)])
    with pytest.raises(AlignmentError):
        merge_tiles([tile(0.5, 0.5, [[1]]), tile(0.75, 0.5, [[1]])])


# --- drop_small -----------------------------------------------------------

def test_drop_small_threshold_inclusive():
    nine, ten = rect(0, 0, 3, 3, id="a"), rect(10, 0, 5, 2, id="b")
    assert [f.id for f in drop_small([nine, ten], 10.0)] == ["b"]
    assert drop_small([], 10.0) == []


# --- Douglas-Peucker ------------------------------------------------------

def test_douglas_peucker_removes_small_wiggles():
    v = np.array([[0, 0], [5, 0.1], [10, 0], [10, 10], [5, 9.9], [0, 10]], float)
    keep = douglas_peucker_indices(v, 0.3)
    assert keep == [0, 2, 3, 5]
    assert douglas_peucker_indices(v, 0.05) == list(range(6))


# --- regularize -----------------------------------------------------------

def test_staircase_rectangle_to_four_vertices():
    truth = rect(0.05, 0.11, 10, 6)
    r = regularize(staircase(truth))
    assert len(r.outer) == 4 and not r.flags
    assert abs(polygon_area(r) - 60) / 60 < 0.03
    assert min_area_rect(r).angle == pytest.approx(0.0, abs=1e-9)


def test_rectangle_is_fixed_point():
    fp = rect(3, 4, 10, 6)
    r = regularize(fp)
    assert len(r.outer) == 4
    assert sorted(map(tuple, r.outer.vertices.round(9))) == sorted(map(tuple, fp.outer.vertices))


@pytest.mark.parametrize("deg", [45, 30, 10])
def test_rotated_staircase(deg):
    truth = rotated_rect(12, 7, deg)
    r = regularize(staircase(truth))
    assert len(r.outer) == 4
    assert abs(math.degrees(min_area_rect(r).angle) - deg) <= 2
    assert polygon_iou(r, truth) > 0.95


def test_l_shape_staircase_keeps_six_vertices():
    truth = Footprint.from_coords([[0.07, 0.03], [12, 0.03], [12, 5], [6, 5], [6, 10], [0.07, 10]])
    r = regularize(staircase(truth))
    assert len(r.outer) == 6
    assert polygon_iou(r, truth) > 0.95


def test_regularize_fallback_flagged():
    # the 14 degree hypotenuse snaps parallel to the base, leaving no closed ring
    fp = Footprint.from_coords([[0, 0], [10, 0], [10.0, 2.5]])
    r = regularize(fp)
    assert r.flags == ("regularize_fallback",)
    assert r.same_shape(fp)


def test_area_preserving_snap_is_accepted():
    fp = Footprint.from_coords([[0, 0], [10, 0], [10.0, 0.2], [0.0, 3.0]])
    r = regularize(fp, PostprocessConfig(simplify_tol=0.1, snap_angle_tol=20))
    assert not r.flags and len(r.outer) == 4
    assert polygon_area(r) == pytest.approx(16.0)


def test_regularize_collapse_returns_input_flagged():
    tiny = rect(0, 0, 0.2, 0.2)
    r = regularize(tiny, PostprocessConfig(simplify_tol=5.0))
    assert r.flags == ("regularize_failed",)
    assert r.same_shape(tiny)


# --- postprocess ----------------------------------------------------------

def grid(values, cell=CELL):
    return Grid(Point2(cell / 2, cell / 2), cell, np.asarray(values, float))


def test_block_plus_isolated_pixel():
    v = np.zeros((30, 30))
    v[5:21, 5:21] = 1  # 16x16 cells, 13.54 m2
    v[26, 26] = 1
    fps = postprocess(grid(v))
    assert [f.id for f in fps] == ["b0000"]
    assert len(fps[0].outer) == 4
    # 8x8 alone would be dropped at the 10 m2 threshold
    v = np.zeros((20, 20))
    v[5:13, 5:13] = 1
    assert postprocess(grid(v)) == []


def test_all_zero_mask():
    assert postprocess(grid(np.zeros((10, 10)))) == []


def test_diagonal_blocks_one_footprint():
    v = np.zeros((40, 40))
    v[2:18, 2:18] = 1
    v[18:34, 18:34] = 1
    assert len(postprocess(grid(v))) == 1
    assert len(postprocess(grid(v), PostprocessConfig(connectivity="four"))) == 2


def test_stage_errors_named():
    with pytest.raises(StageError, match="majority_filter"):
        postprocess(grid([[0, 2], [1, 1]]))


@st.composite
def rect_scenes(draw):
    n = draw(st.integers(1, 4))
    fps = []
    for k in range(n):
        w = draw(st.floats(4.0, 12.0))
        h = draw(st.floats(4.0, 12.0))
        x = (k % 2) * 16 + draw(st.floats(1.0, 2.5))
        y = (k // 2) * 16 + draw(st.floats(1.0, 2.5))
        fps.append(rect(x, y, w, h, id=f"t{k}", source="reference"))
    return fps


@given(rect_scenes())
def test_rectangles_recovered(fps):
    template = Grid.zeros(Point2(CELL / 2, CELL / 2), CELL, 150, 150)
    m = rasterize_footprints(fps, template)
    out = postprocess(m)
    assert len(out) == len(fps)
    for fp in out:
        assert polygon_area(fp) >= 10.0
        assert len(fp.outer) == 4
        t = max(fps, key=lambda t: polygon_iou(fp, t))
        # per axis: one cell of centre-sampling error plus the buffer on both sides
        w, h = t.bounds[2] - t.bounds[0], t.bounds[3] - t.bounds[1]
        e = CELL + 2 * 0.05
        bound = (w - e) * (h - e) / ((w + e) * (h + e))
        assert polygon_iou(fp, t) >= bound - 0.01
    for i in range(len(out)):
        for j in range(i + 1, len(out)):
            assert polygon_iou(out[i], out[j]) == 0.0
    again = postprocess(m)
    assert [f.id for f in again] == [f.id for f in out]
    assert all(a.same_shape(b) for a, b in zip(out, again))
