"""Mask-to-footprint post-processing.

The chain is: merge tiles, 3x3 majority filter, polygonize, drop small
polygons, 5 cm buffer, regularize. Regularization simplifies each ring with
Douglas-Peucker, takes the dominant orientation from the minimum-area
rectangle, snaps near-orthogonal edges to it and re-intersects the edge lines.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import AlignmentError, BufferFailure, InvalidGeometryError, Lod1Error, StageError
from .geometry import (
    Footprint,
    Point2,
    Ring,
    buffer_polygon,
    min_area_rect,
    polygon_area,
    rings_are_simple,
    signed_area,
)
from .raster import Grid, majority_filter, polygonize

logger = logging.getLogger(__name__)

AREA_GUARD = 0.25


@dataclass(frozen=True)
class PostprocessConfig:
    min_area: float = 10.0
    buffer_dist: float = 0.05
    simplify_tol: float = 0.3
    snap_angle_tol: float = 15.0
    connectivity: str = "eight"

    def __post_init__(self):
        for name in ("min_area", "buffer_dist", "simplify_tol", "snap_angle_tol"):
            value = getattr(self, name)
            if not (value >= 0 and math.isfinite(value)):
                raise ValueError(f"{name} must be a finite non-negative number, got {value}")
        if self.connectivity not in ("four", "eight"):
            raise ValueError(f"connectivity must be 'four' or 'eight', got {self.connectivity!r}")


def merge_tiles(tiles: list[Grid]) -> Grid:
    """Mosaic aligned mask tiles; overlapping building cells combine by OR."""
    if not tiles:
        raise ValueError("no tiles to merge")
    cell = tiles[0].cell
    nodata = tiles[0].nodata
    x0 = min(t.origin.x for t in tiles)
    y0 = min(t.origin.y for t in tiles)
    placed = []
    for k, t in enumerate(tiles):
        if not math.isclose(t.cell, cell, rel_tol=1e-9):
            raise AlignmentError(f"tile {k} has cell {t.cell}, expected {cell}")
        ci = (t.origin.x - x0) / cell
        ri = (t.origin.y - y0) / cell
        if abs(ci - round(ci)) > 1e-6 or abs(ri - round(ri)) > 1e-6:
            raise AlignmentError(f"tile {k} origin {tuple(t.origin)} is not on the {cell} m lattice")
        placed.append((int(round(ri)), int(round(ci)), t))
    nrows = max(r + t.nrows for r, _, t in placed)
    ncols = max(c + t.ncols for _, c, t in placed)
    out = np.full((nrows, ncols), nodata)
    for r, c, t in placed:
        region = out[r:r + t.nrows, c:c + t.ncols]
        tv = np.where(t.valid, t.values, nodata)
        fresh = (region == nodata) & t.valid
        both = (region != nodata) & t.valid
        region[fresh] = tv[fresh]
        region[both] = np.maximum(region[both], tv[both])
    return Grid(Point2(x0, y0), cell, out, nodata)


def drop_small(fps: list[Footprint], min_area: float) -> list[Footprint]:
    return [fp for fp in fps if polygon_area(fp) >= min_area]


# ---------------------------------------------------------------------------
# Regularization


def _dp_chain(pts: np.ndarray, tol: float) -> list[int]:
    keep = [0, len(pts) - 1]
    stack = [(0, len(pts) - 1)]
    while stack:
        i, j = stack.pop()
        if j <= i + 1:
            continue
        a, b = pts[i], pts[j]
        seg = b - a
        seg_len = math.hypot(seg[0], seg[1])
        rel = pts[i + 1:j] - a
        if seg_len == 0.0:
            dist = np.hypot(rel[:, 0], rel[:, 1])
        else:
            dist = np.abs(seg[0] * rel[:, 1] - seg[1] * rel[:, 0]) / seg_len
        k = int(np.argmax(dist))
        if dist[k] > tol:
            m = i + 1 + k
            keep.append(m)
            stack.append((i, m))
            stack.append((m, j))
    return sorted(set(keep))


def douglas_peucker_indices(v: np.ndarray, tol: float) -> list[int]:
    """Closed-ring Douglas-Peucker; returns kept vertex indices in ring order.

    The ring is split at two mutually distant vertices and each half is
    simplified as an open chain.
    """
    n = len(v)
    if tol <= 0 or n <= 3:
        return list(range(n))
    a = int(np.argmax(np.hypot(*(v - v[0]).T)))
    b = int(np.argmax(np.hypot(*(v - v[a]).T)))
    a, b = min(a, b), max(a, b)
    if a == b:
        return list(range(n))
    first = np.arange(a, b + 1)
    second = np.concatenate([np.arange(b, n), np.arange(0, a + 1)])
    k1 = _dp_chain(v[first], tol)
    k2 = _dp_chain(v[second], tol)
    return sorted({int(first[i]) for i in k1} | {int(second[i]) for i in k2})


def douglas_peucker_ring(v: np.ndarray, tol: float) -> np.ndarray:
    return v[douglas_peucker_indices(v, tol)]


def _snap_ring(v: np.ndarray, keep: list[int], theta: float, tol_rad: float,
               min_len: float = 0.0) -> np.ndarray | None:
    """Snap simplified edges to the theta frame and re-intersect their lines.

    ``keep`` indexes the simplified vertices within the original ring ``v``.
    Each line's offset is the length-weighted mean position of the original
    edges it replaces, which centers it on a pixel staircase. Unsnapped edges
    shorter than ``min_len`` are dropped and their neighbours extended.
    """
    n = len(v)
    e_orig = np.roll(v, -1, axis=0) - v
    w_orig = np.hypot(e_orig[:, 0], e_orig[:, 1])
    mid_orig = v + e_orig / 2
    lines = []  # [angle, weighted offset sum, weight, snapped]
    for k, i in enumerate(keep):
        j = keep[(k + 1) % len(keep)]
        dx, dy = v[j] - v[i]
        span = np.arange(i, j if j > i else j + n) % n
        phi = math.atan2(dy, dx)
        best, snapped = phi, False
        for q in range(4):
            axis = theta + q * math.pi / 2
            if abs(math.remainder(phi - axis, 2 * math.pi)) <= tol_rad:
                best, snapped = math.remainder(axis, 2 * math.pi), True
                break
        nrm = np.array([-math.sin(best), math.cos(best)])
        w = w_orig[span]
        lines.append([best, float(np.dot(mid_orig[span] @ nrm, w)), float(w.sum()), snapped])

    def same(a1, a2, target):
        return abs(math.remainder(a1 - a2 - target, 2 * math.pi)) < 1e-9

    changed = True
    while changed and len(lines) >= 3:
        changed = False
        # merge runs of identical direction into one weighted line
        for i in range(len(lines)):
            j = (i + 1) % len(lines)
            if same(lines[i][0], lines[j][0], 0.0):
                lines[i][1] += lines[j][1]
                lines[i][2] += lines[j][2]
                del lines[j]
                changed = True
                break
        if changed:
            continue
        # back-to-back antiparallel lines form a spike; drop the lighter one
        for i in range(len(lines)):
            j = (i + 1) % len(lines)
            if same(lines[i][0], lines[j][0], math.pi):
                del lines[i if lines[i][2] < lines[j][2] else j]
                changed = True
                break
        if changed:
            continue
        short = [i for i in range(len(lines)) if _removable(lines, i, min_len)]
        if short and len(lines) > 3:
            del lines[min(short, key=lambda i: lines[i][2])]
            changed = True
    if len(lines) < 3:
        return None

    out = []
    for i in range(len(lines)):
        a1, c1, w1, _ = lines[i - 1]
        a2, c2, w2, _ = lines[i]
        n1 = (-math.sin(a1), math.cos(a1))
        n2 = (-math.sin(a2), math.cos(a2))
        det = n1[0] * n2[1] - n1[1] * n2[0]
        if abs(det) < 1e-12:
            return None
        r1, r2 = c1 / w1, c2 / w2
        out.append(((r1 * n2[1] - r2 * n1[1]) / det, (n1[0] * r2 - n2[0] * r1) / det))
    return np.array(out)


def _removable(lines, i, min_len) -> bool:
    """Unsnapped edge that is noise, or part of a small chamfer between
    perpendicular snapped edges."""
    angle, _, w, snapped = lines[i]
    if snapped:
        return False
    if w < min_len:
        return True
    n = len(lines)
    before = next((lines[(i - k) % n] for k in range(1, n) if lines[(i - k) % n][3]), None)
    after = next((lines[(i + k) % n] for k in range(1, n) if lines[(i + k) % n][3]), None)
    if before is None or after is None or before is after:
        return False
    perpendicular = abs(abs(math.remainder(before[0] - after[0], 2 * math.pi)) - math.pi / 2) < 1e-9
    return perpendicular and w < 0.5 * min(before[2], after[2])


def regularize(fp: Footprint, cfg: PostprocessConfig = PostprocessConfig()) -> Footprint:
    """Simplify, orient and snap a footprint to its dominant orthogonal frame.

    Falls back to the simplified polygon (flag ``regularize_fallback``) when
    snapping breaks simplicity or moves the area by more than 25 %, and to the
    input (flag ``regularize_failed``) when simplification collapses it.
    """
    area_in = polygon_area(fp)
    simplified_rings = []
    kept_rings = []
    for k, ring in enumerate(fp.rings):
        keep = douglas_peucker_indices(ring.vertices, cfg.simplify_tol)
        s = ring.vertices[keep]
        if len(s) < 3 or abs(signed_area(s)) < 1e-12:
            if k == 0:
                logger.warning("footprint %s collapsed during simplification", fp.id)
                return fp.with_flags("regularize_failed")
            continue  # hole smaller than the tolerance
        simplified_rings.append(s)
        kept_rings.append((ring.vertices, keep))
    try:
        simplified = _rebuild(fp, simplified_rings)
    except InvalidGeometryError:
        return fp.with_flags("regularize_failed")
    if not rings_are_simple(simplified_rings):
        return fp.with_flags("regularize_failed")

    theta = min_area_rect(fp).angle
    tol = math.radians(cfg.snap_angle_tol)
    snapped = [_snap_ring(v, keep, theta, tol, 2 * cfg.simplify_tol) for v, keep in kept_rings]
    if all(s is not None for s in snapped) and rings_are_simple(snapped):
        try:
            result = _rebuild(fp, snapped)
        except InvalidGeometryError:
            result = None
        if result is not None and abs(polygon_area(result) - area_in) <= AREA_GUARD * area_in:
            return result
    logger.info("footprint %s: snapping rejected, keeping simplified outline", fp.id)
    return simplified.with_flags("regularize_fallback")


def _rebuild(fp: Footprint, rings) -> Footprint:
    return replace(fp, outer=Ring(rings[0]), holes=tuple(Ring(h) for h in rings[1:]))


# ---------------------------------------------------------------------------
# Full chain


def _stage(name, fn, *args):
    try:
        return fn(*args)
    except Lod1Error as exc:
        raise StageError(name, exc) from exc
    except ValueError as exc:
        raise StageError(name, exc) from exc


def buffer_or_keep(fp: Footprint, d: float) -> Footprint:
    try:
        return buffer_polygon(fp, d)
    except BufferFailure as exc:
        logger.warning("buffer of %s failed (%s); keeping unbuffered outline", fp.id, exc)
        return fp.with_flags("buffer_failed")


def postprocess(mask: Grid, cfg: PostprocessConfig = PostprocessConfig(), source: str = "predicted") -> list[Footprint]:
    """Binary mask to regularized footprints with ids ``b0000``, ``b0001``, ..."""
    filtered = _stage("majority_filter", majority_filter, mask)
    polys = _stage("polygonize", polygonize, filtered, cfg.connectivity, "b", source)
    kept = _stage("drop_small", drop_small, polys, cfg.min_area)
    kept = [replace(fp, id=f"b{k:04d}") for k, fp in enumerate(kept)]
    buffered = [_stage("buffer", buffer_or_keep, fp, cfg.buffer_dist) for fp in kept]
    return [_stage("regularize", regularize, fp, cfg) for fp in buffered]
