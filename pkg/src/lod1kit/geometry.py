"""Planar polygon primitives: rings, footprints and their measurements.

Coordinates are planar meters. Outer rings are stored counter-clockwise and
hole rings clockwise; orientation is normalized on construction. All types are
immutable, so every function here is safe to call concurrently.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import BufferFailure, InvalidGeometryError, ParseError

SOURCES = ("predicted", "reference")
DEFAULT_IOU_CELL = 0.05


class Point2(NamedTuple):
    x: float
    y: float


def _as_vertices(coords) -> np.ndarray:
    v = np.asarray(coords, dtype=np.float64)
    if v.ndim != 2 or v.shape[1] != 2:
        raise InvalidGeometryError(f"ring coordinates must be (n, 2), got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise InvalidGeometryError("ring has non-finite coordinates")
    # drop consecutive duplicates, including an explicit closing vertex
    if len(v) > 1:
        keep = np.ones(len(v), dtype=bool)
        keep[1:] = np.any(v[1:] != v[:-1], axis=1)
        v = v[keep]
        while len(v) > 1 and np.array_equal(v[0], v[-1]):
            v = v[:-1]
    return v


def signed_area(vertices: np.ndarray) -> float:
    """Shoelace area; positive for counter-clockwise vertex order."""
    v = vertices - vertices[0]
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


class Ring:
    """Closed vertex loop, stored without repeating the first vertex."""

    __slots__ = ("_v",)

    def __init__(self, coords):
        v = _as_vertices(coords)
        if len(v) < 3:
            raise InvalidGeometryError(f"ring needs at least 3 distinct vertices, got {len(v)}")
        span = float(np.max(np.ptp(v, axis=0)))
        if span == 0.0 or abs(signed_area(v)) <= 1e-12 * span * span:
            raise InvalidGeometryError("degenerate ring (zero area or collinear vertices)")
        v = v.copy()
        v.flags.writeable = False
        self._v = v

    @property
    def vertices(self) -> np.ndarray:
        return self._v

    def __len__(self):
        return len(self._v)

    def __iter__(self):
        return (Point2(float(x), float(y)) for x, y in self._v)

    def __eq__(self, other):
        return isinstance(other, Ring) and np.array_equal(self._v, other._v)

    def __hash__(self):
        return hash(self._v.tobytes())

    def __repr__(self):
        return f"Ring({self._v.tolist()!r})"

    @property
    def signed_area(self) -> float:
        return signed_area(self._v)

    @property
    def length(self) -> float:
        d = np.roll(self._v, -1, axis=0) - self._v
        return float(np.sum(np.hypot(d[:, 0], d[:, 1])))

    def oriented(self, ccw: bool) -> "Ring":
        if (self.signed_area > 0) == ccw:
            return self
        return Ring(self._v[::-1])

    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        return self._v, np.roll(self._v, -1, axis=0)

    def closed_coords(self) -> list[list[float]]:
        c = self._v.tolist()
        return c + [c[0]]


@dataclass(frozen=True, eq=False)
class Footprint:
    """Simple building outline: outer ring plus optional holes.

    ``flags`` carries processing notes (buffer fallback, regularization
    fallback) through the pipeline into the morphology table.
    """

    id: str
    outer: Ring
    holes: tuple[Ring, ...] = ()
    source: str = "predicted"
    flags: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if self.source not in SOURCES:
            raise InvalidGeometryError(f"source must be one of {SOURCES}, got {self.source!r}")
        outer = self.outer if isinstance(self.outer, Ring) else Ring(self.outer)
        holes = tuple(h if isinstance(h, Ring) else Ring(h) for h in self.holes)
        object.__setattr__(self, "outer", outer.oriented(ccw=True))
        object.__setattr__(self, "holes", tuple(h.oriented(ccw=False) for h in holes))
        object.__setattr__(self, "flags", tuple(self.flags))
        object.__setattr__(self, "id", str(self.id))
        for h in self.holes:
            if not np.all(_ring_contains(self.outer.vertices, h.vertices, boundary=True)):
                raise InvalidGeometryError(f"hole of footprint {self.id} is not inside its outer ring")
        if polygon_area(self) <= 0.0:
            raise InvalidGeometryError(f"footprint {self.id} has non-positive area")

    @classmethod
    def from_coords(cls, outer, holes=(), id="0", source="predicted", flags=()) -> "Footprint":
        return cls(id=id, outer=Ring(outer), holes=tuple(Ring(h) for h in holes), source=source, flags=flags)

    @property
    def rings(self) -> tuple[Ring, ...]:
        return (self.outer,) + self.holes

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        v = self.outer.vertices
        return float(v[:, 0].min()), float(v[:, 1].min()), float(v[:, 0].max()), float(v[:, 1].max())

    def with_flags(self, *flags: str) -> "Footprint":
        return replace(self, flags=self.flags + tuple(flags))

    def transformed(self, fn) -> "Footprint":
        """Apply ``fn`` (an (n,2) -> (n,2) array map) to every ring."""
        return replace(
            self,
            outer=Ring(fn(self.outer.vertices)),
            holes=tuple(Ring(fn(h.vertices)) for h in self.holes),
        )

    def translated(self, dx: float, dy: float) -> "Footprint":
        return self.transformed(lambda v: v + np.array([dx, dy]))

    def same_shape(self, other: "Footprint") -> bool:
        return self.outer == other.outer and self.holes == other.holes


def polygon_area(fp: Footprint) -> float:
    return abs(fp.outer.signed_area) - sum(abs(h.signed_area) for h in fp.holes)


def polygon_perimeter(fp: Footprint) -> float:
    return sum(r.length for r in fp.rings)


def centroid(fp: Footprint) -> Point2:
    """Area centroid, holes subtracted."""
    cx = cy = a_tot = 0.0
    for r in fp.rings:
        v = r.vertices
        o = v[0]
        p = v - o
        q = np.roll(p, -1, axis=0)
        cross = p[:, 0] * q[:, 1] - q[:, 0] * p[:, 1]
        a = 0.5 * cross.sum()
        cx += (np.sum((p[:, 0] + q[:, 0]) * cross) / 6.0) + o[0] * a
        cy += (np.sum((p[:, 1] + q[:, 1]) * cross) / 6.0) + o[1] * a
        a_tot += a
    return Point2(float(cx / a_tot), float(cy / a_tot))


# ---------------------------------------------------------------------------
# Membership


def _ring_contains(v: np.ndarray, pts: np.ndarray, boundary: bool) -> np.ndarray:
    """Crossing-number test of ``pts`` (m, 2) against ring ``v``.

    Points on the ring itself return ``boundary``.
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    px, py = pts[:, 0], pts[:, 1]
    inside = np.zeros(len(pts), dtype=bool)
    on_edge = np.zeros(len(pts), dtype=bool)
    w = np.roll(v, -1, axis=0)
    for (x1, y1), (x2, y2) in zip(v, w):
        dx, dy = x2 - x1, y2 - y1
        cross = dx * (py - y1) - dy * (px - x1)
        within = (
            (np.minimum(x1, x2) <= px) & (px <= np.maximum(x1, x2))
            & (np.minimum(y1, y2) <= py) & (py <= np.maximum(y1, y2))
        )
        on_edge |= within & (cross == 0.0)
        straddle = (y1 > py) != (y2 > py)
        if dy != 0.0:
            xcross = x1 + (py - y1) * dx / dy
            inside ^= straddle & (px < xcross)
    return np.where(on_edge, boundary, inside)


def contains_points(fp: Footprint, pts) -> np.ndarray:
    """Vectorized membership; boundary points count as inside."""
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    if len(pts) == 0:
        return np.zeros(0, dtype=bool)
    result = _ring_contains(fp.outer.vertices, pts, boundary=True)
    for h in fp.holes:
        idx = np.flatnonzero(result)
        if len(idx) == 0:
            break
        # strictly inside a hole -> outside the footprint; hole boundary stays inside
        in_hole = _ring_contains(h.vertices, pts[idx], boundary=False)
        result[idx[in_hole]] = False
    return result


def point_in_polygon(p, fp: Footprint) -> bool:
    return bool(contains_points(fp, [tuple(p)])[0])


# ---------------------------------------------------------------------------
# Simplicity


def _segments(rings: Iterable[np.ndarray]):
    starts, ends, ring_id, idx, sizes = [], [], [], [], []
    for k, v in enumerate(rings):
        starts.append(v)
        ends.append(np.roll(v, -1, axis=0))
        ring_id.append(np.full(len(v), k))
        idx.append(np.arange(len(v)))
        sizes.append(np.full(len(v), len(v)))
    return (
        np.concatenate(starts), np.concatenate(ends),
        np.concatenate(ring_id), np.concatenate(idx), np.concatenate(sizes),
    )


def rings_are_simple(rings: Sequence[np.ndarray]) -> bool:
    """True if no two non-adjacent edges of the given rings touch or cross."""
    a, b, rid, idx, size = _segments(rings)
    n = len(a)
    if n < 3:
        return False
    i, j = np.triu_indices(n, k=1)
    same = rid[i] == rid[j]
    adjacent = same & ((j - i == 1) | ((idx[i] == 0) & (idx[j] == size[j] - 1)))
    i, j = i[~adjacent], j[~adjacent]
    if len(i) == 0:
        return True
    p1, p2, q1, q2 = a[i], b[i], a[j], b[j]

    def orient(p, q, r):
        return (q[:, 0] - p[:, 0]) * (r[:, 1] - p[:, 1]) - (q[:, 1] - p[:, 1]) * (r[:, 0] - p[:, 0])

    def on_seg(p, q, r):
        return (
            (np.minimum(p[:, 0], q[:, 0]) <= r[:, 0]) & (r[:, 0] <= np.maximum(p[:, 0], q[:, 0]))
            & (np.minimum(p[:, 1], q[:, 1]) <= r[:, 1]) & (r[:, 1] <= np.maximum(p[:, 1], q[:, 1]))
        )

    d1, d2 = orient(q1, q2, p1), orient(q1, q2, p2)
    d3, d4 = orient(p1, p2, q1), orient(p1, p2, q2)
    proper = (np.sign(d1) * np.sign(d2) < 0) & (np.sign(d3) * np.sign(d4) < 0)
    touch = (
        ((d1 == 0) & on_seg(q1, q2, p1)) | ((d2 == 0) & on_seg(q1, q2, p2))
        | ((d3 == 0) & on_seg(p1, p2, q1)) | ((d4 == 0) & on_seg(p1, p2, q2))
    )
    return not bool(np.any(proper | touch))


def is_simple(fp: Footprint) -> bool:
    return rings_are_simple([r.vertices for r in fp.rings])


# ---------------------------------------------------------------------------
# Buffer


def remove_collinear(v: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Drop vertices whose incident edges are parallel (straight or spike)."""
    v = np.asarray(v, dtype=np.float64)
    while len(v) >= 3:
        prev = np.roll(v, 1, axis=0)
        nxt = np.roll(v, -1, axis=0)
        e1, e2 = v - prev, nxt - v
        cross = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        scale = np.hypot(e1[:, 0], e1[:, 1]) * np.hypot(e2[:, 0], e2[:, 1])
        bad = np.abs(cross) <= tol * np.maximum(scale, 1e-300)
        if not bad.any():
            break
        # remove one at a time so adjacent removals re-evaluate
        v = np.delete(v, int(np.flatnonzero(bad)[0]), axis=0)
    return v


def _offset_ring(v: np.ndarray, d: float) -> np.ndarray:
    """Miter offset of every edge by ``d`` to its right-hand side."""
    v = remove_collinear(v)
    if len(v) < 3:
        raise BufferFailure("ring collapsed while removing collinear vertices")
    e = np.roll(v, -1, axis=0) - v
    length = np.hypot(e[:, 0], e[:, 1])
    normal = np.column_stack([e[:, 1], -e[:, 0]]) / length[:, None]
    p = v + d * normal
    # vertex i joins offset edge i-1 and offset edge i
    p_prev, e_prev = np.roll(p, 1, axis=0), np.roll(e, 1, axis=0)
    denom = e_prev[:, 0] * e[:, 1] - e_prev[:, 1] * e[:, 0]
    diff = p - p_prev
    t = (diff[:, 0] * e[:, 1] - diff[:, 1] * e[:, 0]) / denom
    out = p_prev + t[:, None] * e_prev
    # an edge that collapsed past zero length comes back reversed; orientation alone misses a
    # fully inverted ring (point reflection keeps the winding)
    e_new = np.roll(out, -1, axis=0) - out
    if np.any(np.einsum("ij,ij->i", e_new, e) <= 0):
        raise BufferFailure("an offset edge collapsed or reversed")
    return out


def buffer_polygon(fp: Footprint, d: float) -> Footprint:
    """Offset the outer ring outward and holes inward by ``d`` with miter joins.

    Raises BufferFailure if the offset rings are not simple or lose their
    orientation; callers are expected to fall back to the input polygon.
    """
    if d < 0:
        raise ValueError(f"buffer distance must be non-negative, got {d}")
    if d == 0:
        return fp
    new_rings = [_offset_ring(r.vertices, d) for r in fp.rings]
    if not np.all(np.isfinite(np.concatenate(new_rings))):
        raise BufferFailure(f"non-finite miter vertex in footprint {fp.id}")
    if signed_area(new_rings[0]) <= 0 or any(signed_area(h) >= 0 for h in new_rings[1:]):
        raise BufferFailure(f"offset flipped a ring of footprint {fp.id}")
    if not rings_are_simple(new_rings):
        raise BufferFailure(f"offset of footprint {fp.id} self-intersects")
    try:
        return replace(fp, outer=Ring(new_rings[0]), holes=tuple(Ring(h) for h in new_rings[1:]))
    except InvalidGeometryError as exc:
        raise BufferFailure(str(exc)) from exc


# ---------------------------------------------------------------------------
# Hull and minimum-area rectangle


class MinRect(NamedTuple):
    center: Point2
    angle: float
    width: float
    height: float

    @property
    def area(self) -> float:
        return self.width * self.height

    def corners(self) -> np.ndarray:
        c, s = math.cos(self.angle), math.sin(self.angle)
        u = np.array([c, s])
        w = np.array([-s, c])
        hw, hh = self.width / 2, self.height / 2
        ctr = np.array(self.center)
        return np.array([ctr - hw * u - hh * w, ctr + hw * u - hh * w, ctr + hw * u + hh * w, ctr - hw * u + hh * w])


def convex_hull(pts) -> np.ndarray:
    """Andrew's monotone chain; counter-clockwise, no collinear points."""
    pts = np.unique(np.asarray(pts, dtype=np.float64), axis=0)
    if len(pts) < 3:
        return pts

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def min_area_rect(fp: Footprint) -> MinRect:
    """Minimum-area bounding rectangle by rotating calipers over the hull.

    ``angle`` is the direction of the ``width`` side, normalized to [0, pi/2).
    """
    hull = convex_hull(fp.outer.vertices)
    if len(hull) < 3:
        raise InvalidGeometryError(f"footprint {fp.id} has a degenerate hull")
    origin = hull.mean(axis=0)
    h = hull - origin
    e = np.roll(h, -1, axis=0) - h
    angles = np.mod(np.arctan2(e[:, 1], e[:, 0]), math.pi / 2)
    angles[angles >= math.pi / 2] = 0.0
    best = None
    for a in angles:
        c, s = math.cos(a), math.sin(a)
        u = h[:, 0] * c + h[:, 1] * s
        w = -h[:, 0] * s + h[:, 1] * c
        area = float(np.ptp(u) * np.ptp(w))
        if best is None or area < best[0] * (1 - 1e-12):
            best = (area, float(a), u, w)
    _, a, u, w = best
    c, s = math.cos(a), math.sin(a)
    mu, mw = (u.max() + u.min()) / 2, (w.max() + w.min()) / 2
    center = Point2(float(origin[0] + mu * c - mw * s), float(origin[1] + mu * s + mw * c))
    return MinRect(center, a, float(np.ptp(u)), float(np.ptp(w)))


# ---------------------------------------------------------------------------
# Raster-space overlap


def scanline_mask(fps: Sequence[Footprint], x0: float, y0: float, cell: float, ncols: int, nrows: int) -> np.ndarray:
    """Even-odd fill of cell centers ``(x0 + c*cell, y0 + r*cell)``.

    Returns a bool array indexed [row, col] with row 0 at ``y0``. Edges are
    half-open in y, so a center exactly on a vertex row is counted once.
    """
    toggles = np.zeros((nrows, ncols + 1), dtype=np.int32)
    ys = y0 + cell * np.arange(nrows)
    for fp in fps:
        for ring in fp.rings:
            p, q = ring.edges()
            keep = p[:, 1] != q[:, 1]
            p, q = p[keep], q[keep]
            lo = np.minimum(p[:, 1], q[:, 1])
            hi = np.maximum(p[:, 1], q[:, 1])
            # rows x edges crossing table
            hit = (ys[:, None] >= lo[None, :]) & (ys[:, None] < hi[None, :])
            r, k = np.nonzero(hit)
            if len(r) == 0:
                continue
            x1, y1 = p[k, 0], p[k, 1]
            x2, y2 = q[k, 0], q[k, 1]
            xc = x1 + (ys[r] - y1) * (x2 - x1) / (y2 - y1)
            col = np.ceil((xc - x0) / cell).astype(np.int64)
            np.clip(col, 0, ncols, out=col)
            np.add.at(toggles, (r, col), 1)
    return (np.cumsum(toggles[:, :ncols], axis=1) % 2).astype(bool)


def polygon_iou(a: Footprint, b: Footprint, cell: float = DEFAULT_IOU_CELL) -> float:
    """Intersection over union by cell counting on a shared fine grid.

    The grid is anchored at the joint bounding box, so the result is
    unchanged when both polygons are translated together.
    """
    if cell <= 0:
        raise ValueError(f"cell must be positive, got {cell}")
    if a is b or a.same_shape(b):
        return 1.0
    ax0, ay0, ax1, ay1 = a.bounds
    bx0, by0, bx1, by1 = b.bounds
    if ax1 <= bx0 or bx1 <= ax0 or ay1 <= by0 or by1 <= ay0:
        return 0.0
    minx, miny = min(ax0, bx0), min(ay0, by0)
    maxx, maxy = max(ax1, bx1), max(ay1, by1)
    ncols = max(1, int(math.ceil((maxx - minx) / cell)))
    nrows = max(1, int(math.ceil((maxy - miny) / cell)))
    la = a.translated(-minx, -miny)
    lb = b.translated(-minx, -miny)
    ma = scanline_mask([la], cell / 2, cell / 2, cell, ncols, nrows)
    mb = scanline_mask([lb], cell / 2, cell / 2, cell, ncols, nrows)
    union = int(np.count_nonzero(ma | mb))
    if union == 0:
        return 0.0
    return int(np.count_nonzero(ma & mb)) / union


# ---------------------------------------------------------------------------
# GeoJSON


def footprint_to_feature(fp: Footprint) -> dict:
    props = {"id": fp.id, "source": fp.source}
    if fp.flags:
        props["flags"] = list(fp.flags)
    return {
        "type": "Feature",
        "properties": props,
        "geometry": {"type": "Polygon", "coordinates": [r.closed_coords() for r in fp.rings]},
    }


def feature_to_footprint(feature: dict, default_id: str = "0", default_source: str = "predicted") -> Footprint:
    geom = feature.get("geometry") or {}
    if geom.get("type") != "Polygon":
        raise InvalidGeometryError(f"expected Polygon geometry, got {geom.get('type')!r}")
    rings = geom["coordinates"]
    if not rings:
        raise InvalidGeometryError("polygon has no rings")
    props = feature.get("properties") or {}
    return Footprint.from_coords(
        rings[0],
        rings[1:],
        id=str(props.get("id", default_id)),
        source=props.get("source", default_source),
        flags=tuple(props.get("flags", ())),
    )


def write_geojson(fps: Sequence[Footprint], path) -> None:
    doc = {"type": "FeatureCollection", "features": [footprint_to_feature(fp) for fp in fps]}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def read_geojson(path, default_source: str = "predicted") -> list[Footprint]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, path, f"line {exc.lineno}") from exc
    if doc.get("type") != "FeatureCollection":
        raise ParseError("top-level object is not a FeatureCollection", path)
    out = []
    for k, feat in enumerate(doc.get("features", [])):
        try:
            out.append(feature_to_footprint(feat, default_id=str(k), default_source=default_source))
        except (InvalidGeometryError, KeyError, TypeError) as exc:
            raise ParseError(f"feature {k}: {exc}", path) from exc
    return out
