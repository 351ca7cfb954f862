"""Georeferenced grids: DSM interpolation, mask filtering, mask/polygon conversion.

Grid values are stored as ``values[row, col]`` with row 0 at the southern
edge, so cell (r, c) has its center at ``origin + (c * cell, r * cell)``.
ESRI ASCII files list the northern row first; the reader and writer flip.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import Delaunay, QhullError

from .errors import DomainError, ParseError, TriangulationError
from .geometry import Footprint, Point2, Ring, contains_points
from .pointcloud import PointCloud

logger = logging.getLogger(__name__)

NODATA = -9999.0
DSM_CELL = 0.23


@dataclass(frozen=True, eq=False)
class Grid:
    origin: Point2
    cell: float
    values: np.ndarray
    nodata: float = NODATA

    def __post_init__(self):
        if not self.cell > 0:
            raise ValueError(f"cell must be positive, got {self.cell}")
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError("grid values must be 2-D [row, col]")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "origin", Point2(float(self.origin[0]), float(self.origin[1])))

    @property
    def nrows(self) -> int:
        return self.values.shape[0]

    @property
    def ncols(self) -> int:
        return self.values.shape[1]

    @property
    def valid(self) -> np.ndarray:
        return self.values != self.nodata

    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        xs = self.origin.x + self.cell * np.arange(self.ncols)
        ys = self.origin.y + self.cell * np.arange(self.nrows)
        return xs, ys

    def is_binary(self) -> bool:
        v = self.values[self.valid]
        return bool(np.all((v == 0) | (v == 1)))

    def with_values(self, values) -> "Grid":
        return Grid(self.origin, self.cell, values, self.nodata)

    def __eq__(self, other):
        return (
            isinstance(other, Grid)
            and self.origin == other.origin
            and self.cell == other.cell
            and self.nodata == other.nodata
            and np.array_equal(self.values, other.values)
        )

    @classmethod
    def zeros(cls, origin, cell, nrows, ncols, nodata=NODATA) -> "Grid":
        return cls(origin, cell, np.zeros((nrows, ncols)), nodata)


# ---------------------------------------------------------------------------
# DSM


def rasterize_dsm(pc: PointCloud, cell: float = DSM_CELL, workers: int = 1, origin=None,
                  shape=None) -> Grid:
    """Linear interpolation on the Delaunay triangulation of the points.

    Cell centers outside the convex hull are nodata. A center lying on a
    shared triangle edge takes the lower-numbered triangle, and a center on a
    vertex takes that vertex's z, so the output does not depend on how cells
    are split among ``workers``.
    """
    if cell <= 0:
        raise ValueError(f"cell must be positive, got {cell}")
    if len(pc) < 3:
        raise TriangulationError(f"need at least 3 points, got {len(pc)}")
    xy = pc.xyz[:, :2]
    shift = xy.min(axis=0)
    try:
        tri = Delaunay(xy - shift)
    except QhullError as exc:
        raise TriangulationError(f"points are collinear or degenerate: {str(exc).splitlines()[0]}") from None
    if origin is None:
        origin = Point2(shift[0] + cell / 2, shift[1] + cell / 2)
    if shape is None:
        span = xy.max(axis=0) - shift
        shape = (int(math.floor(span[1] / cell)) + 1, int(math.floor(span[0] / cell)) + 1)
    nrows, ncols = shape
    z = pc.xyz[:, 2]

    def run(rows):
        ys = origin[1] + cell * rows - shift[1]
        xs = origin[0] + cell * np.arange(ncols) - shift[0]
        gx, gy = np.meshgrid(xs, ys)
        q = np.column_stack([gx.ravel(), gy.ravel()])
        return _interpolate(tri, z, q).reshape(len(rows), ncols)

    rows = np.arange(nrows)
    if workers > 1 and nrows > 1:
        parts = np.array_split(rows, workers)
        with ThreadPoolExecutor(workers) as ex:
            out = np.vstack(list(ex.map(run, parts)))
    else:
        out = run(rows)
    return Grid(origin, cell, out, NODATA)


def _interpolate(tri: Delaunay, z: np.ndarray, q: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    simplex = tri.find_simplex(q)
    out = np.full(len(q), NODATA)
    ok = simplex >= 0
    idx = np.flatnonzero(ok)
    s = simplex[idx]
    bary = _barycentric(tri, s, q[idx])

    on_edge = np.any(bary <= eps, axis=1)
    if on_edge.any():
        for k in np.flatnonzero(on_edge):
            s[k] = _lowest_containing(tri, int(s[k]), q[idx[k]], eps)
        bary[on_edge] = _barycentric(tri, s[on_edge], q[idx[on_edge]])

    verts = tri.simplices[s]
    vals = np.einsum("ij,ij->i", bary, z[verts])
    snap = np.max(bary, axis=1) >= 1 - eps
    if snap.any():
        vals[snap] = z[verts[snap, np.argmax(bary[snap], axis=1)]]
    out[idx] = vals
    return out


def _barycentric(tri: Delaunay, s: np.ndarray, pts: np.ndarray) -> np.ndarray:
    T = tri.transform[s]
    b = np.einsum("ijk,ik->ij", T[:, :2, :], pts - T[:, 2, :])
    return np.column_stack([b, 1 - b.sum(axis=1)])


def _lowest_containing(tri: Delaunay, s: int, p: np.ndarray, eps: float) -> int:
    """Lowest-index triangle containing ``p``, searching across near-zero edges."""
    seen = {s}
    stack = [s]
    best = s
    while stack:
        cur = stack.pop()
        b = _barycentric(tri, np.array([cur]), p[None, :])[0]
        if np.min(b) < -eps:
            continue
        best = min(best, cur)
        for j in np.flatnonzero(b <= eps):
            nb = int(tri.neighbors[cur, j])
            if nb >= 0 and nb not in seen:
                seen.add(nb)
                stack.append(nb)
    return best


# ---------------------------------------------------------------------------
# Mask filtering


def majority_filter(g: Grid) -> Grid:
    """3x3 majority over the eight neighbors; ties and nodata centers keep their value."""
    if not g.is_binary():
        raise DomainError("majority_filter needs a binary grid (values 0, 1 or nodata)")
    valid = g.valid
    ones = np.where(valid, g.values == 1, False).astype(np.int32)
    zeros = np.where(valid, g.values == 0, False).astype(np.int32)
    kernel = np.ones((3, 3), dtype=np.int32)
    kernel[1, 1] = 0
    n1 = ndimage.convolve(ones, kernel, mode="constant", cval=0)
    n0 = ndimage.convolve(zeros, kernel, mode="constant", cval=0)
    out = g.values.copy()
    out[valid & (n1 > n0)] = 1.0
    out[valid & (n0 > n1)] = 0.0
    return g.with_values(out)


# ---------------------------------------------------------------------------
# Polygonize

# direction vectors for boundary edges, counter-clockwise order: E, N, W, S
_DIRS = ((1, 0), (0, 1), (-1, 0), (0, -1))


def polygonize(g: Grid, connectivity: str = "eight", id_prefix: str = "b",
               source: str = "predicted") -> list[Footprint]:
    """Trace connected components of 1-cells into axis-aligned polygons.

    Boundaries follow cell edges with the component on the left, so outer
    rings come out counter-clockwise and holes clockwise. Where two cells of
    a component meet only at a corner, eight-connectivity keeps them in one
    ring that touches itself at that corner. Footprints are numbered in
    scanline order (north row first, west to east) of each component's first
    cell.
    """
    if connectivity not in ("four", "eight"):
        raise ValueError(f"connectivity must be 'four' or 'eight', got {connectivity!r}")
    if not g.is_binary():
        raise DomainError("polygonize needs a binary grid")
    mask = g.valid & (g.values == 1)
    structure = np.ones((3, 3), bool) if connectivity == "eight" else ndimage.generate_binary_structure(2, 1)
    labels, n = ndimage.label(mask, structure=structure)
    if n == 0:
        return []
    # order components by first cell in north-first scanline order
    flipped = labels[::-1]
    flat = flipped.ravel()
    first = np.full(n + 1, -1, dtype=np.int64)
    nz = np.flatnonzero(flat)
    lab_nz = flat[nz]
    uniq, pos = np.unique(lab_nz, return_index=True)
    first[uniq] = nz[pos]
    order = np.argsort(first[1:], kind="stable") + 1
    slices = ndimage.find_objects(labels)

    out = []
    for k, lab in enumerate(order):
        sl = slices[lab - 1]
        r0, c0 = sl[0].start, sl[1].start
        sub = labels[sl] == lab
        rings = _trace_rings(sub, eight=connectivity == "eight")
        world = []
        for ring in rings:
            v = np.asarray(ring, dtype=np.float64)
            # vertex (i, j) is the lower-left corner of cell (row j, col i)
            x = g.origin.x + (v[:, 0] + c0 - 0.5) * g.cell
            y = g.origin.y + (v[:, 1] + r0 - 0.5) * g.cell
            world.append(np.column_stack([x, y]))
        areas = [_ring_area2(r) for r in rings]
        outer_idx = int(np.argmax(areas))
        outer = Ring(world[outer_idx])
        holes = tuple(Ring(w) for i, w in enumerate(world) if i != outer_idx)
        out.append(Footprint(id=f"{id_prefix}{k:04d}", outer=outer, holes=holes, source=source))
    return out


def _ring_area2(ring) -> int:
    v = np.asarray(ring, dtype=np.int64)
    x, y = v[:, 0], v[:, 1]
    return int(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _trace_rings(mask: np.ndarray, eight: bool) -> list[list[tuple[int, int]]]:
    """Chain the directed boundary edges of a single-component mask into rings.

    Vertex (i, j) is the corner at column i, row j. Returns rings with
    collinear vertices removed, in integer corner coordinates.
    """
    nr, nc = mask.shape
    pad = np.zeros((nr + 2, nc + 2), dtype=bool)
    pad[1:-1, 1:-1] = mask
    m = pad[1:-1, 1:-1]
    below = pad[:-2, 1:-1]
    above = pad[2:, 1:-1]
    left = pad[1:-1, :-2]
    right = pad[1:-1, 2:]

    out_edges: dict[tuple[int, int], list[int]] = {}

    def add(rows, cols, sx, sy, d):
        for r, c in zip(rows.tolist(), cols.tolist()):
            out_edges.setdefault((c + sx, r + sy), []).append(d)

    # interior on the left of each directed edge
    r, c = np.nonzero(m & ~below)
    add(r, c, 0, 0, 0)  # south side, heading east
    r, c = np.nonzero(m & ~right)
    add(r, c, 1, 0, 1)  # east side, heading north
    r, c = np.nonzero(m & ~above)
    add(r, c, 1, 1, 2)  # north side, heading west
    r, c = np.nonzero(m & ~left)
    add(r, c, 0, 1, 3)  # west side, heading south

    rings = []
    visited: set[tuple[tuple[int, int], int]] = set()
    for start in sorted(out_edges):
        for d0 in sorted(out_edges[start]):
            if (start, d0) in visited:
                continue
            ring = []
            v, d = start, d0
            while True:
                visited.add((v, d))
                ring.append((v, d))
                v = (v[0] + _DIRS[d][0], v[1] + _DIRS[d][1])
                options = out_edges[v]
                if len(options) == 1:
                    d = options[0]
                else:
                    # pinch corner where two cells meet diagonally: a right
                    # turn joins the diagonal neighbour (eight-connected), a
                    # left turn stays with the current cell (four-connected)
                    d = (d - 1) % 4 if eight else (d + 1) % 4
                if (v, d) == (start, d0):
                    break
            corners = [p for k, (p, dd) in enumerate(ring) if dd != ring[k - 1][1]]
            rings.append(corners)
    return rings


# ---------------------------------------------------------------------------
# Polygon -> mask


def rasterize_polygon(fp: Footprint, template: Grid) -> Grid:
    """1 where the cell center lies inside ``fp`` (boundary inclusive), else 0."""
    out = np.zeros((template.nrows, template.ncols))
    xs, ys = template.centers()
    minx, miny, maxx, maxy = fp.bounds
    c0 = max(int(np.searchsorted(xs, minx, side="left")), 0)
    c1 = int(np.searchsorted(xs, maxx, side="right"))
    r0 = max(int(np.searchsorted(ys, miny, side="left")), 0)
    r1 = int(np.searchsorted(ys, maxy, side="right"))
    if c1 > c0 and r1 > r0:
        gx, gy = np.meshgrid(xs[c0:c1], ys[r0:r1])
        inside = contains_points(fp, np.column_stack([gx.ravel(), gy.ravel()]))
        out[r0:r1, c0:c1] = inside.reshape(r1 - r0, c1 - c0)
    return Grid(template.origin, template.cell, out, template.nodata)


def rasterize_footprints(fps, template: Grid) -> Grid:
    out = np.zeros((template.nrows, template.ncols))
    for fp in fps:
        out = np.maximum(out, rasterize_polygon(fp, template).values)
    return template.with_values(out)


# ---------------------------------------------------------------------------
# ESRI ASCII grid

_HEADER_KEYS = ("ncols", "nrows", "xllcenter", "yllcenter", "cellsize", "nodata_value")


def _fmt(v: float) -> str:
    if v == int(v) and abs(v) < 1e15:
        return str(int(v))
    return repr(float(v))


def write_grid(g: Grid, path) -> None:
    lines = [
        f"ncols {g.ncols}",
        f"nrows {g.nrows}",
        f"xllcenter {_fmt(g.origin.x)}",
        f"yllcenter {_fmt(g.origin.y)}",
        f"cellsize {_fmt(g.cell)}",
        f"NODATA_value {_fmt(g.nodata)}",
    ]
    for row in g.values[::-1]:
        lines.append(" ".join(_fmt(v) for v in row.tolist()))
    Path(path).write_text("\n".join(lines) + "\n")


def read_grid(path) -> Grid:
    path = Path(path)
    header: dict[str, float] = {}
    rows: list[list[float]] = []
    with open(path) as fh:
        lines = fh.read().splitlines()
    lineno = 0
    for lineno, line in enumerate(lines, 1):
        parts = line.split()
        if not parts:
            continue
        key = parts[0].lower()
        if key[0].isalpha():
            if rows:
                raise ParseError(f"header key {parts[0]!r} after data rows", path, f"line {lineno}")
            if key not in _HEADER_KEYS + ("xllcorner", "yllcorner"):
                raise ParseError(f"unknown header key {parts[0]!r}", path, f"line {lineno}")
            if key in header:
                raise ParseError(f"duplicate header key {parts[0]!r}", path, f"line {lineno}")
            if len(parts) != 2:
                raise ParseError(f"header key {parts[0]!r} needs one value", path, f"line {lineno}")
            try:
                header[key] = float(parts[1])
            except ValueError:
                raise ParseError(f"non-numeric value for {parts[0]!r}", path, f"line {lineno}") from None
            continue
        try:
            rows.append([float(p) for p in parts])
        except ValueError:
            raise ParseError("non-numeric grid value", path, f"line {lineno}") from None
        rows[-1].append(lineno)

    for key in ("ncols", "nrows", "cellsize"):
        if key not in header:
            raise ParseError(f"missing header key {key!r}", path)
    for axis in ("x", "y"):
        has_center, has_corner = f"{axis}llcenter" in header, f"{axis}llcorner" in header
        if has_center == has_corner:
            raise ParseError(f"need exactly one of {axis}llcenter / {axis}llcorner", path)
    ncols, nrows, cell = int(header["ncols"]), int(header["nrows"]), header["cellsize"]
    if ncols != header["ncols"] or ncols <= 0:
        raise ParseError(f"ncols must be a positive integer, got {header['ncols']}", path)
    if nrows != header["nrows"] or nrows <= 0:
        raise ParseError(f"nrows must be a positive integer, got {header['nrows']}", path)
    if cell <= 0:
        raise ParseError("cellsize must be positive", path)
    x0 = header["xllcenter"] if "xllcenter" in header else header["xllcorner"] + cell / 2
    y0 = header["yllcenter"] if "yllcenter" in header else header["yllcorner"] + cell / 2
    nodata = header.get("nodata_value", NODATA)

    if len(rows) != nrows:
        raise ParseError(f"nrows is {nrows} but found {len(rows)} data rows", path)
    for row in rows:
        if len(row) - 1 != ncols:
            raise ParseError(f"ncols is {ncols} but row has {len(row) - 1} values", path, f"line {int(row[-1])}")
    values = np.array([row[:-1] for row in rows], dtype=np.float64)[::-1]
    return Grid(Point2(x0, y0), cell, values, nodata)
