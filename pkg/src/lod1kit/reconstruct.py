"""LOD1 prisms: extrusion, face decomposition and CityJSON / OBJ output."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DegenerateHeightError, InvalidGeometryError, ParseError
from .geometry import Footprint, Ring
from .heights import HeightMeasure

CITYJSON_VERSION = "2.0"
QUANT = 0.001
WALL, ROOF, GROUND = "wall", "roof", "ground"
_SEMANTIC = {GROUND: "GroundSurface", ROOF: "RoofSurface", WALL: "WallSurface"}


@dataclass(frozen=True)
class Lod1Solid:
    id: str
    footprint: Footprint
    base: float
    top: float
    measure: HeightMeasure = HeightMeasure.MEDIAN

    @property
    def height(self) -> float:
        return self.top - self.base


@dataclass(frozen=True)
class Face:
    """Planar polygon of a solid's shell; ``rings[0]`` is the outer loop."""

    rings: tuple[np.ndarray, ...]
    kind: str
    area: float
    normal: np.ndarray
    slope_deg: float

    @property
    def vertices(self) -> np.ndarray:
        return self.rings[0]


def extrude(fp: Footprint, base: float, top: float, measure=HeightMeasure.MEDIAN, id: str | None = None) -> Lod1Solid:
    if not (math.isfinite(base) and math.isfinite(top)):
        raise DegenerateHeightError(f"non-finite elevations base={base} top={top}")
    if top <= base:
        raise DegenerateHeightError(f"top {top} must exceed base {base} for footprint {fp.id}")
    return Lod1Solid(fp.id if id is None else id, fp, float(base), float(top), HeightMeasure(measure))


# ---------------------------------------------------------------------------
# Shell


@dataclass(frozen=True)
class Mesh:
    """Indexed boundary: 2n vertices (bottom ring copies, then top) and surfaces."""

    vertices: np.ndarray
    surfaces: list[list[list[int]]]
    kinds: list[str]


def solid_mesh(s: Lod1Solid) -> Mesh:
    rings2d = [r.vertices for r in s.footprint.rings]
    n = sum(len(r) for r in rings2d)
    xy = np.concatenate(rings2d)
    verts = np.vstack([
        np.column_stack([xy, np.full(n, s.base)]),
        np.column_stack([xy, np.full(n, s.top)]),
    ])
    loops, start = [], 0
    for r in rings2d:
        loops.append(list(range(start, start + len(r))))
        start += len(r)

    surfaces, kinds = [], []
    # ground seen from below: reverse every loop
    surfaces.append([loop[::-1] for loop in loops])
    kinds.append(GROUND)
    surfaces.append([[i + n for i in loop] for loop in loops])
    kinds.append(ROOF)
    for loop in loops:
        for k, i in enumerate(loop):
            j = loop[(k + 1) % len(loop)]
            surfaces.append([[i, j, j + n, i + n]])
            kinds.append(WALL)
    return Mesh(verts, surfaces, kinds)


def _newell(loop: np.ndarray) -> np.ndarray:
    nxt = np.roll(loop, -1, axis=0)
    return 0.5 * np.cross(loop, nxt).sum(axis=0)


def classify_slope(normal: np.ndarray, z: float, base: float, top: float) -> tuple[float, str]:
    """Slope of a face from its normal; 90 degrees is a wall, flat faces are roof or ground by height."""
    length = float(np.linalg.norm(normal))
    slope = math.degrees(math.acos(min(1.0, abs(normal[2]) / length)))
    if abs(slope - 90.0) < 1e-6:
        return slope, WALL
    if slope < 1e-6:
        return slope, ROOF if abs(z - top) <= abs(z - base) else GROUND
    return slope, "other"


def faces(s: Lod1Solid) -> list[Face]:
    """Ground, roof and one wall quad per footprint edge, classified by slope.

    Normals point outward. Coordinates are taken relative to the first
    footprint vertex when computing areas so large map coordinates do not
    cost precision.
    """
    mesh = solid_mesh(s)
    origin = np.array([*s.footprint.outer.vertices[0], 0.0])
    local = mesh.vertices - origin
    out = []
    for surf in mesh.surfaces:
        rings = tuple(mesh.vertices[loop] for loop in surf)
        normal = sum(_newell(local[loop]) for loop in surf)
        z = float(rings[0][:, 2].mean())
        slope, kind = classify_slope(normal, z, s.base, s.top)
        out.append(Face(rings, kind, float(np.linalg.norm(normal)), normal, slope))
    return out


def volume_by_faces(s: Lod1Solid) -> float:
    """Divergence theorem: V = 1/3 * sum over faces of (point on face . area vector)."""
    origin = np.array([*s.footprint.outer.vertices[0], s.base])
    total = 0.0
    for f in faces(s):
        total += float(np.dot(f.rings[0][0] - origin, f.normal))
    return total / 3.0


def wall_area(s: Lod1Solid) -> float:
    return sum(f.area for f in faces(s) if f.kind == WALL)


# ---------------------------------------------------------------------------
# CityJSON


def cityjson_document(solids: Sequence[Lod1Solid], title: str | None = None) -> dict:
    if not solids:
        raise ValueError("write_cityjson needs at least one solid")
    ordered = sorted(solids, key=lambda s: s.id)
    ids = [s.id for s in ordered]
    if len(set(ids)) != len(ids):
        raise ValueError("solid ids must be unique within one CityJSON file")
    meshes = [solid_mesh(s) for s in ordered]
    allv = np.concatenate([m.vertices for m in meshes])
    translate = np.floor(allv.min(axis=0))
    objects, vertices, offset = {}, [], 0
    for s, m in zip(ordered, meshes):
        q = np.rint((m.vertices - translate) / QUANT).astype(np.int64)
        vertices.extend(q.tolist())
        shell = [[[i + offset for i in loop] for loop in surf] for surf in m.surfaces]
        kinds = [GROUND, ROOF, WALL]
        values = [kinds.index(k) for k in m.kinds]
        objects[s.id] = {
            "type": "Building",
            "attributes": {
                "footprint_id": s.footprint.id,
                "measure": s.measure.value,
                "base_elevation": s.base,
                "top_elevation": s.top,
                "measuredHeight": s.top - s.base,
            },
            "geometry": [{
                "type": "Solid",
                "lod": "1",
                "boundaries": [shell],
                "semantics": {
                    "surfaces": [{"type": _SEMANTIC[k]} for k in kinds],
                    "values": [values],
                },
            }],
        }
        offset += len(m.vertices)
    doc = {
        "type": "CityJSON",
        "version": CITYJSON_VERSION,
        "transform": {"scale": [QUANT, QUANT, QUANT], "translate": translate.tolist()},
        "CityObjects": objects,
        "vertices": vertices,
    }
    if title:
        doc["metadata"] = {"title": title}
    return doc


def write_cityjson(solids: Sequence[Lod1Solid], path, title: str | None = None) -> None:
    doc = cityjson_document(solids, title)
    Path(path).write_text(json.dumps(doc, separators=(",", ":")) + "\n")


def read_cityjson(path) -> list[Lod1Solid]:
    """Rebuild prisms from a file written by :func:`write_cityjson`."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, path, f"line {exc.lineno}") from None
    if doc.get("type") != "CityJSON":
        raise ParseError("not a CityJSON document", path)
    tr = doc.get("transform", {"scale": [1, 1, 1], "translate": [0, 0, 0]})
    verts = np.asarray(doc["vertices"], dtype=np.float64) * np.asarray(tr["scale"]) + np.asarray(tr["translate"])
    out = []
    for oid, obj in doc["CityObjects"].items():
        if obj.get("type") != "Building":
            continue
        geom = next((g for g in obj.get("geometry", []) if g["type"] == "Solid"), None)
        if geom is None:
            raise ParseError(f"building {oid} has no Solid geometry", path)
        shell = geom["boundaries"][0]
        sem = geom["semantics"]
        types = [sem["surfaces"][v]["type"] for v in sem["values"][0]]
        roof = shell[types.index("RoofSurface")]
        ground = shell[types.index("GroundSurface")]
        rings = [verts[loop][:, :2] for loop in roof]
        attrs = obj.get("attributes", {})
        try:
            fp = Footprint(
                id=attrs.get("footprint_id", oid),
                outer=Ring(rings[0]),
                holes=tuple(Ring(r) for r in rings[1:]),
                source="predicted",
            )
        except InvalidGeometryError as exc:
            raise ParseError(f"building {oid}: {exc}", path) from None
        top = float(verts[roof[0][0], 2])
        base = float(verts[ground[0][0], 2])
        out.append(Lod1Solid(oid, fp, base, top, HeightMeasure(attrs.get("measure", "median"))))
    return out


# ---------------------------------------------------------------------------
# Triangulation and OBJ


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def _segments_cross(p1, p2, q1, q2) -> bool:
    d1, d2 = _cross(q1, q2, p1), _cross(q1, q2, p2)
    d3, d4 = _cross(p1, p2, q1), _cross(p1, p2, q2)
    return d1 * d2 < 0 and d3 * d4 < 0


def _bridge_holes(xy: np.ndarray, outer: list[int], holes: list[list[int]]) -> list[int]:
    """Splice each hole into the outer loop through a mutually visible vertex pair."""
    poly = list(outer)
    pending = sorted(holes, key=lambda h: -max(xy[i, 0] for i in h))
    for h_pos, hole in enumerate(pending):
        m_local = max(range(len(hole)), key=lambda k: (xy[hole[k], 0], -xy[hole[k], 1]))
        m = hole[m_local]
        edges = [(poly[k], poly[(k + 1) % len(poly)]) for k in range(len(poly))]
        for other in pending[h_pos:]:
            edges += [(other[k], other[(k + 1) % len(other)]) for k in range(len(other))]
        order = sorted(range(len(poly)), key=lambda k: (float(np.hypot(*(xy[poly[k]] - xy[m]))), k))
        chosen = None
        for k in order:
            p = poly[k]
            if np.array_equal(xy[p], xy[m]):
                continue
            if any(_segments_cross(xy[m], xy[p], xy[a], xy[b]) for a, b in edges if p not in (a, b) and m not in (a, b)):
                continue
            prev, nxt = xy[poly[k - 1]], xy[poly[(k + 1) % len(poly)]]
            if not _in_cone(prev, xy[p], nxt, xy[m]):
                continue
            chosen = k
            break
        if chosen is None:
            raise InvalidGeometryError("could not bridge a hole into its outer ring")
        rotated = hole[m_local:] + hole[:m_local]
        poly = poly[:chosen + 1] + rotated + [m] + poly[chosen:]
    return poly


def _in_cone(prev, v, nxt, target) -> bool:
    """Is ``target`` inside the interior angle at ``v`` of a CCW polygon?"""
    if _cross(prev, v, nxt) >= 0:
        return _cross(v, nxt, target) >= 0 and _cross(prev, v, target) >= 0
    return not (_cross(v, nxt, target) < 0 and _cross(prev, v, target) < 0)


def ear_clip(xy: np.ndarray, outer: list[int], holes: Sequence[list[int]] = ()) -> list[tuple[int, int, int]]:
    """Triangulate a CCW outer loop with CW holes; returns CCW index triples."""
    poly = _bridge_holes(xy, list(outer), [list(h) for h in holes]) if holes else list(outer)
    tris = []
    while len(poly) > 3:
        n = len(poly)
        clipped = False
        for k in range(n):
            a, b, c = poly[k - 1], poly[k], poly[(k + 1) % n]
            pa, pb, pc = xy[a], xy[b], xy[c]
            cr = _cross(pa, pb, pc)
            if cr == 0 and not np.array_equal(pa, pc):
                if np.dot(pb - pa, pc - pb) > 0:
                    # straight-through vertex contributes no area
                    del poly[k]
                    clipped = True
                    break
                continue
            if cr <= 0:
                continue
            if _any_inside(xy, poly, (a, b, c)):
                continue
            tris.append((a, b, c))
            del poly[k]
            clipped = True
            break
        if not clipped:
            raise InvalidGeometryError("ear clipping stalled; polygon is not simple")
    if len(poly) == 3:
        a, b, c = poly
        if _cross(xy[a], xy[b], xy[c]) > 0:
            tris.append((a, b, c))
    return tris


def _any_inside(xy, poly, tri) -> bool:
    a, b, c = (xy[i] for i in tri)
    for i in poly:
        if i in tri:
            continue
        p = xy[i]
        if np.array_equal(p, a) or np.array_equal(p, b) or np.array_equal(p, c):
            continue
        if _cross(a, b, p) >= 0 and _cross(b, c, p) >= 0 and _cross(c, a, p) >= 0:
            return True
    return False


def footprint_triangles(fp: Footprint) -> tuple[np.ndarray, list[tuple[int, int, int]]]:
    rings = [r.vertices for r in fp.rings]
    xy = np.concatenate(rings)
    loops, start = [], 0
    for r in rings:
        loops.append(list(range(start, start + len(r))))
        start += len(r)
    return xy, ear_clip(xy, loops[0], loops[1:])


def write_obj(solids: Sequence[Lod1Solid], path) -> None:
    if not solids:
        raise ValueError("write_obj needs at least one solid")
    lines = ["# LOD1 building prisms"]
    base_index = 1
    for s in sorted(solids, key=lambda s: s.id):
        mesh = solid_mesh(s)
        n = len(mesh.vertices) // 2
        _, tris = footprint_triangles(s.footprint)
        lines.append(f"o {s.id}")
        lines.append(f"g {s.id}")
        for x, y, z in mesh.vertices.tolist():
            lines.append(f"v {x!r} {y!r} {z!r}")
        faces_idx = []
        faces_idx += [(a, c, b) for a, b, c in tris]  # ground, facing down
        faces_idx += [(a + n, b + n, c + n) for a, b, c in tris]
        for surf, kind in zip(mesh.surfaces, mesh.kinds):
            if kind == WALL:
                i, j, jt, it = surf[0]
                faces_idx += [(i, j, jt), (i, jt, it)]
        for a, b, c in faces_idx:
            lines.append(f"f {a + base_index} {b + base_index} {c + base_index}")
        base_index += len(mesh.vertices)
    Path(path).write_text("\n".join(lines) + "\n")
