"""Classified LiDAR points: loading, class filtering, footprint clipping."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BufferFailure, ParseError
from .geometry import Footprint, Ring, buffer_polygon, contains_points, convex_hull

logger = logging.getLogger(__name__)

GROUND = 2
BUILDING = 6
DEFAULT_INDEX_CELL = 5.0

# byte offsets inside the public header block (identical for LAS 1.2-1.4)
_HDR_MIN_SIZE = 227
_LAS_POINT_FORMATS = {0: 20, 1: 28, 6: 30}


class GridIndex:
    """Uniform bucket index over (x, y)."""

    def __init__(self, xy: np.ndarray, cell: float):
        if cell <= 0:
            raise ValueError("index cell must be positive")
        self.cell = float(cell)
        if len(xy) == 0:
            self.origin = np.zeros(2)
            self.shape = (0, 0)
            self._order = np.zeros(0, dtype=np.int64)
            self._starts = np.zeros(1, dtype=np.int64)
            return
        self.origin = xy.min(axis=0)
        ij = np.floor((xy - self.origin) / self.cell).astype(np.int64)
        self.shape = (int(ij[:, 0].max()) + 1, int(ij[:, 1].max()) + 1)
        key = ij[:, 0] * self.shape[1] + ij[:, 1]
        self._order = np.argsort(key, kind="stable")
        counts = np.bincount(key, minlength=self.shape[0] * self.shape[1])
        self._starts = np.concatenate([[0], np.cumsum(counts)])

    def candidates(self, bounds) -> np.ndarray:
        """Indices of points in cells overlapping ``(minx, miny, maxx, maxy)``, ascending."""
        if self.shape == (0, 0):
            return np.zeros(0, dtype=np.int64)
        minx, miny, maxx, maxy = bounds
        i0 = max(int(np.floor((minx - self.origin[0]) / self.cell)), 0)
        j0 = max(int(np.floor((miny - self.origin[1]) / self.cell)), 0)
        i1 = min(int(np.floor((maxx - self.origin[0]) / self.cell)), self.shape[0] - 1)
        j1 = min(int(np.floor((maxy - self.origin[1]) / self.cell)), self.shape[1] - 1)
        if i0 > i1 or j0 > j1:
            return np.zeros(0, dtype=np.int64)
        chunks = []
        for i in range(i0, i1 + 1):
            a = self._starts[i * self.shape[1] + j0]
            b = self._starts[i * self.shape[1] + j1 + 1]
            chunks.append(self._order[a:b])
        return np.sort(np.concatenate(chunks))


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Immutable arrays of x, y, z and ASPRS class codes."""

    xyz: np.ndarray
    classes: np.ndarray
    index_cell: float = DEFAULT_INDEX_CELL
    _index: GridIndex | None = field(default=None, repr=False)

    def __post_init__(self):
        xyz = np.ascontiguousarray(np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3))
        cls = np.ascontiguousarray(np.asarray(self.classes).reshape(-1))
        if len(cls) != len(xyz):
            raise ValueError(f"{len(xyz)} points but {len(cls)} class codes")
        if not np.all(np.isfinite(xyz)):
            raise ValueError("point coordinates must be finite")
        if len(cls) and (cls.min() < 0 or cls.max() > 255):
            raise ValueError("class codes must lie in [0, 255]")
        cls = cls.astype(np.uint8)
        xyz.flags.writeable = False
        cls.flags.writeable = False
        object.__setattr__(self, "xyz", xyz)
        object.__setattr__(self, "classes", cls)

    def __len__(self):
        return len(self.xyz)

    @property
    def x(self):
        return self.xyz[:, 0]

    @property
    def y(self):
        return self.xyz[:, 1]

    @property
    def z(self):
        return self.xyz[:, 2]

    @property
    def bounds(self):
        if len(self) == 0:
            return None
        lo, hi = self.xyz.min(axis=0), self.xyz.max(axis=0)
        return tuple(float(v) for v in (lo[0], lo[1], lo[2], hi[0], hi[1], hi[2]))

    @property
    def index(self) -> GridIndex:
        if self._index is None:
            object.__setattr__(self, "_index", GridIndex(self.xyz[:, :2], self.index_cell))
        return self._index

    def subset(self, idx) -> "PointCloud":
        return PointCloud(self.xyz[idx], self.classes[idx], self.index_cell)

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros(0, dtype=np.uint8))

    @classmethod
    def concat(cls, clouds) -> "PointCloud":
        clouds = list(clouds)
        if not clouds:
            return cls.empty()
        return cls(np.concatenate([c.xyz for c in clouds]), np.concatenate([c.classes for c in clouds]))


# ---------------------------------------------------------------------------
# Loading


def load_points(path, format: str | None = None) -> PointCloud:
    """Read a LAS file or a whitespace ``x y z class`` text file.

    ``format`` is ``"las"`` or ``"xyzc"``; when omitted it is taken from the
    file extension.
    """
    path = Path(path)
    if format is None:
        format = "las" if path.suffix.lower() == ".las" else "xyzc"
    if format == "las":
        return _read_las(path)
    if format == "xyzc":
        return _read_xyzc(path)
    raise ValueError(f"unknown point format {format!r}")


def _read_xyzc(path: Path) -> PointCloud:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            fields = text.split()
            if len(fields) != 4:
                raise ParseError(f"expected 4 fields 'x y z class', got {len(fields)}", path, f"line {lineno}")
            try:
                x, y, z = (float(f) for f in fields[:3])
                c = int(fields[3])
            except ValueError as exc:
                raise ParseError(f"non-numeric field ({exc})", path, f"line {lineno}") from None
            if not 0 <= c <= 255:
                raise ParseError(f"class {c} outside [0, 255]", path, f"line {lineno}")
            rows.append((x, y, z, c))
    if not rows:
        return PointCloud.empty()
    arr = np.array(rows, dtype=np.float64)
    try:
        return PointCloud(arr[:, :3], arr[:, 3].astype(np.int64))
    except ValueError as exc:
        raise ParseError(str(exc), path) from None


def _read_las(path: Path) -> PointCloud:
    data = path.read_bytes()
    if len(data) < _HDR_MIN_SIZE:
        raise ParseError(f"file shorter than the {_HDR_MIN_SIZE}-byte LAS header", path, "byte 0")
    if data[:4] != b"LASF":
        raise ParseError("missing 'LASF' signature", path, "byte 0")
    major, minor = data[24], data[25]
    if major != 1 or not 2 <= minor <= 4:
        raise ParseError(f"unsupported LAS version {major}.{minor}", path, "byte 24")
    header_size, = struct.unpack_from("<H", data, 94)
    offset_to_points, = struct.unpack_from("<I", data, 96)
    fmt = data[104]
    record_len, = struct.unpack_from("<H", data, 105)
    count, = struct.unpack_from("<I", data, 107)
    scale = struct.unpack_from("<3d", data, 131)
    offset = struct.unpack_from("<3d", data, 155)
    if header_size < _HDR_MIN_SIZE:
        raise ParseError(f"header size {header_size} too small", path, "byte 94")
    if fmt & 0xC0:
        raise ParseError("compressed (LAZ) point data is not supported", path, "byte 104")
    if fmt not in _LAS_POINT_FORMATS:
        raise ParseError(f"unsupported point data format {fmt}", path, "byte 104")
    if record_len < _LAS_POINT_FORMATS[fmt]:
        raise ParseError(f"record length {record_len} too short for format {fmt}", path, "byte 105")
    if minor == 4 and header_size >= 375:
        count64, = struct.unpack_from("<Q", data, 247)
        if count64:
            count = count64
    if any(s == 0 for s in scale):
        raise ParseError("zero scale factor", path, "byte 131")
    end = offset_to_points + count * record_len
    if offset_to_points < header_size or end > len(data):
        raise ParseError(
            f"point block [{offset_to_points}, {end}) exceeds file size {len(data)}", path, "byte 96"
        )
    class_off = 16 if fmt == 6 else 15
    dtype = np.dtype({
        "names": ["X", "Y", "Z", "c"],
        "formats": ["<i4", "<i4", "<i4", "u1"],
        "offsets": [0, 4, 8, class_off],
        "itemsize": record_len,
    })
    rec = np.frombuffer(data, dtype=dtype, count=count, offset=offset_to_points)
    xyz = np.empty((count, 3), dtype=np.float64)
    for k, name in enumerate("XYZ"):
        xyz[:, k] = rec[name].astype(np.float64) * scale[k] + offset[k]
    classes = rec["c"].copy()
    if fmt != 6:
        classes &= 0x1F
    return PointCloud(xyz, classes)


def write_las(pc: PointCloud, path, scale: float = 0.001, point_format: int = 0, minor: int = 2) -> None:
    """Write an uncompressed LAS file (formats 0, 1 or 6)."""
    if point_format not in _LAS_POINT_FORMATS:
        raise ValueError(f"unsupported point format {point_format}")
    if point_format == 6 and minor < 4:
        raise ValueError("point format 6 requires LAS 1.4")
    n = len(pc)
    header_size = 375 if minor == 4 else 227
    record_len = _LAS_POINT_FORMATS[point_format]
    if n:
        lo = pc.xyz.min(axis=0)
        hi = pc.xyz.max(axis=0)
    else:
        lo = hi = np.zeros(3)
    offset = np.floor(lo)
    raw = np.rint((pc.xyz - offset) / scale).astype(np.int64) if n else np.zeros((0, 3), np.int64)
    if n and (raw.max() > 2**31 - 1 or raw.min() < -(2**31)):
        raise ValueError("coordinates overflow int32 at this scale")

    hdr = bytearray(header_size)
    hdr[0:4] = b"LASF"
    hdr[24], hdr[25] = 1, minor
    hdr[26:58] = b"lod1kit".ljust(32, b"\0")
    hdr[58:90] = b"lod1kit".ljust(32, b"\0")
    struct.pack_into("<HII", hdr, 94, header_size, header_size, 0)
    struct.pack_into("<BHI", hdr, 104, point_format, record_len, n if point_format < 6 else 0)
    struct.pack_into("<3d3d", hdr, 131, scale, scale, scale, *offset)
    struct.pack_into("<6d", hdr, 179, hi[0], lo[0], hi[1], lo[1], hi[2], lo[2])
    if minor == 4:
        struct.pack_into("<Q", hdr, 247, n)

    dtype = np.dtype({
        "names": ["X", "Y", "Z", "c"],
        "formats": ["<i4", "<i4", "<i4", "u1"],
        "offsets": [0, 4, 8, 16 if point_format == 6 else 15],
        "itemsize": record_len,
    })
    rec = np.zeros(n, dtype=dtype)
    rec["X"], rec["Y"], rec["Z"] = raw[:, 0], raw[:, 1], raw[:, 2]
    rec["c"] = pc.classes
    with open(path, "wb") as fh:
        fh.write(bytes(hdr))
        fh.write(rec.tobytes())


def write_xyzc(pc: PointCloud, path) -> None:
    with open(path, "w") as fh:
        fh.write("# x y z class\n")
        for (x, y, z), c in zip(pc.xyz.tolist(), pc.classes.tolist()):
            fh.write(f"{x!r} {y!r} {z!r} {c}\n")


# ---------------------------------------------------------------------------
# Queries


def filter_by_class(pc: PointCloud, classes) -> PointCloud:
    codes = np.array(sorted(set(classes)), dtype=np.int64)
    if len(codes) == 0:
        return PointCloud.empty()
    return pc.subset(np.isin(pc.classes, codes))


def clip_to_footprint(pc: PointCloud, fp: Footprint) -> PointCloud:
    """Points inside ``fp`` (boundary inclusive), in input order."""
    cand = pc.index.candidates(fp.bounds)
    if len(cand) == 0:
        return PointCloud.empty()
    inside = contains_points(fp, pc.xyz[cand, :2])
    return pc.subset(cand[inside])


def ground_ring_points(pc: PointCloud, fp: Footprint, ring_width: float = 2.0,
                       ground_classes=(GROUND,)) -> PointCloud:
    """Ground points under ``fp`` or within ``ring_width`` of it."""
    if ring_width <= 0:
        raise ValueError(f"ring_width must be positive, got {ring_width}")
    try:
        region = buffer_polygon(_without_holes(fp), ring_width)
    except BufferFailure:
        # jagged outlines cannot take a 2 m miter offset; their hull always can
        hull = Footprint(id=fp.id, outer=Ring(convex_hull(fp.outer.vertices)), source=fp.source)
        region = buffer_polygon(hull, ring_width)
    return filter_by_class(clip_to_footprint(pc, region), ground_classes)


def _without_holes(fp: Footprint) -> Footprint:
    # courtyard ground counts as local ground for the base estimate
    return Footprint(id=fp.id, outer=fp.outer, source=fp.source) if fp.holes else fp
