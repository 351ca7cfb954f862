"""Synthetic LiDAR scenes with known truth, and footprint perturbation.

Scenes are rectangles or L-shapes with flat or gabled roofs on flat or
ramped terrain. Every building draws from its own generator seeded by
``(seed, index + 1)`` and the ground from ``(seed, 0)``, so one building's
points do not depend on how many others there are or on thread order.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, InvalidGeometryError, PerturbationError, SceneTooDenseError
from .geometry import Footprint, Ring, centroid, contains_points, convex_hull, polygon_area, polygon_iou, polygon_perimeter
from .heights import HeightMeasure
from .pointcloud import BUILDING, GROUND, PointCloud

logger = logging.getLogger(__name__)

EDGE_CLEARANCE = 0.1
MAX_PLACEMENT_TRIES = 2000
IOU_TOLERANCE = 0.02
MAX_BISECTION_STEPS = 60


@dataclass(frozen=True)
class SceneSpec:
    extent: tuple[float, float] = (100.0, 100.0)
    n_buildings: int = 20
    l_shape_fraction: float = 0.0
    size_range: tuple[float, float] = (6.0, 16.0)
    height_range: tuple[float, float] = (3.0, 12.0)
    roof: str = "flat"
    ridge_rise: tuple[float, float] = (1.0, 3.0)
    density: float = 8.0
    sigma_z: float = 0.02
    terrain: str = "flat"
    slope: float = 0.0
    ground_z: float = 0.0
    gap: float = 1.0
    margin: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if not self.density > 0:
            raise ConfigError(f"density must be positive, got {self.density}")
        if self.sigma_z < 0:
            raise ConfigError(f"sigma_z must be non-negative, got {self.sigma_z}")
        if self.n_buildings < 0:
            raise ConfigError(f"n_buildings must be non-negative, got {self.n_buildings}")
        if not 0 <= self.l_shape_fraction <= 1:
            raise ConfigError(f"l_shape_fraction must be in [0, 1], got {self.l_shape_fraction}")
        if self.roof not in ("flat", "gabled"):
            raise ConfigError(f"roof must be 'flat' or 'gabled', got {self.roof!r}")
        if self.terrain not in ("flat", "ramp"):
            raise ConfigError(f"terrain must be 'flat' or 'ramp', got {self.terrain!r}")
        for name in ("extent", "size_range", "height_range", "ridge_rise"):
            lo, hi = getattr(self, name)
            if name == "extent" and not (lo > 0 and hi > 0):
                raise ConfigError(f"extent must be positive, got {(lo, hi)}")
            if name != "extent" and not 0 <= lo <= hi:
                raise ConfigError(f"{name} must satisfy 0 <= min <= max, got {(lo, hi)}")
        if self.size_range[0] <= 2 * EDGE_CLEARANCE + 1:
            raise ConfigError("size_range minimum must exceed 1.2 m")
        if self.gap < 1.0:
            raise ConfigError(f"gap must be at least 1 m, got {self.gap}")

    def terrain_z(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        if self.terrain == "ramp":
            return self.ground_z + self.slope * x
        return np.full_like(x, self.ground_z)


_PAIRS = {"extent", "size_range", "height_range", "ridge_rise"}


def parse_scene_spec(text: str, source: str = "<spec>") -> SceneSpec:
    """Parse ``key = value`` lines (``#`` starts a comment) into a SceneSpec.

    Pair-valued keys take two numbers separated by spaces, commas or ``x``.
    """
    types = {f.name: f.type for f in fields(SceneSpec)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"{source}:{lineno}: unknown scene key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate scene key {key!r}")
        try:
            if key in _PAIRS:
                parts = val.replace(",", " ").replace("x", " ").split()
                if len(parts) != 2:
                    raise ValueError("expected two numbers")
                values[key] = (float(parts[0]), float(parts[1]))
            elif key in ("n_buildings", "seed"):
                values[key] = int(val)
            elif key in ("roof", "terrain"):
                values[key] = val.lower()
            else:
                values[key] = float(val)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {val!r} ({exc})") from None
    return SceneSpec(**values)


def load_scene_spec(path) -> SceneSpec:
    path = Path(path)
    return parse_scene_spec(path.read_text(), str(path))


# ---------------------------------------------------------------------------
# Ground truth


@dataclass(frozen=True)
class TruthBuilding:
    """One building's exact geometry.

    ``eave`` is the flat-roof elevation or the gable eave; ``ridge`` equals
    ``eave`` for flat roofs. ``roof_low`` is the lowest roof elevation that
    can be sampled once the edge clearance band is excluded.
    """

    footprint: Footprint
    base: float
    eave: float
    ridge: float
    roof: str
    roof_low: float

    @property
    def id(self) -> str:
        return self.footprint.id

    @property
    def area(self) -> float:
        return polygon_area(self.footprint)

    @property
    def perimeter(self) -> float:
        return polygon_perimeter(self.footprint)

    def height(self, measure=HeightMeasure.MEDIAN) -> float | None:
        """Noise-free height under a measure; gabled roofs sample z uniformly in [roof_low, ridge]."""
        m = HeightMeasure(measure)
        if self.roof == "flat":
            return 0.0 if m is HeightMeasure.RANGE else self.eave - self.base
        lo, hi = self.roof_low, self.ridge
        if m is HeightMeasure.MAXIMUM:
            return hi - self.base
        if m is HeightMeasure.RANGE:
            return hi - lo
        if m is HeightMeasure.MEDIAN:
            return (lo + hi) / 2 - self.base
        if m is HeightMeasure.P90:
            return lo + 0.9 * (hi - lo) - self.base
        return None  # uniform roof elevations have no mode

    def wall_area(self, measure=HeightMeasure.MEDIAN) -> float | None:
        h = self.height(measure)
        return None if h is None else self.perimeter * h


@dataclass(frozen=True)
class GroundTruth:
    spec: SceneSpec
    buildings: tuple[TruthBuilding, ...]

    @property
    def footprints(self) -> list[Footprint]:
        return [b.footprint for b in self.buildings]

    def by_id(self) -> dict[str, TruthBuilding]:
        return {b.id: b for b in self.buildings}


# ---------------------------------------------------------------------------
# Scene generation


def _shape(rng: np.random.Generator, spec: SceneSpec):
    """Local outline centred on the origin plus its (w, h) bounding size."""
    w, h = rng.uniform(*spec.size_range, size=2)
    if rng.random() < spec.l_shape_fraction:
        cw = w * rng.uniform(0.3, 0.6)
        ch = h * rng.uniform(0.3, 0.6)
        v = np.array([[0, 0], [w, 0], [w, h - ch], [w - cw, h - ch], [w - cw, h], [0, h]], dtype=np.float64)
        kind = "l-shape"
    else:
        v = np.array([[0, 0], [w, 0], [w, h], [0, h]], dtype=np.float64)
        kind = "rect"
    return v - [w / 2, h / 2], float(w), float(h), kind


def _place(spec: SceneSpec) -> list[tuple[np.ndarray, float, float, str]]:
    rng = np.random.default_rng([spec.seed, 2**32 - 1])
    ex, ey = spec.extent
    placed, boxes = [], []
    tries = 0
    while len(placed) < spec.n_buildings:
        if tries >= MAX_PLACEMENT_TRIES:
            raise SceneTooDenseError(
                f"placed {len(placed)} of {spec.n_buildings} buildings in {tries} tries; "
                f"enlarge the extent or reduce n_buildings/size_range"
            )
        tries += 1
        v, w, h, kind = _shape(rng, spec)
        lo_x, hi_x = spec.margin + w / 2, ex - spec.margin - w / 2
        lo_y, hi_y = spec.margin + h / 2, ey - spec.margin - h / 2
        if hi_x <= lo_x or hi_y <= lo_y:
            continue
        cx, cy = rng.uniform(lo_x, hi_x), rng.uniform(lo_y, hi_y)
        box = (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
        g = spec.gap
        if any(box[0] < b[2] + g and b[0] < box[2] + g and box[1] < b[3] + g and b[1] < box[3] + g for b in boxes):
            continue
        boxes.append(box)
        placed.append((v + [cx, cy], w, h, kind))
    return placed


def _edge_distance(fp: Footprint, pts: np.ndarray) -> np.ndarray:
    d = np.full(len(pts), np.inf)
    for ring in fp.rings:
        p, q = ring.edges()
        for a, b in zip(p, q):
            ab = b - a
            t = np.clip(((pts - a) @ ab) / float(ab @ ab), 0.0, 1.0)
            d = np.minimum(d, np.hypot(*(pts - a - t[:, None] * ab).T))
    return d


def _sample_inside(rng, fp: Footprint, n: int) -> np.ndarray:
    x0, y0, x1, y1 = fp.bounds
    out = np.empty((0, 2))
    while len(out) < n:
        batch = rng.uniform([x0, y0], [x1, y1], size=(max(64, 2 * (n - len(out))), 2))
        ok = contains_points(fp, batch) & (_edge_distance(fp, batch) > EDGE_CLEARANCE)
        out = np.vstack([out, batch[ok]])
    return out[:n]


def _roof_z(spec: SceneSpec, v, w, h, eave, ridge, xy) -> np.ndarray:
    if spec.roof == "flat" or ridge == eave:
        return np.full(len(xy), eave)
    lo = v.min(axis=0)
    local = xy - lo
    # ridge runs along the longer side
    if w >= h:
        d = np.abs(local[:, 1] - h / 2) / (h / 2)
    else:
        d = np.abs(local[:, 0] - w / 2) / (w / 2)
    return ridge - (ridge - eave) * d


def _building(spec: SceneSpec, k: int, v, w, h, kind):
    rng = np.random.default_rng([spec.seed, k + 1])
    fp = Footprint.from_coords(v, id=f"t{k:04d}", source="reference")
    c = centroid(fp)
    base = float(spec.terrain_z(c.x, c.y))
    eave = base + float(rng.uniform(*spec.height_range))
    gabled = spec.roof == "gabled" and kind == "rect"
    ridge = eave + float(rng.uniform(*spec.ridge_rise)) if gabled else eave
    half = min(w, h) / 2
    roof_low = eave + (ridge - eave) * EDGE_CLEARANCE / half if gabled else eave
    truth = TruthBuilding(fp, base, eave, ridge, "gabled" if gabled else "flat", roof_low)

    n = int(rng.poisson(spec.density * polygon_area(fp)))
    xy = _sample_inside(rng, fp, n)
    z = _roof_z(spec, v, w, h, eave, ridge, xy) + rng.normal(0.0, spec.sigma_z, n)
    return truth, np.column_stack([xy, z])


def _ground(spec: SceneSpec, fps: list[Footprint]) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, 0])
    ex, ey = spec.extent
    n = int(rng.poisson(spec.density * ex * ey))
    xy = rng.uniform([0, 0], [ex, ey], size=(n, 2))
    keep = np.ones(n, dtype=bool)
    for fp in fps:
        x0, y0, x1, y1 = fp.bounds
        near = (xy[:, 0] > x0 - 1) & (xy[:, 0] < x1 + 1) & (xy[:, 1] > y0 - 1) & (xy[:, 1] < y1 + 1)
        idx = np.nonzero(near)[0]
        if len(idx):
            bad = contains_points(fp, xy[idx]) | (_edge_distance(fp, xy[idx]) <= EDGE_CLEARANCE)
            keep[idx[bad]] = False
    xy = xy[keep]
    z = spec.terrain_z(xy[:, 0], xy[:, 1]) + rng.normal(0.0, spec.sigma_z, len(xy))
    return np.column_stack([xy, z])


def generate_scene(spec: SceneSpec, workers: int = 1) -> tuple[PointCloud, GroundTruth]:
    placed = _place(spec)
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(lambda a: _building(spec, a[0], *a[1]), enumerate(placed)))
    else:
        results = [_building(spec, k, *p) for k, p in enumerate(placed)]
    truths = tuple(t for t, _ in results)
    ground = _ground(spec, [t.footprint for t in truths])
    roof = [pts for _, pts in results]
    xyz = np.vstack([ground] + roof) if roof else ground
    classes = np.concatenate([np.full(len(ground), GROUND)] + [np.full(len(p), BUILDING) for p in roof])
    logger.info("scene: %d buildings, %d ground and %d roof points",
                len(truths), len(ground), len(xyz) - len(ground))
    return PointCloud(xyz, classes.astype(np.uint8)), GroundTruth(spec, truths)


# ---------------------------------------------------------------------------
# Perturbation


PERTURB_MODES = ("mixed", "translate", "scale", "edge")


@dataclass(frozen=True)
class Perturbation:
    footprint: Footprint
    iou: float
    magnitude: float
    steps: int


def _iou_cell(fp: Footprint) -> float:
    # keep at least ~400 cells across small shapes
    x0, y0, x1, y1 = fp.bounds
    return min(0.05, min(x1 - x0, y1 - y0) / 400)


def _perturber(fp: Footprint, rng: np.random.Generator, mode: str):
    """Return ``apply(t)`` mapping a magnitude in meters to a perturbed footprint."""
    if mode not in PERTURB_MODES:
        raise ValueError(f"unknown perturbation mode {mode!r}; choose from {PERTURB_MODES}")
    c = np.array(centroid(fp))
    size = math.sqrt(polygon_area(fp))
    if mode == "translate":
        axis = rng.integers(4)
        direction = np.array([[1, 0], [0, 1], [-1, 0], [0, -1]][axis], dtype=np.float64)
        weights = (1.0, 0.0, 0.0)
    else:
        phi = rng.uniform(0, 2 * math.pi)
        direction = np.array([math.cos(phi), math.sin(phi)])
        if mode == "mixed":
            weights = tuple(rng.dirichlet([1.0, 1.0, 1.0]))
        else:
            weights = (0.0, 1.0, 0.0) if mode == "scale" else (0.0, 0.0, 1.0)
    grow = rng.random() < 0.5
    outer = fp.outer.vertices
    edge = int(rng.integers(len(outer)))
    a, b = outer[edge], outer[(edge + 1) % len(outer)]
    tangent = (b - a) / np.hypot(*(b - a))
    normal = np.array([tangent[1], -tangent[0]])  # outward for a ccw ring

    def apply(t: float) -> Footprint:
        wt, ws, we = weights
        k = 1 + (ws * t / size) if grow else 1 / (1 + ws * t / size)

        def fn(v):
            v = c + (v - c) * k
            return v + wt * t * direction

        out = fp.transformed(fn)
        if we > 0:
            v = out.outer.vertices.copy()
            j = (edge + 1) % len(v)
            v[edge] += we * t * normal
            v[j] += we * t * normal
            out = replace(out, outer=Ring(v))
        return out

    return apply


def perturb(fp: Footprint, target: float, seed: int = 0, mode: str = "mixed",
            tol: float = IOU_TOLERANCE, cell: float | None = None) -> Perturbation:
    """Bisect a random perturbation's magnitude until IoU with ``fp`` is within ``tol`` of ``target``."""
    if not 0 < target <= 1:
        raise ValueError(f"target IoU must be in (0, 1], got {target}")
    if target == 1:
        return Perturbation(fp, 1.0, 0.0, 0)
    cell = _iou_cell(fp) if cell is None else cell
    rng = np.random.default_rng(seed)
    apply = _perturber(fp, rng, mode)

    def iou_at(t):
        try:
            return polygon_iou(apply(t), fp, cell)
        except InvalidGeometryError:
            return -1.0

    lo, hi = 0.0, 0.1 * math.sqrt(polygon_area(fp))
    steps = 0
    while iou_at(hi) > target and steps < MAX_BISECTION_STEPS:
        lo, hi = hi, 2 * hi
        steps += 1
    best = None
    while steps < MAX_BISECTION_STEPS:
        mid = (lo + hi) / 2
        v = iou_at(mid)
        steps += 1
        if v >= 0 and (best is None or abs(v - target) < abs(best[1] - target)):
            best = (mid, v)
        if v >= 0 and abs(v - target) <= tol / 20:
            break
        if v > target:
            lo = mid
        else:
            hi = mid
    if best is None or abs(best[1] - target) > tol:
        raise PerturbationError(f"footprint {fp.id}: IoU target {target} not reached in {steps} steps")
    return Perturbation(apply(best[0]), best[1], best[0], steps)


def perturb_to_iou(fp: Footprint, target: float, seed: int = 0, mode: str = "mixed") -> Footprint:
    return perturb(fp, target, seed, mode).footprint


def merge_footprints(a: Footprint, b: Footprint, id: str | None = None) -> Footprint:
    """Convex hull of two outlines, imitating a prediction that fuses neighbours."""
    hull = convex_hull(np.vstack([a.outer.vertices, b.outer.vertices]))
    return Footprint.from_coords(hull, id=id or f"{a.id}+{b.id}", source="predicted", flags=("merged",))


def perturb_all(fps, target: float, seed: int = 0, mode: str = "mixed") -> list[Perturbation]:
    """Perturb each footprint with its own derived seed; ids are kept and source set to predicted."""
    out = []
    for k, fp in enumerate(fps):
        p = perturb(fp, target, seed * 100003 + k, mode)
        out.append(replace(p, footprint=replace(p.footprint, source="predicted")))
    return out
