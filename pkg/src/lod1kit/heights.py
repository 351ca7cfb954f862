"""Per-building roof statistics and base elevation.

Measures are computed on absolute point elevations. A building's height for
maximum, median, mode and p90 is that elevation minus the base; for range
the spread itself is the height.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NoPointsError
from .geometry import Footprint
from .pointcloud import BUILDING, GROUND, PointCloud, clip_to_footprint, filter_by_class, ground_ring_points
from .raster import rasterize_polygon

logger = logging.getLogger(__name__)

MODE_BIN = 0.1
GROUND_RING = 2.0
EDGE_EPS = 1e-9


class HeightMeasure(str, enum.Enum):
    MAXIMUM = "maximum"
    RANGE = "range"
    MODE = "mode"
    MEDIAN = "median"
    P90 = "p90"

    @classmethod
    def parse(cls, text: str) -> "HeightMeasure":
        aliases = {"max": "maximum", "90": "p90", "percentile90": "p90"}
        key = aliases.get(text.strip().lower(), text.strip().lower())
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown height measure {text!r}; choose from {[m.value for m in cls]}") from None


ALL_MEASURES = tuple(HeightMeasure)


def _values(zs) -> np.ndarray:
    a = np.asarray(zs, dtype=np.float64).ravel()
    if a.size == 0:
        raise NoPointsError("height statistic of an empty sample")
    return a


def stat_max(zs) -> float:
    return float(np.max(_values(zs)))


def stat_min(zs) -> float:
    return float(np.min(_values(zs)))


def stat_range(zs) -> float:
    a = _values(zs)
    return float(np.max(a) - np.min(a))


def stat_median(zs) -> float:
    a = np.sort(_values(zs))
    n = len(a)
    if n % 2:
        return float(a[n // 2])
    return float((a[n // 2 - 1] + a[n // 2]) / 2)


def mode_bin_index(zs, bin: float = MODE_BIN) -> np.ndarray:
    """Index k with ``k*bin <= z < (k+1)*bin``.

    Values within 1e-9 of a bin width below an edge count as on the edge, so
    decimal inputs such as 0.3 land in [0.3, 0.4) despite binary rounding.
    """
    a = np.asarray(zs, dtype=np.float64)
    return np.floor(a / bin + EDGE_EPS).astype(np.int64)


def stat_mode(zs, bin: float = MODE_BIN) -> float:
    """Center of the fullest ``bin``-wide histogram bin; ties go to the lowest bin."""
    if not bin > 0:
        raise ValueError(f"mode bin must be positive, got {bin}")
    k = mode_bin_index(_values(zs), bin)
    uniq, counts = np.unique(k, return_counts=True)
    best = uniq[np.argmax(counts)]  # uniq is ascending, argmax takes the first
    return float((best + 0.5) * bin)


def stat_percentile(zs, q: float, method: str = "linear") -> float:
    a = np.sort(_values(zs))
    n = len(a)
    if method == "nearest-rank":
        rank = max(1, math.ceil(q * n))
        return float(a[rank - 1])
    if method != "linear":
        raise ValueError(f"unknown percentile method {method!r}")
    pos = q * (n - 1)
    lo = int(math.floor(pos))
    if lo >= n - 1:
        return float(a[-1])
    frac = pos - lo
    return float(a[lo] + frac * (a[lo + 1] - a[lo]))


def stat_p90(zs, method: str = "linear") -> float:
    return stat_percentile(zs, 0.9, method)


def measure_value(zs, measure: HeightMeasure, mode_bin: float = MODE_BIN, p90_method: str = "linear") -> float:
    measure = HeightMeasure(measure)
    if measure is HeightMeasure.MAXIMUM:
        return stat_max(zs)
    if measure is HeightMeasure.RANGE:
        return stat_range(zs)
    if measure is HeightMeasure.MODE:
        return stat_mode(zs, mode_bin)
    if measure is HeightMeasure.MEDIAN:
        return stat_median(zs)
    return stat_p90(zs, p90_method)


@dataclass
class BaseElevation:
    value: float
    n_ground: int
    fallback: bool


def base_elevation(ground: PointCloud, building_z=None) -> BaseElevation:
    """Median ground z; without ground points, the lowest building point (flagged)."""
    if len(ground):
        return BaseElevation(stat_median(ground.z), len(ground), False)
    if building_z is None or len(building_z) == 0:
        raise NoPointsError("no ground points and no building points for a base elevation")
    return BaseElevation(stat_min(building_z), 0, True)


@dataclass
class BuildingHeights:
    id: str
    base_elev: float
    top_elev: dict[HeightMeasure, float]
    height: dict[HeightMeasure, float]
    n_points: int
    n_ground: int
    flags: list[str] = field(default_factory=list)
    n_excluded: int = 0


def building_heights(
    pc: PointCloud,
    fp: Footprint,
    measures=ALL_MEASURES,
    ring_width: float = GROUND_RING,
    building_classes=(BUILDING,),
    ground_classes=(GROUND,),
    mode_bin: float = MODE_BIN,
    p90_method: str = "linear",
    source: str = "points",
    dsm=None,
) -> BuildingHeights:
    """Height statistics of one footprint.

    ``source="dsm"`` samples the valid DSM cells whose centers fall in the
    footprint instead of the raw building points; nodata cells are excluded
    and counted in ``n_excluded``.
    """
    measures = [HeightMeasure(m) for m in measures]
    n_excluded = 0
    if source == "points":
        zs = filter_by_class(clip_to_footprint(pc, fp), building_classes).z
    elif source == "dsm":
        if dsm is None:
            raise ValueError("source='dsm' needs a dsm grid")
        zs, n_excluded = _dsm_sample(dsm, fp)
    else:
        raise ValueError(f"unknown height source {source!r}")
    if len(zs) == 0:
        raise NoPointsError("no building points inside footprint", fp.id)

    ground = ground_ring_points(pc, fp, ring_width, ground_classes)
    base = base_elevation(ground, zs)
    flags = list(fp.flags)
    if base.fallback:
        flags.append("base_from_min_roof")

    top, height = {}, {}
    for m in measures:
        v = measure_value(zs, m, mode_bin, p90_method)
        top[m] = v
        h = v if m is HeightMeasure.RANGE else v - base.value
        if h < 0:
            flags.append(f"negative_{m.value}_height_clamped")
            h = 0.0
        height[m] = h
    return BuildingHeights(fp.id, base.value, top, height, len(zs), base.n_ground, flags, n_excluded)


def _dsm_sample(dsm, fp: Footprint):
    inside = rasterize_polygon(fp, dsm).values == 1
    vals = dsm.values[inside]
    valid = vals != dsm.nodata
    return vals[valid], int(np.count_nonzero(~valid))
