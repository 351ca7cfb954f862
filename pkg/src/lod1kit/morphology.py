"""Per-building morphological parameters and the morphology CSV table."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .geometry import polygon_area, polygon_perimeter
from .heights import HeightMeasure
from .reconstruct import WALL, Lod1Solid, faces

CSV_HEADER = ["id", "area_m2", "perimeter_m", "measure", "height_m", "wall_area_m2", "volume_m3", "flags"]


@dataclass
class MorphRecord:
    id: str
    area: float
    perimeter: float
    height: dict[HeightMeasure, float] = field(default_factory=dict)
    wall_area: dict[HeightMeasure, float] = field(default_factory=dict)
    volume: dict[HeightMeasure, float] = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)

    def merge(self, other: "MorphRecord") -> "MorphRecord":
        if other.id != self.id:
            raise ValueError(f"cannot merge records of {self.id} and {other.id}")
        self.height.update(other.height)
        self.wall_area.update(other.wall_area)
        self.volume.update(other.volume)
        self.flags.extend(f for f in other.flags if f not in self.flags)
        return self


def morphology_of(s: Lod1Solid, flags: Iterable[str] = ()) -> MorphRecord:
    """Area, perimeter, wall area and volume of one prism.

    Wall area sums the faces whose slope is 90 degrees; volume applies the
    divergence theorem to all faces. Both are independent of the
    perimeter x height shortcut, which tests use as a cross-check.
    """
    fs = faces(s)
    walls = sum(f.area for f in fs if f.kind == WALL)
    origin = np.array([*s.footprint.outer.vertices[0], s.base])
    volume = sum(float(np.dot(f.rings[0][0] - origin, f.normal)) for f in fs) / 3.0
    m = s.measure
    all_flags = list(s.footprint.flags)
    all_flags += [f for f in flags if f not in all_flags]
    return MorphRecord(
        id=s.id,
        area=polygon_area(s.footprint),
        perimeter=polygon_perimeter(s.footprint),
        height={m: s.top - s.base},
        wall_area={m: walls},
        volume={m: volume},
        flags=all_flags,
    )


def morphology_table(solids: Iterable[Lod1Solid], flags_by_id: dict | None = None) -> list[MorphRecord]:
    """One record per building id, merging the solids of different measures."""
    flags_by_id = flags_by_id or {}
    records: dict[str, MorphRecord] = {}
    for s in solids:
        rec = morphology_of(s, flags_by_id.get(s.id, ()))
        if s.id in records:
            records[s.id].merge(rec)
        else:
            records[s.id] = rec
    return [records[k] for k in sorted(records)]


def _f3(v: float) -> str:
    if not math.isfinite(v):
        return "nan"
    return f"{v:.3f}"


def write_morphology_csv(records: Iterable[MorphRecord], path) -> None:
    rows = []
    for r in records:
        for m in r.height:
            rows.append((r.id, HeightMeasure(m).value, r))
    rows.sort(key=lambda t: (t[0], t[1]))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for rid, mname, r in rows:
            m = HeightMeasure(mname)
            w.writerow([
                rid, _f3(r.area), _f3(r.perimeter), mname, _f3(r.height[m]),
                _f3(r.wall_area[m]), _f3(r.volume[m]), ";".join(r.flags),
            ])


def read_morphology_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        row["flags"] = [f for f in row["flags"].split(";") if f]
    return rows
