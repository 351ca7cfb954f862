"""Segmentation and reconstruction accuracy metrics.

Undefined results (a zero denominator, zero variance) are returned as
``None`` and rendered as ``undefined``; they are never coerced to 0.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from statistics import NormalDist
from typing import Iterable, Sequence

import numpy as np

from .errors import InsufficientSamplesError, NoPointsError
from .geometry import DEFAULT_IOU_CELL, Footprint, polygon_area, polygon_iou, polygon_perimeter
from .heights import ALL_MEASURES, HeightMeasure, building_heights

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Pixel metrics


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @classmethod
    def from_masks(cls, pred, ref, valid=None) -> "ConfusionCounts":
        pred = np.asarray(pred).astype(bool)
        ref = np.asarray(ref).astype(bool)
        if valid is None:
            valid = np.ones(pred.shape, dtype=bool)
        return cls(
            tp=int(np.count_nonzero(pred & ref & valid)),
            fp=int(np.count_nonzero(pred & ~ref & valid)),
            fn=int(np.count_nonzero(~pred & ref & valid)),
            tn=int(np.count_nonzero(~pred & ~ref & valid)),
        )


def _ratio(num, den):
    return None if den == 0 else num / den


def pixel_metrics(c: ConfusionCounts) -> dict[str, float | None]:
    return {
        "iou": _ratio(c.tp, c.tp + c.fp + c.fn),
        "dice": _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn),
        "accuracy": _ratio(c.tp + c.tn, c.total),
        "precision": _ratio(c.tp, c.tp + c.fp),
        "recall": _ratio(c.tp, c.tp + c.fn),
    }


# ---------------------------------------------------------------------------
# Student t quantile


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, 10000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-15:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_cdf(t: float, df: float) -> float:
    tail = 0.5 * betainc_reg(df / 2.0, 0.5, df / (df + t * t))
    return 1.0 - tail if t > 0 else tail


def t_pdf(t: float, df: float) -> float:
    log_c = math.lgamma((df + 1) / 2) - math.lgamma(df / 2) - 0.5 * math.log(df * math.pi)
    return math.exp(log_c - (df + 1) / 2 * math.log1p(t * t / df))


def t_ppf(p: float, df: float) -> float:
    """Inverse Student t CDF by safeguarded Newton iteration."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"probability must be in (0, 1), got {p}")
    if df <= 0:
        raise ValueError(f"degrees of freedom must be positive, got {df}")
    if p == 0.5:
        return 0.0
    if p < 0.5:
        return -t_ppf(1.0 - p, df)
    lo, hi = 0.0, 1.0
    while t_cdf(hi, df) < p:
        lo, hi = hi, hi * 2.0
        if hi > 1e12:
            raise ArithmeticError("t quantile out of range")
    t = min(max(NormalDist().inv_cdf(p), lo), hi)
    for _ in range(200):
        f = t_cdf(t, df) - p
        if f > 0:
            hi = t
        else:
            lo = t
        step = f / t_pdf(t, df)
        nt = t - step
        if not lo < nt < hi:
            nt = 0.5 * (lo + hi)
        if abs(nt - t) <= 1e-14 * max(1.0, abs(t)):
            return nt
        t = nt
    return t


@dataclass(frozen=True)
class MetricCI:
    mean: float
    half_width: float
    n: int
    confidence: float = 0.95

    def format(self, digits: int = 3) -> str:
        return f"{self.mean:.{digits}f} ± {self.half_width:.{digits}f}"


def mean_ci_t(samples: Sequence[float], confidence: float = 0.95) -> MetricCI:
    """Mean with a two-sided t-distribution interval, half-width t * s / sqrt(n)."""
    x = np.asarray(samples, dtype=np.float64)
    n = len(x)
    if n < 2:
        raise InsufficientSamplesError(f"confidence interval needs at least 2 samples, got {n}")
    # the mean of identical floats can round off them; keep the exact zero spread
    s = 0.0 if np.ptp(x) == 0 else float(np.std(x, ddof=1))
    t = t_ppf((1.0 + confidence) / 2.0, n - 1)
    return MetricCI(float(np.mean(x)), t * s / math.sqrt(n), n, confidence)


# ---------------------------------------------------------------------------
# Building matching


@dataclass(frozen=True)
class BuildingMatch:
    pred_id: str
    ref_id: str | None
    iou: float


def _boxes_intersect(a, b) -> bool:
    return not (a[2] < b[0] or b[2] < a[0] or a[3] < b[1] or b[3] < a[1])


def match_buildings(preds: Sequence[Footprint], refs: Sequence[Footprint],
                    cell: float = DEFAULT_IOU_CELL) -> list[BuildingMatch]:
    """Greedy one-to-one matching by descending IoU, ties by (pred_id, ref_id).

    Returns one match per prediction, sorted by pred_id; unmatched
    predictions have ``ref_id=None`` and IoU 0.
    """
    pairs = []
    for p in preds:
        for r in refs:
            if _boxes_intersect(p.bounds, r.bounds):
                iou = polygon_iou(p, r, cell)
                if iou > 0:
                    pairs.append((-iou, p.id, r.id))
    pairs.sort()
    used_p, used_r, result = set(), set(), {}
    for neg_iou, pid, rid in pairs:
        if pid in used_p or rid in used_r:
            continue
        used_p.add(pid)
        used_r.add(rid)
        result[pid] = BuildingMatch(pid, rid, -neg_iou)
    for p in preds:
        result.setdefault(p.id, BuildingMatch(p.id, None, 0.0))
    return [result[k] for k in sorted(result)]


def unmatched_refs(matches: Iterable[BuildingMatch], refs: Sequence[Footprint]) -> list[str]:
    used = {m.ref_id for m in matches if m.ref_id is not None}
    return sorted(r.id for r in refs if r.id not in used)


# ---------------------------------------------------------------------------
# Error statistics


@dataclass(frozen=True)
class ErrorStats:
    rmse: float | None
    mae: float | None
    r2: float | None
    n: int

    def format_row(self, digits: int = 3) -> str:
        return " / ".join(fmt_value(v, digits) for v in (self.rmse, self.mae, self.r2))


def fmt_value(v: float | None, digits: int = 3) -> str:
    return "undefined" if v is None or not math.isfinite(v) else f"{v:.{digits}f}"


def error_stats(est: Sequence[float], ref: Sequence[float]) -> ErrorStats:
    e = np.asarray(est, dtype=np.float64)
    r = np.asarray(ref, dtype=np.float64)
    if e.shape != r.shape:
        raise ValueError(f"length mismatch: {len(e)} estimates vs {len(r)} references")
    if len(e) == 0:
        return ErrorStats(None, None, None, 0)
    d = e - r
    ss_res = float(np.sum(d * d))
    ss_tot = float(np.sum((r - r.mean()) ** 2))
    return ErrorStats(
        rmse=math.sqrt(ss_res / len(d)),
        mae=float(np.mean(np.abs(d))),
        r2=None if ss_tot == 0 else 1.0 - ss_res / ss_tot,
        n=len(d),
    )


HIST_EDGES = (0.0, 0.1, 0.2, 0.35, 0.5, 0.75, 1.0, 1.5, 2.5, 5.0, math.inf)


def _edge(v: float) -> str:
    return f"{v:g}"


def histogram_labels() -> list[str]:
    labels = []
    for lo, hi in zip(HIST_EDGES[:-1], HIST_EDGES[1:]):
        if lo == 0:
            labels.append(f"E < {_edge(hi)}")
        elif math.isinf(hi):
            labels.append(f"{_edge(lo)} < E")
        else:
            labels.append(f"{_edge(lo)} < E < {_edge(hi)}")
    return labels


def height_error_histogram(errors: Sequence[float]) -> list[tuple[str, float]]:
    """Percentage of |error| in each half-open range [lo, hi)."""
    e = np.abs(np.asarray(errors, dtype=np.float64))
    if len(e) == 0:
        return []
    counts = np.zeros(len(HIST_EDGES) - 1, dtype=np.int64)
    for k, (lo, hi) in enumerate(zip(HIST_EDGES[:-1], HIST_EDGES[1:])):
        counts[k] = np.count_nonzero((e >= lo) & (e < hi))
    return [(lab, 100.0 * c / len(e)) for lab, c in zip(histogram_labels(), counts)]


def iou_bin_index(iou: float) -> int:
    k = int(math.floor(iou * 10))
    if (k + 1) / 10 <= iou:
        k += 1
    if k / 10 > iou:
        k -= 1
    return min(max(k, 0), 9)


def iou_binned_mae(matches: Iterable[BuildingMatch], errors: dict[str, float]) -> list[tuple[float, float, int]]:
    """MAE of |error| per IoU bin of width 0.1, as (center, mae, count); empty bins omitted."""
    bins: dict[int, list[float]] = {}
    for m in matches:
        if m.pred_id in errors and errors[m.pred_id] is not None:
            bins.setdefault(iou_bin_index(m.iou), []).append(abs(errors[m.pred_id]))
    return [(round(0.05 + 0.1 * k, 2), float(np.mean(v)), len(v)) for k, v in sorted(bins.items())]


def pearson_r(x: Sequence[float], y: Sequence[float]) -> float | None:
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(y, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("pearson_r needs equal-length inputs")
    if len(a) < 2:
        return None
    da, db = a - a.mean(), b - b.mean()
    sa, sb = float(np.dot(da, da)), float(np.dot(db, db))
    if sa == 0 or sb == 0:
        return None
    r = float(np.dot(da, db) / math.sqrt(sa * sb))
    return max(-1.0, min(1.0, r))


def format_correlations(rs: dict) -> str:
    return ", ".join(f"{HeightMeasure(m).value}: {fmt_value(r, 2)}" for m, r in rs.items())


# ---------------------------------------------------------------------------
# Building-level evaluation


@dataclass
class BuildingEval:
    pred_id: str
    ref_id: str | None
    iou: float
    area_pred: float
    area_ref: float | None
    perimeter_pred: float
    perimeter_ref: float | None
    height_pred: dict = field(default_factory=dict)
    height_ref: dict = field(default_factory=dict)

    def height_error(self, m) -> float | None:
        if m in self.height_pred and m in self.height_ref:
            return self.height_pred[m] - self.height_ref[m]
        return None

    @property
    def area_error(self) -> float | None:
        return None if self.area_ref is None else self.area_pred - self.area_ref

    def wall_area_error(self, m) -> float | None:
        if m in self.height_pred and m in self.height_ref and self.perimeter_ref is not None:
            return self.perimeter_pred * self.height_pred[m] - self.perimeter_ref * self.height_ref[m]
        return None


@dataclass
class EvalResult:
    buildings: list[BuildingEval]
    measures: tuple
    unmatched_pred: list[str]
    unmatched_ref: list[str]
    skipped: list[dict] = field(default_factory=list)
    matched_only: bool = True
    iou_cell: float = DEFAULT_IOU_CELL

    @property
    def matches(self) -> list[BuildingMatch]:
        return [BuildingMatch(b.pred_id, b.ref_id, b.iou) for b in self.buildings]

    def _rows(self):
        return [b for b in self.buildings if b.ref_id is not None or not self.matched_only]

    def height_stats(self, m) -> ErrorStats:
        pairs = [(b.height_pred[m], b.height_ref[m]) for b in self._rows() if b.height_error(m) is not None]
        return error_stats([p for p, _ in pairs], [r for _, r in pairs])

    def area_stats(self) -> ErrorStats:
        pairs = [(b.area_pred, b.area_ref) for b in self._rows() if b.area_ref is not None]
        return error_stats([p for p, _ in pairs], [r for _, r in pairs])

    def wall_stats(self, m) -> ErrorStats:
        pairs = [
            (b.perimeter_pred * b.height_pred[m], b.perimeter_ref * b.height_ref[m])
            for b in self._rows() if b.wall_area_error(m) is not None
        ]
        return error_stats([p for p, _ in pairs], [r for _, r in pairs])

    def height_errors(self, m) -> dict[str, float]:
        return {b.pred_id: b.height_error(m) for b in self._rows() if b.height_error(m) is not None}

    def wall_height_correlation(self, m) -> float | None:
        rows = [b for b in self._rows() if b.height_error(m) is not None and b.wall_area_error(m) is not None]
        return pearson_r([abs(b.height_error(m)) for b in rows], [abs(b.wall_area_error(m)) for b in rows])


def evaluate(preds: Sequence[Footprint], refs: Sequence[Footprint], pc, measures=ALL_MEASURES,
             matched_only: bool = True, iou_cell: float = DEFAULT_IOU_CELL, **height_kw) -> EvalResult:
    """Match predicted to reference footprints and compare their reconstructions.

    In ``matched_only=False`` mode every reference building is scored: a
    missed reference contributes a zero-area, zero-height estimate.
    """
    measures = tuple(HeightMeasure(m) for m in measures)
    matches = match_buildings(preds, refs, iou_cell)
    pred_by_id = {p.id: p for p in preds}
    ref_by_id = {r.id: r for r in refs}
    skipped = []

    def heights(fp, role):
        try:
            return building_heights(pc, fp, measures, **height_kw).height
        except NoPointsError as exc:
            skipped.append({"id": fp.id, "role": role, "reason": str(exc)})
            return {}

    out = []
    for m in matches:
        p = pred_by_id[m.pred_id]
        r = ref_by_id.get(m.ref_id) if m.ref_id is not None else None
        out.append(BuildingEval(
            pred_id=p.id,
            ref_id=m.ref_id,
            iou=m.iou,
            area_pred=polygon_area(p),
            area_ref=polygon_area(r) if r is not None else None,
            perimeter_pred=polygon_perimeter(p),
            perimeter_ref=polygon_perimeter(r) if r is not None else None,
            height_pred=heights(p, "predicted") if r is not None else {},
            height_ref=heights(r, "reference") if r is not None else {},
        ))
    missed = unmatched_refs(matches, refs)
    if not matched_only:
        for rid in missed:
            r = ref_by_id[rid]
            href = heights(r, "reference")
            out.append(BuildingEval(
                pred_id=f"missed:{rid}", ref_id=rid, iou=0.0, area_pred=0.0, area_ref=polygon_area(r),
                perimeter_pred=0.0, perimeter_ref=polygon_perimeter(r),
                height_pred={k: 0.0 for k in href}, height_ref=href,
            ))
    unmatched_pred = [m.pred_id for m in matches if m.ref_id is None]
    return EvalResult(out, measures, unmatched_pred, missed, skipped, matched_only, iou_cell)
