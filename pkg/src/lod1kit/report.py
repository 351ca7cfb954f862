"""CSV tables and self-contained SVG plots for an evaluation run.

Every number is rendered at fixed precision and rows are sorted, so the
same result always produces byte-identical files.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .evaluation import EvalResult, fmt_value, format_correlations, height_error_histogram, histogram_labels, iou_binned_mae

REPORT_FILES = (
    "matches.csv",
    "error_stats.csv",
    "height_error_histogram.csv",
    "iou_binned_mae.csv",
    "height_scatter.svg",
    "height_error_histogram.svg",
    "iou_mae.svg",
)

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")
W, H, PAD = 480, 360, 50


def _f(v, digits=3) -> str:
    return fmt_value(v, digits)


def round_percentages(pcts, digits: int = 2) -> list[float]:
    """Round to ``digits`` decimals by largest remainder so the total is preserved."""
    if not len(pcts):
        return []
    scale = 10 ** digits
    raw = np.asarray(pcts, dtype=np.float64) * scale
    floor = np.floor(raw)
    short = int(round(raw.sum() - floor.sum()))
    order = np.argsort(-(raw - floor), kind="stable")
    floor[order[:short]] += 1
    return [float(v) / scale for v in floor]


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def matches_csv(res: EvalResult) -> str:
    header = ["pred_id", "ref_id", "iou", "area_pred", "area_ref"]
    for m in res.measures:
        header += [f"height_pred_{m.value}", f"height_ref_{m.value}", f"height_error_{m.value}"]
    rows = []
    for b in sorted(res.buildings, key=lambda b: b.pred_id):
        row = [b.pred_id, b.ref_id or "", _f(b.iou, 4), _f(b.area_pred), _f(b.area_ref)]
        for m in res.measures:
            row += [_f(b.height_pred.get(m)), _f(b.height_ref.get(m)), _f(b.height_error(m))]
        rows.append(row)
    return _csv_text(header, rows)


def error_stats_csv(res: EvalResult) -> str:
    header = ["quantity", "measure", "n", "rmse", "mae", "r2", "r_wall_height"]
    rows = []
    a = res.area_stats()
    rows.append(["area", "", a.n, _f(a.rmse), _f(a.mae), _f(a.r2), ""])
    for m in res.measures:
        h = res.height_stats(m)
        rows.append(["height", m.value, h.n, _f(h.rmse), _f(h.mae), _f(h.r2), _f(res.wall_height_correlation(m))])
    for m in res.measures:
        w = res.wall_stats(m)
        rows.append(["wall_area", m.value, w.n, _f(w.rmse), _f(w.mae), _f(w.r2), ""])
    return _csv_text(header, rows)


def histogram_csv(res: EvalResult) -> str:
    header = ["measure", *histogram_labels()]
    rows = []
    for m in res.measures:
        hist = height_error_histogram(list(res.height_errors(m).values()))
        if not hist:
            continue
        rows.append([m.value, *(f"{p:.2f}" for p in round_percentages([p for _, p in hist]))])
    return _csv_text(header, rows)


def binned_csv(res: EvalResult) -> str:
    rows = []
    for m in res.measures:
        for center, mae, count in iou_binned_mae(res.matches, res.height_errors(m)):
            rows.append([m.value, f"{center:.2f}", _f(mae), count])
    return _csv_text(["measure", "iou_center", "mae", "count"], rows)


# ---------------------------------------------------------------------------
# SVG


class _Axes:
    def __init__(self, xlim, ylim):
        self.x0, self.x1 = xlim
        self.y0, self.y1 = ylim
        if self.x1 <= self.x0:
            self.x1 = self.x0 + 1.0
        if self.y1 <= self.y0:
            self.y1 = self.y0 + 1.0

    def px(self, x) -> float:
        return PAD + (x - self.x0) / (self.x1 - self.x0) * (W - 2 * PAD)

    def py(self, y) -> float:
        return H - PAD - (y - self.y0) / (self.y1 - self.y0) * (H - 2 * PAD)


def _svg(title, xlabel, ylabel, body: list[str]) -> str:
    head = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2:.1f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<line x1="{PAD}" y1="{H - PAD}" x2="{W - PAD}" y2="{H - PAD}" stroke="black"/>',
        f'<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{H - PAD}" stroke="black"/>',
        f'<text x="{W / 2:.1f}" y="{H - 10}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>',
        f'<text x="15" y="{H / 2:.1f}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 15 {H / 2:.1f})">{escape(ylabel)}</text>',
    ]
    return "\n".join(head + body + ["</svg>"]) + "\n"


def _ticks(ax: _Axes) -> list[str]:
    out = []
    for k in range(5):
        xv = ax.x0 + k * (ax.x1 - ax.x0) / 4
        yv = ax.y0 + k * (ax.y1 - ax.y0) / 4
        out.append(f'<text x="{ax.px(xv):.1f}" y="{H - PAD + 15}" text-anchor="middle" font-size="10">{xv:.2f}</text>')
        out.append(f'<text x="{PAD - 5}" y="{ax.py(yv) + 3:.1f}" text-anchor="end" font-size="10">{yv:.2f}</text>')
    return out


def _legend(measures) -> list[str]:
    out = []
    for k, m in enumerate(measures):
        c = _COLORS[k % len(_COLORS)]
        y = PAD + 12 * k
        out.append(f'<rect x="{W - PAD - 70}" y="{y - 8}" width="8" height="8" fill="{c}"/>')
        out.append(f'<text x="{W - PAD - 58}" y="{y}" font-size="10">{escape(m.value)}</text>')
    return out


def height_scatter_svg(res: EvalResult) -> str:
    pts = []
    for k, m in enumerate(res.measures):
        for b in sorted(res.buildings, key=lambda b: b.pred_id):
            if b.height_error(m) is not None:
                pts.append((k, b.height_ref[m], b.height_pred[m]))
    vals = [v for _, r, p in pts for v in (r, p)]
    hi = max(vals) if vals else 1.0
    ax = _Axes((0.0, hi), (0.0, hi))
    body = _ticks(ax)
    body.append(f'<line x1="{ax.px(0):.1f}" y1="{ax.py(0):.1f}" x2="{ax.px(hi):.1f}" y2="{ax.py(hi):.1f}" '
                f'stroke="gray" stroke-dasharray="4 3"/>')
    for k, r, p in pts:
        body.append(f'<circle cx="{ax.px(r):.1f}" cy="{ax.py(p):.1f}" r="2.5" fill="{_COLORS[k % len(_COLORS)]}"/>')
    body += _legend(res.measures)
    return _svg("Estimated vs reference height", "reference height (m)", "estimated height (m)", body)


def histogram_svg(res: EvalResult) -> str:
    labels = histogram_labels()
    series = []
    for m in res.measures:
        hist = height_error_histogram(list(res.height_errors(m).values()))
        series.append([p for _, p in hist] if hist else [0.0] * len(labels))
    top = max([max(s) for s in series] + [1.0])
    ax = _Axes((0.0, float(len(labels))), (0.0, top))
    body = [f'<text x="{PAD - 5}" y="{ax.py(v) + 3:.1f}" text-anchor="end" font-size="10">{v:.0f}</text>'
            for v in np.linspace(0, top, 5)]
    nm = max(len(series), 1)
    width = 0.8 / nm
    for k, s in enumerate(series):
        for i, p in enumerate(s):
            x = ax.px(i + 0.1 + k * width)
            body.append(f'<rect x="{x:.1f}" y="{ax.py(p):.1f}" width="{ax.px(width) - PAD:.1f}" '
                        f'height="{ax.py(0) - ax.py(p):.1f}" fill="{_COLORS[k % len(_COLORS)]}"/>')
    for i, lab in enumerate(labels):
        x, y = ax.px(i + 0.5), H - PAD + 8
        body.append(f'<text x="{x:.1f}" y="{y}" font-size="8" text-anchor="end" '
                    f'transform="rotate(-40 {x:.1f} {y})">{escape(lab)}</text>')
    body += _legend(res.measures)
    return _svg("Height error frequency", "", "buildings (%)", body)


def iou_mae_svg(res: EvalResult) -> str:
    curves = [(k, iou_binned_mae(res.matches, res.height_errors(m))) for k, m in enumerate(res.measures)]
    top = max([mae for _, c in curves for _, mae, _ in c] + [0.1])
    ax = _Axes((0.0, 1.0), (0.0, top))
    body = _ticks(ax)
    for k, c in curves:
        color = _COLORS[k % len(_COLORS)]
        if len(c) > 1:
            path = " ".join(f"{ax.px(x):.1f},{ax.py(y):.1f}" for x, y, _ in c)
            body.append(f'<polyline points="{path}" fill="none" stroke="{color}"/>')
        for x, y, _ in c:
            body.append(f'<circle cx="{ax.px(x):.1f}" cy="{ax.py(y):.1f}" r="3" fill="{color}"/>')
    body += _legend(res.measures)
    return _svg("Height MAE by IoU interval", "IoU (bins of 0.1)", "MAE (m)", body)


def write_eval_report(res: EvalResult, prefix, summary: bool = True) -> list[Path]:
    """Write the four CSV tables and three SVG plots as ``<prefix>_<name>``.

    ``prefix`` may be a directory, in which case the bare names are used.
    """
    prefix = Path(prefix)
    if prefix.is_dir():
        target = lambda name: prefix / name  # noqa: E731
    else:
        prefix.parent.mkdir(parents=True, exist_ok=True)
        target = lambda name: prefix.parent / f"{prefix.name}_{name}"  # noqa: E731
    content = {
        "matches.csv": matches_csv(res),
        "error_stats.csv": error_stats_csv(res),
        "height_error_histogram.csv": histogram_csv(res),
        "iou_binned_mae.csv": binned_csv(res),
        "height_scatter.svg": height_scatter_svg(res),
        "height_error_histogram.svg": histogram_svg(res),
        "iou_mae.svg": iou_mae_svg(res),
    }
    if summary:
        content["summary.txt"] = summary_text(res)
    written = []
    for name, text in content.items():
        p = target(name)
        with open(p, "w", newline="") as fh:
            fh.write(text)
        written.append(p)
    return written


def summary_text(res: EvalResult) -> str:
    lines = [
        f"buildings: {len(res.buildings)}",
        f"unmatched predictions: {len(res.unmatched_pred)}",
        f"unmatched references: {len(res.unmatched_ref)}",
        f"skipped: {len(res.skipped)}",
        f"area rmse / mae / r2: {res.area_stats().format_row()}",
    ]
    for m in res.measures:
        lines.append(f"height {m.value} rmse / mae / r2: {res.height_stats(m).format_row()}")
    rs = {m: res.wall_height_correlation(m) for m in res.measures}
    lines.append(f"wall vs height error r: {format_correlations(rs)}")
    return "\n".join(lines) + "\n"
