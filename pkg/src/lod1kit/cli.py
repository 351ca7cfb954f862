"""Command-line entry point: one subcommand per pipeline stage.

Each command reads and writes plain files and leaves a ``*.manifest.json``
beside its outputs recording inputs, parameters, library versions and any
buildings that were skipped. Exit codes: 0 success, 1 stage failure,
2 bad configuration or unreadable input path.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import platform
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .errors import ConfigError, DegenerateHeightError, Lod1Error, NoPointsError, StageError
from .footprint import PostprocessConfig, postprocess
from .geometry import read_geojson, write_geojson
from .heights import ALL_MEASURES, HeightMeasure, building_heights
from .morphology import morphology_table, write_morphology_csv
from .pointcloud import load_points, write_las, write_xyzc
from .raster import DSM_CELL, rasterize_dsm, read_grid, write_grid
from .reconstruct import extrude, write_cityjson, write_obj
from .report import write_eval_report
from .evaluation import evaluate
from .synth import PERTURB_MODES, generate_scene, load_scene_spec, perturb_all

logger = logging.getLogger("lod1kit")

EXIT_OK, EXIT_STAGE, EXIT_CONFIG = 0, 1, 2
FORMATS = ("cityjson", "obj")


def _csv_list(text: str) -> tuple[str, ...]:
    return tuple(s.strip() for s in text.split(",") if s.strip())


@dataclass
class RunConfig:
    """Every tunable of the pipeline; validated before any file is touched."""

    cell: float = DSM_CELL
    workers: int = 1
    min_area: float = 10.0
    buffer: float = 0.05
    simplify_tol: float = 0.3
    snap_angle: float = 15.0
    connectivity: str = "eight"
    measures: tuple[str, ...] = tuple(m.value for m in ALL_MEASURES)
    formats: tuple[str, ...] = FORMATS
    ring_width: float = 2.0
    building_classes: tuple[int, ...] = (6,)
    ground_classes: tuple[int, ...] = (2,)
    matched_only: bool = True
    iou_cell: float = 0.05
    output_dir: str = "."

    def validate(self) -> "RunConfig":
        for name in ("cell", "ring_width", "iou_cell"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ConfigError(f"{name} must be a positive number, got {v}")
        if self.workers < 1:
            raise ConfigError(f"workers must be at least 1, got {self.workers}")
        try:
            self.postprocess_config()
            self.measures = tuple(HeightMeasure.parse(m).value for m in self.measures)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if not self.measures:
            raise ConfigError("at least one height measure is required")
        bad = [f for f in self.formats if f not in FORMATS]
        if bad:
            raise ConfigError(f"unknown output format(s) {bad}; choose from {list(FORMATS)}")
        return self

    def postprocess_config(self) -> PostprocessConfig:
        return PostprocessConfig(self.min_area, self.buffer, self.simplify_tol, self.snap_angle, self.connectivity)

    @property
    def measure_enums(self) -> tuple[HeightMeasure, ...]:
        return tuple(HeightMeasure(m) for m in self.measures)

    def height_kwargs(self) -> dict:
        return {
            "ring_width": self.ring_width,
            "building_classes": self.building_classes,
            "ground_classes": self.ground_classes,
        }


def _coerce(name: str, text: str):
    kind = {f.name: f.default for f in fields(RunConfig)}[name]
    if isinstance(kind, bool):
        low = text.strip().lower()
        if low not in ("true", "false", "yes", "no", "1", "0"):
            raise ValueError(f"expected a boolean, got {text!r}")
        return low in ("true", "yes", "1")
    if isinstance(kind, int):
        return int(text)
    if isinstance(kind, float):
        return float(text)
    if isinstance(kind, tuple):
        items = _csv_list(text)
        return tuple(int(s) for s in items) if kind and isinstance(kind[0], int) else items
    return text.strip()


def load_run_config(path) -> dict:
    """Read ``key = value`` lines into overrides for :class:`RunConfig`."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    known = {f.name for f in fields(RunConfig)}
    out = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in known:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        try:
            out[key] = _coerce(key, val)
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key!r}: {exc}") from None
    return out


# ---------------------------------------------------------------------------
# Manifest


@dataclass
class Manifest:
    command: str
    inputs: dict
    parameters: dict
    outputs: list[str] = field(default_factory=list)
    skipped: list[dict] = field(default_factory=list)
    extra: dict = field(default_factory=dict)
    status: str = "ok"

    def write(self, path: Path) -> None:
        doc = {
            "command": self.command,
            "status": self.status,
            "versions": {
                "lod1kit": __version__,
                "numpy": np.__version__,
                "scipy": scipy.__version__,
                "python": platform.python_version(),
            },
            "inputs": self.inputs,
            "parameters": self.parameters,
            "outputs": self.outputs,
            "skipped": self.skipped,
            **self.extra,
        }
        path.write_text(json.dumps(doc, indent=1, sort_keys=False) + "\n")


def _require(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _outdir(path: str) -> Path:
    p = Path(path)
    if p.exists() and not p.is_dir():
        raise ConfigError(f"output directory {p} exists and is not a directory")
    return p


def _stage(name, fn, *args, **kw):
    logger.info("stage %s", name)
    try:
        return fn(*args, **kw)
    except StageError:
        raise
    except (Lod1Error, ValueError, OSError) as exc:
        raise StageError(name, exc) from exc


# ---------------------------------------------------------------------------
# Commands


def cmd_rasterize(args, cfg: RunConfig) -> int:
    src = _require(args.input, "point file")
    out = Path(args.output)
    pc = _stage("load_points", load_points, src)
    dsm = _stage("rasterize_dsm", rasterize_dsm, pc, cfg.cell, cfg.workers)
    out.parent.mkdir(parents=True, exist_ok=True)
    _stage("write_grid", write_grid, dsm, out)
    Manifest("rasterize", {"points": str(src)}, {"cell": cfg.cell, "workers": cfg.workers},
             [str(out)], extra={"n_points": len(pc), "shape": [dsm.nrows, dsm.ncols]}
             ).write(out.with_name(out.name + ".manifest.json"))
    return EXIT_OK


def cmd_footprints(args, cfg: RunConfig) -> int:
    src = _require(args.input, "mask grid")
    out = Path(args.output)
    pp = cfg.postprocess_config()
    mask = _stage("read_grid", read_grid, src)
    fps = _stage("postprocess", postprocess, mask, pp)
    out.parent.mkdir(parents=True, exist_ok=True)
    _stage("write_geojson", write_geojson, fps, out)
    flagged = [{"id": fp.id, "flags": list(fp.flags)} for fp in fps if fp.flags]
    Manifest("footprints", {"mask": str(src)}, asdict(pp), [str(out)],
             extra={"n_footprints": len(fps), "flagged": flagged}
             ).write(out.with_name(out.name + ".manifest.json"))
    return EXIT_OK


def cmd_reconstruct(args, cfg: RunConfig) -> int:
    pts = _require(args.points, "point file")
    fpath = _require(args.footprints, "footprint file")
    outdir = _outdir(args.output_dir)
    pc = _stage("load_points", load_points, pts)
    fps = _stage("read_geojson", read_geojson, fpath)
    outdir.mkdir(parents=True, exist_ok=True)

    skipped, solids, flags = [], {m: [] for m in cfg.measure_enums}, {}
    for fp in fps:
        try:
            bh = building_heights(pc, fp, cfg.measure_enums, **cfg.height_kwargs())
        except NoPointsError as exc:
            logger.warning("skipping %s: %s", fp.id, exc)
            skipped.append({"id": fp.id, "reason": str(exc)})
            continue
        flags[fp.id] = bh.flags
        for m in cfg.measure_enums:
            try:
                solids[m].append(extrude(fp, bh.base_elev, bh.base_elev + bh.height[m], m))
            except DegenerateHeightError as exc:
                skipped.append({"id": fp.id, "measure": m.value, "reason": str(exc)})

    outputs = []
    for m, ss in solids.items():
        if not ss:
            continue
        if "cityjson" in cfg.formats:
            p = outdir / f"lod1_{m.value}.city.json"
            _stage("write_cityjson", write_cityjson, ss, p, f"LOD1 {m.value}")
            outputs.append(str(p))
        if "obj" in cfg.formats:
            p = outdir / f"lod1_{m.value}.obj"
            _stage("write_obj", write_obj, ss, p)
            outputs.append(str(p))
    table = morphology_table([s for ss in solids.values() for s in ss], flags)
    mp = outdir / "morphology.csv"
    _stage("write_morphology", write_morphology_csv, table, mp)
    outputs.append(str(mp))
    params = {k: getattr(cfg, k) for k in ("measures", "formats", "ring_width", "building_classes", "ground_classes")}
    Manifest("reconstruct", {"points": str(pts), "footprints": str(fpath)}, params, outputs, skipped,
             extra={"n_footprints": len(fps)}).write(outdir / "reconstruct.manifest.json")
    return EXIT_OK


def cmd_evaluate(args, cfg: RunConfig) -> int:
    pred = _require(args.pred, "predicted footprint file")
    ref = _require(args.ref, "reference footprint file")
    pts = _require(args.points, "point file")
    outdir = _outdir(args.output_dir)
    preds = _stage("read_geojson", read_geojson, pred, "predicted")
    refs = _stage("read_geojson", read_geojson, ref, "reference")
    pc = _stage("load_points", load_points, pts)
    res = _stage("evaluate", evaluate, preds, refs, pc, cfg.measure_enums, cfg.matched_only,
                 cfg.iou_cell, **cfg.height_kwargs())
    outdir.mkdir(parents=True, exist_ok=True)
    files = _stage("write_report", write_eval_report, res, outdir)
    params = {k: getattr(cfg, k) for k in ("measures", "matched_only", "iou_cell", "ring_width")}
    Manifest("evaluate", {"pred": str(pred), "ref": str(ref), "points": str(pts)}, params,
             [str(f) for f in files], res.skipped,
             extra={"unmatched_pred": res.unmatched_pred, "unmatched_ref": res.unmatched_ref}
             ).write(outdir / "evaluate.manifest.json")
    return EXIT_OK


def _truth_rows(gt):
    rows = []
    for b in gt.buildings:
        rows.append([b.id, b.roof, f"{b.base:.6f}", f"{b.eave:.6f}", f"{b.ridge:.6f}",
                     f"{b.area:.6f}", f"{b.perimeter:.6f}"]
                    + [("" if b.height(m) is None else f"{b.height(m):.6f}") for m in ALL_MEASURES])
    return rows


def cmd_synth(args, cfg: RunConfig) -> int:
    spec_path = _require(args.spec, "scene spec")
    spec = load_scene_spec(spec_path)  # ConfigError propagates as exit 2
    targets = [float(t) for t in _csv_list(args.targets)] if args.targets else []
    for t in targets:
        if not 0 < t <= 1:
            raise ConfigError(f"target IoU must be in (0, 1], got {t}")
    outdir = _outdir(args.output_dir)
    pc, gt = _stage("generate_scene", generate_scene, spec)
    outdir.mkdir(parents=True, exist_ok=True)
    outputs = []
    pts = outdir / ("points.las" if args.points_format == "las" else "points.xyz")
    if args.points_format == "las":
        _stage("write_points", write_las, pc, pts)
    else:
        _stage("write_points", write_xyzc, pc, pts)
    truth_fp = outdir / "truth.geojson"
    _stage("write_truth", write_geojson, gt.footprints, truth_fp)
    truth_csv = outdir / "truth.csv"
    with open(truth_csv, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "roof", "base", "eave", "ridge", "area", "perimeter"]
                   + [f"height_{m.value}" for m in ALL_MEASURES])
        w.writerows(_truth_rows(gt))
    outputs += [str(pts), str(truth_fp), str(truth_csv)]

    achieved = {}
    for t in targets:
        res = _stage("perturb", perturb_all, gt.footprints, t, args.perturb_seed, args.mode)
        p = outdir / f"perturbed_iou{t:.2f}.geojson"
        _stage("write_perturbed", write_geojson, [r.footprint for r in res], p)
        achieved[f"{t:.2f}"] = {r.footprint.id: round(r.iou, 6) for r in res}
        outputs.append(str(p))
    params = {"spec": asdict(spec), "targets": targets, "perturb_seed": args.perturb_seed, "mode": args.mode}
    Manifest("synth", {"spec": str(spec_path)}, params, outputs,
             extra={"n_points": len(pc), "achieved_iou": achieved}).write(outdir / "synth.manifest.json")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lod1kit", description="LOD1 building reconstruction from LiDAR and footprints")
    p.add_argument("--config", help="plain-text key = value file with run parameters")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("rasterize", help="point cloud to DSM grid")
    r.add_argument("input")
    r.add_argument("output")
    r.add_argument("--cell", type=float)
    r.add_argument("--workers", type=int)

    f = sub.add_parser("footprints", help="binary mask grid to regularized footprints")
    f.add_argument("input")
    f.add_argument("output")
    f.add_argument("--min-area", type=float, dest="min_area")
    f.add_argument("--buffer", type=float)
    f.add_argument("--simplify-tol", type=float, dest="simplify_tol")
    f.add_argument("--snap-angle", type=float, dest="snap_angle")
    f.add_argument("--connectivity", choices=("four", "eight"))

    c = sub.add_parser("reconstruct", help="footprints + points to LOD1 models and morphology table")
    c.add_argument("points")
    c.add_argument("footprints")
    c.add_argument("output_dir")
    c.add_argument("--measures", type=_csv_list)
    c.add_argument("--formats", type=_csv_list)
    c.add_argument("--ring-width", type=float, dest="ring_width")

    e = sub.add_parser("evaluate", help="compare predicted against reference footprints")
    e.add_argument("pred")
    e.add_argument("ref")
    e.add_argument("points")
    e.add_argument("output_dir")
    e.add_argument("--measures", type=_csv_list)
    e.add_argument("--all-refs", action="store_true", help="score missed reference buildings too")

    s = sub.add_parser("synth", help="generate a synthetic scene and optional perturbed footprints")
    s.add_argument("spec")
    s.add_argument("output_dir")
    s.add_argument("--targets", help="comma-separated target IoUs, e.g. 0.95,0.8,0.6,0.4")
    s.add_argument("--perturb-seed", type=int, default=0, dest="perturb_seed")
    s.add_argument("--mode", choices=PERTURB_MODES, default="mixed")
    s.add_argument("--points-format", choices=("las", "xyzc"), default="las", dest="points_format")
    return p


COMMANDS = {
    "rasterize": cmd_rasterize,
    "footprints": cmd_footprints,
    "reconstruct": cmd_reconstruct,
    "evaluate": cmd_evaluate,
    "synth": cmd_synth,
}


def make_config(args) -> RunConfig:
    values = load_run_config(args.config) if args.config else {}
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    if getattr(args, "all_refs", False):
        values["matched_only"] = False
    return RunConfig(**values).validate()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = make_config(args)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
