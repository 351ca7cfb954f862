import csv
import json
import math
import subprocess
import sys

import numpy as np
import pytest

from lod1kit.cli import RunConfig, load_run_config, main
from lod1kit.errors import ConfigError
from lod1kit.geometry import Footprint, Point2, min_area_rect, read_geojson, write_geojson
from lod1kit.heights import HeightMeasure, building_heights
from lod1kit.pointcloud import load_points
from lod1kit.raster import Grid, rasterize_polygon, read_grid, write_grid

from conftest import rect

FLAT_SCENE = """extent = 60 x 60
n_buildings = 4
l_shape_fraction = 0.5
size_range = 8 14
sigma_z = 0.02
seed = 21
"""


@pytest.fixture(scope="module")
def scene(tmp_path_factory):
    d = tmp_path_factory.mktemp("scene")
    (d / "scene.txt").write_text(FLAT_SCENE)
    assert main(["synth", str(d / "scene.txt"), str(d / "out"), "--targets", "0.95,0.8,0.6,0.4"]) == 0
    return d / "out"


def manifest(path):
    return json.loads(path.read_text())


# --- config ---------------------------------------------------------------

def test_run_config_defaults():
    c = RunConfig().validate()
    assert (c.cell, c.min_area, c.buffer, c.matched_only) == (0.23, 10.0, 0.05, True)
    assert c.measures == ("maximum", "range", "mode", "median", "p90")


@pytest.mark.parametrize("kw, match", [
    ({"cell": 0.0}, "cell"), ({"iou_cell": float("nan")}, "iou_cell"), ({"workers": 0}, "workers"),
    ({"measures": ("mean",)}, "unknown height measure"), ({"measures": ()}, "at least one"),
    ({"formats": ("ply",)}, "unknown output format"), ({"min_area": -1.0}, "min_area"),
])
def test_run_config_validation(kw, match):
    with pytest.raises(ConfigError, match=match):
        RunConfig(**kw).validate()


def test_config_file(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("cell = 0.5\nmeasures = median, p90  # two\nmatched-only = no\nbuilding_classes = 6,7\n")
    assert load_run_config(p) == {"cell": 0.5, "measures": ("median", "p90"), "matched_only": False,
                                  "building_classes": (6, 7)}
    p.write_text("cel = 0.5\n")
    with pytest.raises(ConfigError, match=r"run.cfg:1: unknown config key 'cel'"):
        load_run_config(p)


# --- synth ----------------------------------------------------------------

def test_synth_outputs(scene):
    names = sorted(p.name for p in scene.iterdir())
    assert names == sorted([
        "points.las", "truth.geojson", "truth.csv", "synth.manifest.json",
        "perturbed_iou0.95.geojson", "perturbed_iou0.80.geojson",
        "perturbed_iou0.60.geojson", "perturbed_iou0.40.geojson",
    ])
    m = manifest(scene / "synth.manifest.json")
    assert set(m["versions"]) == {"lod1kit", "numpy", "scipy", "python"}
    for t, by_id in m["achieved_iou"].items():
        assert len(by_id) == 4
        assert all(abs(v - float(t)) <= 0.02 for v in by_id.values())
    rows = list(csv.DictReader(open(scene / "truth.csv")))
    assert [r["id"] for r in rows] == ["t0000", "t0001", "t0002", "t0003"]


def test_synth_reproducible(scene, tmp_path):
    (tmp_path / "scene.txt").write_text(FLAT_SCENE)
    assert main(["synth", str(tmp_path / "scene.txt"), str(tmp_path / "again"), "--targets", "0.95,0.8,0.6,0.4"]) == 0
    for p in scene.iterdir():
        if not p.name.endswith("manifest.json"):
            assert (tmp_path / "again" / p.name).read_bytes() == p.read_bytes(), p.name


def test_synth_bad_key(tmp_path, capsys):
    (tmp_path / "bad.txt").write_text("extent = 50 x 50\nbuildings = 3\n")
    assert main(["synth", str(tmp_path / "bad.txt"), str(tmp_path / "o")]) == 2
    assert "unknown scene key 'buildings'" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


# --- rasterize ------------------------------------------------------------

def test_rasterize(scene, tmp_path):
    out = tmp_path / "dsm.asc"
    assert main(["rasterize", str(scene / "points.las"), str(out)]) == 0
    assert "cellsize 0.23" in out.read_text().splitlines()[4]
    g = read_grid(out)
    assert g.cell == 0.23 and g.values.max() > 8
    m = manifest(tmp_path / "dsm.asc.manifest.json")
    assert m["parameters"]["cell"] == 0.23 and m["status"] == "ok"


def test_rasterize_errors(scene, tmp_path, capsys):
    assert main(["rasterize", str(tmp_path / "missing.las"), str(tmp_path / "x.asc")]) == 2
    assert "missing.las" in capsys.readouterr().err
    assert main(["rasterize", str(scene / "points.las"), str(tmp_path / "x.asc"), "--cell", "0"]) == 2
    assert "cell must be a positive number" in capsys.readouterr().err
    assert not (tmp_path / "x.asc").exists()


def test_stage_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.las"
    bad.write_bytes(b"NOPE" + bytes(400))
    assert main(["rasterize", str(bad), str(tmp_path / "x.asc")]) == 1
    assert "load_points" in capsys.readouterr().err


# --- footprints -----------------------------------------------------------

def staircase_mask(path):
    a = math.radians(30)
    rot = np.array([[math.cos(a), math.sin(a)], [-math.sin(a), math.cos(a)]])
    fp = Footprint.from_coords(rect(0, 0, 12, 7).outer.vertices @ rot + [20, 10])
    mask = rasterize_polygon(fp, Grid.zeros(Point2(0.115, 0.115), 0.23, 150, 180))
    write_grid(mask, path)


def test_footprints_staircase(tmp_path):
    staircase_mask(tmp_path / "mask.asc")
    out = tmp_path / "fp.geojson"
    assert main(["footprints", str(tmp_path / "mask.asc"), str(out)]) == 0
    (fp,) = read_geojson(out)
    assert len(fp.outer) == 4
    assert abs(math.degrees(min_area_rect(fp).angle) - 30) <= 2
    m = manifest(tmp_path / "fp.geojson.manifest.json")
    assert m["parameters"]["min_area"] == 10.0 and m["parameters"]["buffer_dist"] == 0.05


def test_footprints_empty_mask(tmp_path):
    write_grid(Grid.zeros(Point2(0, 0), 0.5, 10, 10), tmp_path / "m.asc")
    out = tmp_path / "fp.geojson"
    assert main(["footprints", str(tmp_path / "m.asc"), str(out), "--min-area", "5"]) == 0
    assert json.loads(out.read_text()) == {"type": "FeatureCollection", "features": []}
    assert manifest(tmp_path / "fp.geojson.manifest.json")["parameters"]["min_area"] == 5.0


# --- reconstruct ----------------------------------------------------------

def test_reconstruct(scene, tmp_path):
    truth = read_geojson(scene / "truth.geojson", "reference")
    fps = truth + [rect(200, 200, 5, 5, id="bare")]
    write_geojson(fps, tmp_path / "fps.geojson")
    out = tmp_path / "models"
    assert main(["reconstruct", str(scene / "points.las"), str(tmp_path / "fps.geojson"), str(out),
                 "--measures", "median,p90", "--formats", "cityjson"]) == 0
    assert sorted(p.name for p in out.iterdir()) == [
        "lod1_median.city.json", "lod1_p90.city.json", "morphology.csv", "reconstruct.manifest.json",
    ]
    m = manifest(out / "reconstruct.manifest.json")
    assert [s["id"] for s in m["skipped"]] == ["bare"]
    rows = list(csv.DictReader(open(out / "morphology.csv")))
    assert len(rows) == 2 * len(truth)
    pc = load_points(scene / "points.las")
    for fp in truth:
        bh = building_heights(pc, fp, [HeightMeasure.MEDIAN, HeightMeasure.P90])
        for r in rows:
            if r["id"] == fp.id:
                assert r["height_m"] == f"{bh.height[HeightMeasure(r['measure'])]:.3f}"


# --- evaluate -------------------------------------------------------------

def test_evaluate_identical(scene, tmp_path):
    t = str(scene / "truth.geojson")
    out = tmp_path / "eval"
    assert main(["evaluate", t, t, str(scene / "points.las"), str(out), "--measures", "median"]) == 0
    rows = list(csv.DictReader(open(out / "matches.csv")))
    assert all(r["iou"] == "1.0000" and r["height_error_median"] == "0.000" for r in rows)
    assert (out / "evaluate.manifest.json").exists() and (out / "height_scatter.svg").exists()


def test_evaluate_disjoint(scene, tmp_path):
    write_geojson([rect(500, 500, 5, 5, id="far")], tmp_path / "p.geojson")
    out = tmp_path / "eval"
    assert main(["evaluate", str(tmp_path / "p.geojson"), str(scene / "truth.geojson"),
                 str(scene / "points.las"), str(out)]) == 0
    m = manifest(out / "evaluate.manifest.json")
    assert m["unmatched_pred"] == ["far"] and len(m["unmatched_ref"]) == 4
    stats = list(csv.DictReader(open(out / "error_stats.csv")))
    assert all(r["n"] == "0" and r["rmse"] == "undefined" for r in stats)


def test_evaluate_all_refs(scene, tmp_path):
    truth = read_geojson(scene / "truth.geojson")
    write_geojson(truth[:2], tmp_path / "p.geojson")
    out = tmp_path / "eval"
    assert main(["evaluate", str(tmp_path / "p.geojson"), str(scene / "truth.geojson"),
                 str(scene / "points.las"), str(out), "--all-refs", "--measures", "median"]) == 0
    stats = {r["quantity"]: r for r in csv.DictReader(open(out / "error_stats.csv"))}
    assert stats["height"]["n"] == "4"
    assert manifest(out / "evaluate.manifest.json")["parameters"]["matched_only"] is False


def test_console_script_help():
    r = subprocess.run([sys.executable, "-m", "lod1kit.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for cmd in ("rasterize", "footprints", "reconstruct", "evaluate", "synth"):
        assert cmd in r.stdout
