import json
import os

import numpy as np
import pytest

from cardiac_fat import cli
from cardiac_fat.imaging import FatImage, ScanVolume, read_mask_ppm, save_scan
from cardiac_fat.pnm import read_pnm

SIDE = ["--window-side", "7"]


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def world(tmp_path_factory):
    """Atlas, two small registered phantoms and three trained models."""
    root = tmp_path_factory.mktemp("world")
    assert run("synth", "crops", root / "crops", "--count", 5) == 0
    assert run("build-atlas", root / "crops", root / "atlas.pgm") == 0
    assert run("synth", "scans", root / "raw", "--count", 2, "--seed", 3, "--slices", 3) == 0
    csvs = []
    for seed in (3, 4):
        reg = root / f"reg_{seed}"
        assert run("register", root / "raw" / f"phantom_{seed:03d}" / "manifest.json", root / "atlas.pgm", reg) == 0
        csv = root / f"train_{seed}.csv"
        assert run("extract", reg / "manifest.json", "-o", csv, *SIDE) == 0
        csvs.append(csv)
    models = root / "models"
    models.mkdir()
    for c in ("epicardial", "mediastinal", "pericardium"):
        assert run("train", *csvs, "--class", c, "-o", models / f"{c}.model.json", "--trees", 3, *SIDE) == 0
    return root


def test_usage_errors_exit_1(capsys, tmp_path):
    with pytest.raises(SystemExit) as exc:
        run("train", "x.csv", "-o", tmp_path / "m.json")  # --class missing
    assert exc.value.code == 1
    assert "error: USAGE" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        run("no-such-command")
    assert exc.value.code == 1


def test_threads_validation(monkeypatch, capsys, tmp_path):
    assert run("--threads", 0, "synth", "crops", tmp_path, "--count", 1) == 1
    monkeypatch.setenv(cli.THREADS_ENV, "many")
    assert run("synth", "crops", tmp_path, "--count", 1) == 1
    assert cli.THREADS_ENV in capsys.readouterr().err
    monkeypatch.setenv(cli.THREADS_ENV, "3")
    assert cli._default_threads() == 3


def test_missing_manifest_is_data_error(capsys, tmp_path):
    assert run("quantify", tmp_path, tmp_path / "nope.json", tmp_path / "v.json") == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: ")


def test_no_confirmed_placement_exit_3(world, tmp_path, capsys):
    blank = [FatImage(np.zeros((128, 128), np.uint8)) for _ in range(2)]
    save_scan(ScanVolume(blank, 3.0, "blank"), tmp_path / "blank")
    code = run("register", tmp_path / "blank" / "manifest.json", world / "atlas.pgm", tmp_path / "out")
    assert code == 3
    assert "NO_CONFIRMED_PLACEMENT" in capsys.readouterr().err


def test_register_outputs(world):
    log = json.loads((world / "reg_3" / "run.log.json").read_text())
    manifest = json.loads((world / "reg_3" / "manifest.json").read_text())
    raw = json.loads((world / "raw" / "phantom_003" / "manifest.json").read_text())
    assert log["command"] == "register"
    assert log["params"]["anchor"] == [64, 38]
    # the phantom's apex lands on the anchor
    dx, dy = log["params"]["offset"]
    assert (raw["landmark"][0] + dx, raw["landmark"][1] + dy) == (64, 38)
    assert len(manifest["masks"]) == 3


def test_schema_mismatch_single_line(world, tmp_path, capsys):
    code = run("segment", world / "reg_3" / "manifest.json", world / "models", tmp_path, "--window-side", 9)
    assert code == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and "SCHEMA_MISMATCH" in err[0]


def test_extract_requires_masks(world, tmp_path, capsys):
    blank = [FatImage(np.zeros((16, 16), np.uint8))]
    save_scan(ScanVolume(blank, 3.0), tmp_path / "s")
    assert run("extract", tmp_path / "s" / "manifest.json", "-o", tmp_path / "a.csv", *SIDE) == 2
    assert "--unlabeled" in capsys.readouterr().err
    assert run("extract", tmp_path / "s" / "manifest.json", "-o", tmp_path / "a.csv", "--unlabeled", *SIDE) == 0


def test_segment_quantify_evaluate(world, tmp_path):
    reg = world / "reg_3"
    seg = tmp_path / "seg"
    assert run("segment", reg / "manifest.json", world / "models", seg, *SIDE) == 0
    scores = np.load(seg / "scores.npy")
    assert scores.shape == (3, 3, 128, 128) and scores.dtype == np.float32
    planes = read_mask_ppm(seg / "mask_000.ppm", allow_yellow=True)
    overlay = read_pnm(seg / "overlay_000.ppm")[0]
    epi_only = planes["epicardial"] & ~planes["mediastinal"]
    assert epi_only.any()
    assert (overlay[epi_only] == (255, 0, 0)).all()

    assert run("quantify", seg, reg / "manifest.json", tmp_path / "v.json") == 0
    vol = json.loads((tmp_path / "v.json").read_text())
    assert vol["epicardial_ml"] > 0 and vol["mediastinal_ml"] > 0

    assert run("evaluate", seg, reg, tmp_path / "e.json") == 1  # needs --scan
    assert run("evaluate", seg, reg, tmp_path / "e.json", "--scan", reg / "manifest.json") == 0
    ev = json.loads((tmp_path / "e.json").read_text())
    assert set(ev["classes"]) == {"epicardial", "mediastinal"}
    assert ev["mean"]["dice"] > 0.8


def test_quantify_empty_masks(tmp_path):
    assert run("synth", "cylinder", tmp_path / "cyl", "--slices", 4, "--radius", 0.1) == 0
    empty = tmp_path / "empty"
    empty.mkdir()
    z = np.zeros((64, 64), bool)
    from cardiac_fat.imaging import write_mask_ppm

    for i in range(4):
        write_mask_ppm(empty / f"mask_{i:03d}.ppm", z, z)
    assert run("quantify", empty, tmp_path / "cyl" / "manifest.json", tmp_path / "v.json") == 0
    vol = json.loads((tmp_path / "v.json").read_text())
    assert vol["epicardial_ml"] == 0.0 and vol["mediastinal_ml"] == 0.0


def test_cylinder_volume(tmp_path):
    assert run("synth", "cylinder", tmp_path, "--slices", 6, "--slice-spacing", 2.0) == 0
    assert run("quantify", tmp_path, tmp_path / "manifest.json", tmp_path / "v.json") == 0
    area = json.loads((tmp_path / "run.log.json").read_text())["params"]["disc_pixels"] * 0.35**2
    vol = json.loads((tmp_path / "v.json").read_text())
    assert vol["epicardial_ml"] == pytest.approx(area * 5 * 2.0 / 1000, abs=1e-9)


def test_synth_scene(tmp_path):
    assert run("synth", "scene", tmp_path, "--size", 128, "--seed", 2) == 0
    truth = json.loads((tmp_path / "truth.json").read_text())
    scene = read_pnm(tmp_path / "scene.pgm")[0]
    tmpl = read_pnm(tmp_path / "template.pgm")[0]
    h, w = tmpl.shape
    box = scene[truth["y"] : truth["y"] + h, truth["x"] : truth["x"] + w]
    assert np.array_equal(box, tmpl)


def test_pipeline_and_rerun(world, tmp_path):
    cfg = {
        "manifest": str(world / "raw" / "phantom_004" / "manifest.json"),
        "atlas": str(world / "atlas.pgm"),
        "models": str(world / "models"),
        "out_dir": "out",
        "neighborhood": {"side": 7},
    }
    path = tmp_path / "pipe.json"
    path.write_text(json.dumps(cfg))
    assert run("pipeline", path) == 0
    out = tmp_path / "out"
    for name in ("volumes.json", "evaluation.json", "run.log.json"):
        assert (out / name).exists()
    first = {p: (out / p).read_bytes() for p in _files(out)}
    assert run("pipeline", path) == 0
    second = {p: (out / p).read_bytes() for p in _files(out)}
    assert first == second


def test_pipeline_rejects_unknown_keys(tmp_path, capsys):
    path = tmp_path / "pipe.json"
    path.write_text(json.dumps({"manifest": "m", "atlas": "a", "models": "x", "out_dir": "o", "bogus": 1}))
    assert run("pipeline", path) == 2
    assert "bogus" in capsys.readouterr().err


def _files(root):
    return sorted(os.path.relpath(os.path.join(d, f), root) for d, _, fs in os.walk(root) for f in fs)
