import csv
import json

import numpy as np
import pytest
import yaml

from fifsplat import trainer
from fifsplat.cli import main
from fifsplat.mesh import read_mesh
from fifsplat.scene_io import load_dataset
from fifsplat.trainer import load_state

SMALL = ["--set", "resolution=[20,20]", "--set", "camera_count=6"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["-q", "gen-scene", "--preset", "plane", "--seed", "1", "--out", str(root / "data"), *SMALL]) == 0
    assert main(["-q", "train", "--data", str(root / "data"), "--out", str(root / "run"),
                 "--set", "iterations=400", "--set", "threshold_warmup=100"]) == 0
    return root


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


# ---------------------------------------------------------------------------
# gen-scene

def test_gen_scene_writes_dataset(workspace, capsys):
    data = workspace / "data"
    assert (data / "manifest.json").exists() and (data / "run_manifest.yaml").exists()
    assert len(list(data.glob("view_*.png"))) == 6 and len(list(data.glob("view_*.pfm"))) == 6
    ds = load_dataset(data)
    assert ds.images[0].shape == (20, 20, 3)


def test_gen_scene_summary_and_seed(tmp_path, capsys):
    for name in ("a", "b"):
        assert main(["gen-scene", "--preset", "plane", "--seed", "4", "--out", str(tmp_path / name), *SMALL]) == 0
    out = capsys.readouterr().out
    assert "6 views" in out and "20x20" in out and "1 primitive" in out
    for f in ("manifest.json", "view_000.png", "view_003.pfm", "points.ply"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_gen_scene_from_spec_file(tmp_path):
    spec = {"primitives": [{"type": "sphere", "center": [0, 0, 0], "radius": 0.5}],
            "camera_count": 3, "resolution": [12, 12]}
    (tmp_path / "s.yaml").write_text(yaml.safe_dump(spec))
    assert main(["-q", "gen-scene", "--spec", str(tmp_path / "s.yaml"), "--out", str(tmp_path / "d")]) == 0
    assert len(load_dataset(tmp_path / "d")) == 3


def test_gen_scene_errors(tmp_path, capsys):
    assert main(["gen-scene", "--out", str(tmp_path / "x")]) == 2
    assert main(["gen-scene", "--spec", str(tmp_path / "missing.yaml"), "--out", str(tmp_path / "x")]) == 2
    (tmp_path / "bad.yaml").write_text(yaml.safe_dump({"primitives": [{"type": "sphere", "center": [0, 0, 0],
                                                                      "radius": -1}]}))
    assert main(["gen-scene", "--spec", str(tmp_path / "bad.yaml"), "--out", str(tmp_path / "x")]) == 2
    assert "invalid scene spec" in capsys.readouterr().err
    with pytest.raises(SystemExit) as e:
        main(["gen-scene", "--preset", "cube", "--out", str(tmp_path / "x")])
    assert e.value.code == 2


# ---------------------------------------------------------------------------
# train

def test_train_outputs(workspace):
    run = workspace / "run"
    for f in ("checkpoint.spkg", "loss_log.csv", "density_log.csv", "summary.json", "run_manifest.yaml"):
        assert (run / f).exists()
    summary = json.loads((run / "summary.json").read_text())
    assert summary["iterations"] == 400
    assert summary["final_photometric"] < summary["initial_photometric"]
    manifest = yaml.safe_load((run / "run_manifest.yaml").read_text())
    assert manifest["config"]["iterations"] == 400 and manifest["config"]["threshold_warmup"] == 100
    assert len(read_csv(run / "loss_log.csv")) == 400


def test_ablation_flags_pin_thresholds(workspace, tmp_path):
    out = tmp_path / "abl"
    assert main(["-q", "train", "--data", str(workspace / "data"), "--out", str(out), "--set", "iterations=30",
                 "--set", "threshold_warmup=0", "--disable-global-fif", "--disable-local-fif"]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["global_threshold"] == 0.0 and summary["mean_local_threshold"] == 0.0
    rows = read_csv(out / "loss_log.csv")
    assert all(float(r["opacity_threshold"]) == 0 and float(r["local_threshold"]) == 0 for r in rows)
    cfg = yaml.safe_load((out / "run_manifest.yaml").read_text())["config"]
    assert cfg["use_global_fif"] is False and cfg["use_local_fif"] is False


def test_manifest_config_reproduces_run(workspace, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["-q", "train", "--data", str(workspace / "data"), "--out", str(a), "--set", "iterations=25",
                 "--seed", "3"]) == 0
    assert main(["-q", "train", "--data", str(workspace / "data"), "--out", str(b),
                 "--config", str(a / "run_manifest.yaml")]) == 0
    sa, _ = load_state(a / "checkpoint.spkg")
    sb, _ = load_state(b / "checkpoint.spkg")
    for f in sa.gaussians.FIELDS:
        assert np.array_equal(getattr(sa.gaussians, f), getattr(sb.gaussians, f))


def test_resume_continues(workspace, tmp_path):
    out = tmp_path / "r"
    args = ["-q", "train", "--data", str(workspace / "data"), "--out", str(out), "--set", "iterations=20"]
    assert main(args) == 0
    assert main([*args[:-1], "iterations=35", "--resume"]) == 0
    state, _ = load_state(out / "checkpoint.spkg")
    assert state.iteration == 35
    assert len(read_csv(out / "loss_log.csv")) == 35
    assert main(["-q", "train", "--data", str(workspace / "data"), "--out", str(tmp_path / "none"),
                 "--resume"]) == 2


def test_train_config_errors(workspace, tmp_path, capsys):
    data = str(workspace / "data")
    assert main(["train", "--data", data, "--out", str(tmp_path / "x"), "--set", "bogus=1"]) == 2
    assert main(["train", "--data", data, "--out", str(tmp_path / "x"), "--set", "iterations=0"]) == 2
    assert main(["train", "--data", data, "--out", str(tmp_path / "x"), "--set", "noequals"]) == 2
    assert main(["train", "--data", data, "--out", str(tmp_path / "x"), "--config", str(tmp_path / "no.yaml")]) == 2
    assert main(["train", "--data", str(tmp_path / "nodata"), "--out", str(tmp_path / "x")]) == 2
    assert "unknown config key" in capsys.readouterr().err


def test_numerical_abort_exit_code(workspace, tmp_path, monkeypatch):
    def boom(*a, **k):
        raise trainer.NumericalAbort("loss became non-finite at iteration 0")

    monkeypatch.setattr(trainer, "train", boom)
    assert main(["-q", "train", "--data", str(workspace / "data"), "--out", str(tmp_path / "x")]) == 3


# ---------------------------------------------------------------------------
# extract / eval / render

def test_extract_and_eval(workspace, tmp_path, capsys):
    ck, data = str(workspace / "run" / "checkpoint.spkg"), str(workspace / "data")
    out = tmp_path / "mesh"
    assert main(["extract", "--checkpoint", ck, "--data", data, "--out", str(out), "--resolution", "48"]) == 0
    mesh = read_mesh(out / "mesh.ply")
    assert not mesh.is_empty
    capsys.readouterr()
    assert main(["eval", "--mesh", str(out / "mesh.ply"), "--data", data, "--samples", "3000",
                 "--out", str(out)]) == 0
    res = json.loads(capsys.readouterr().out)
    assert np.isfinite(res["chamfer"]) and res["chamfer"] > 0 and res["samples"] == 3000
    assert json.loads((out / "chamfer.json").read_text()) == res
    assert main(["eval", "--mesh", str(out / "mesh.ply"), "--reference", str(out / "mesh.ply")]) == 0
    assert json.loads(capsys.readouterr().out)["chamfer"] == 0.0


def test_extract_voxel_size_and_errors(workspace, tmp_path):
    ck, data = str(workspace / "run" / "checkpoint.spkg"), str(workspace / "data")
    out = tmp_path / "m"
    assert main(["-q", "extract", "--checkpoint", ck, "--data", data, "--out", str(out),
                 "--voxel-size", "0.05", "--dump-volume", "--ascii"]) == 0
    vol = yaml.safe_load((out / "run_manifest.yaml").read_text())["volume"]
    bbox = load_dataset(data).bbox
    span = 1.1 * (bbox[3:] - bbox[:3])
    assert vol["voxel_size"] == 0.05
    assert vol["dims"] == [int(np.ceil(s / 0.05 - 1e-9)) + 1 for s in span]
    assert (out / "tsdf.bin").read_bytes()[:4] == b"TSDF"
    assert (out / "mesh.ply").read_bytes().startswith(b"ply\nformat ascii")
    assert main(["extract", "--checkpoint", str(tmp_path / "no.spkg"), "--data", data, "--out", str(out)]) == 2


def test_extract_empty_mesh_is_not_an_error(workspace, tmp_path, capsys):
    ck, data = str(workspace / "run" / "checkpoint.spkg"), str(workspace / "data")
    out = tmp_path / "e"
    # no pixel reaches full coverage, so nothing is fused
    assert main(["extract", "--checkpoint", ck, "--data", data, "--out", str(out), "--resolution", "16",
                 "--alpha-min", "1.01"]) == 0
    assert read_mesh(out / "mesh.ply").is_empty
    assert "empty mesh" in capsys.readouterr().err
    assert main(["eval", "--mesh", str(out / "mesh.ply"), "--data", data]) == 2


def test_render_view(workspace, tmp_path):
    ck, data = str(workspace / "run" / "checkpoint.spkg"), str(workspace / "data")
    assert main(["-q", "render", "--checkpoint", ck, "--data", data, "--out", str(tmp_path), "--view", "2"]) == 0
    for f in ("render_002.png", "depth_002.pfm", "raw_depth_002.pfm", "normal_002.png"):
        assert (tmp_path / f).exists()
    assert main(["render", "--checkpoint", ck, "--data", data, "--out", str(tmp_path), "--view", "99"]) == 2


# ---------------------------------------------------------------------------
# diagnose

def test_diagnose_reports(workspace, tmp_path):
    ck, data = str(workspace / "run" / "checkpoint.spkg"), str(workspace / "data")
    out = tmp_path / "d"
    assert main(["-q", "diagnose", "--checkpoint", ck, "--data", data, "--out", str(out),
                 "--opacity-cutoff", "0.2", "--value-cutoff", "0.05", "--views", "0", "1",
                 "--pixel", "10,10", "--pixel", "3,4;15,2"]) == 0
    rep = json.loads((out / "lop_report.json").read_text())
    assert rep["cutoffs"] == {"opacity": 0.2, "value": 0.05}
    assert rep["views"] == [0, 1] and set(rep["lots_per_view"]) == {"0", "1"}
    assert rep["depth_bias"] is not None and rep["depth_bias"]["mean_raw"] >= 0
    rows = read_csv(out / "ray_profiles.csv")
    assert {(int(r["x"]), int(r["y"])) for r in rows} <= {(10, 10), (3, 4), (15, 2)}
    assert {int(r["view"]) for r in rows} <= {0, 1}


def test_diagnose_rows_match_render(workspace, tmp_path):
    from fifsplat.render import rasterize_forward

    ck, data = workspace / "run" / "checkpoint.spkg", workspace / "data"
    out = tmp_path / "d"
    assert main(["-q", "diagnose", "--checkpoint", str(ck), "--data", str(data), "--out", str(out),
                 "--views", "0", "--pixel", "10,10", "--pixel", "0,0"]) == 0
    rows = read_csv(out / "ray_profiles.csv")
    state, _ = load_state(ck)
    ds = load_dataset(data)
    buf = rasterize_forward(state.gaussians.astype(np.float64), state.thresholds, ds.cameras[0])
    for x, y in ((10, 10), (0, 0)):
        a, b = buf.entry_range(x, y)
        assert sum(int(r["x"]) == x and int(r["y"]) == y for r in rows) == b - a


def test_diagnose_without_ground_truth_depth(workspace, tmp_path):
    data = tmp_path / "nogt"
    ds_dir = workspace / "data"
    data.mkdir()
    m = json.loads((ds_dir / "manifest.json").read_text())
    for c in m["cameras"]:
        c["depth"] = None
        (data / c["image"]).write_bytes((ds_dir / c["image"]).read_bytes())
    m.pop("points")
    (data / "manifest.json").write_text(json.dumps(m))
    out = tmp_path / "d"
    assert main(["-q", "diagnose", "--checkpoint", str(workspace / "run" / "checkpoint.spkg"),
                 "--data", str(data), "--out", str(out)]) == 0
    assert json.loads((out / "lop_report.json").read_text())["depth_bias"] is None
    assert main(["diagnose", "--checkpoint", str(workspace / "run" / "checkpoint.spkg"), "--data", str(data),
                 "--out", str(out), "--pixel", "1-2"]) == 2
