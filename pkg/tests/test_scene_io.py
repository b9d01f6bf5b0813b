import json
import struct

import numpy as np
import pytest

from conftest import axis_camera
from fifsplat.scene_io import (VERSION, CheckpointError, Dataset, DatasetError, linear_to_srgb, load_dataset,
                               read_checkpoint, read_pfm, read_png, save_dataset, write_checkpoint,
                               write_pfm, write_png)
from fifsplat.synthetic import (SyntheticSpec, generate_synthetic, plane_spec, plane_sphere_spec, trace,
                                validate_primitive)

LIGHT = (0.3, 0.5, 1.0)


# ---------------------------------------------------------------------------
# synthetic scenes

def test_fronto_parallel_plane_depth_is_constant():
    cam = axis_camera(21, z=-2.5)
    plane = {"type": "plane", "point": [0, 0, 0], "normal": [0, 0, 1], "extent": [0.5, 0.5]}
    _, depth, hit, _ = trace([plane], cam, LIGHT)
    assert hit[10, 10] and not hit[0, 0]
    np.testing.assert_allclose(depth[hit], 2.5, rtol=1e-13)
    assert np.all(depth[~hit] == 0)


def test_sphere_center_depth():
    cam = axis_camera(21, z=-3.0)
    _, depth, _, _ = trace([{"type": "sphere", "center": [0, 0, 0], "radius": 0.7}], cam, LIGHT)
    assert depth[10, 10] == pytest.approx(3.0 - 0.7, abs=1e-12)


def test_backprojected_depth_lies_on_geometry():
    ds = generate_synthetic(plane_sphere_spec(resolution=24, camera_count=4), seed=0)
    plane, sphere = ds.gt_geometry
    c, r = np.asarray(sphere["center"]), sphere["radius"]
    for cam, d in zip(ds.cameras, ds.depths):
        pts = cam.backproject(d)[d > 0]
        dist = np.minimum(np.abs(pts[:, 2]), np.abs(np.linalg.norm(pts - c, axis=1) - r))
        assert dist.max() < 1e-6


def test_generation_is_deterministic(tmp_path):
    a = generate_synthetic(plane_spec(resolution=16, camera_count=3), seed=5)
    b = generate_synthetic(plane_spec(resolution=16, camera_count=3), seed=5)
    for x, y in zip(a.images + a.depths, b.images + b.depths):
        assert np.array_equal(x, y)
    assert np.array_equal(a.points, b.points)
    save_dataset(a, tmp_path / "a")
    save_dataset(b, tmp_path / "b")
    for f in sorted(p.name for p in (tmp_path / "a").iterdir()):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_degenerate_primitives_rejected():
    with pytest.raises(ValueError):
        validate_primitive({"type": "sphere", "center": [0, 0, 0], "radius": 0.0})
    with pytest.raises(ValueError):
        validate_primitive({"type": "plane", "point": [0, 0, 0], "normal": [0, 0, 0], "extent": 1.0})
    with pytest.raises(ValueError):
        validate_primitive({"type": "torus"})
    with pytest.raises(ValueError):
        generate_synthetic(SyntheticSpec(primitives=[]))


# ---------------------------------------------------------------------------
# images and depth files

def test_png_round_trip_within_one_lsb(tmp_path):
    img = np.random.default_rng(0).random((7, 9, 3))
    write_png(tmp_path / "x.png", img)
    back = read_png(tmp_path / "x.png")
    assert np.abs(linear_to_srgb(back) - linear_to_srgb(img)).max() <= 0.5 / 255 + 1e-12


def test_pfm_round_trip_exact(tmp_path):
    d = np.random.default_rng(1).random((5, 8)).astype(np.float32)
    write_pfm(tmp_path / "d.pfm", d)
    assert np.array_equal(read_pfm(tmp_path / "d.pfm"), d)
    (tmp_path / "t.pfm").write_bytes((tmp_path / "d.pfm").read_bytes()[:-4])
    with pytest.raises(DatasetError, match="truncated"):
        read_pfm(tmp_path / "t.pfm")


# ---------------------------------------------------------------------------
# dataset manifests

@pytest.fixture
def saved(tmp_path):
    ds = generate_synthetic(plane_spec(resolution=12, camera_count=3, holdout_count=1), seed=0)
    save_dataset(ds, tmp_path / "ds")
    return ds, tmp_path / "ds"


def edit_manifest(root, fn):
    m = json.loads((root / "manifest.json").read_text())
    fn(m)
    (root / "manifest.json").write_text(json.dumps(m))


def test_dataset_round_trip(saved):
    ds, root = saved
    back = load_dataset(root)
    assert back.split == ds.split == ["train"] * 3 + ["test"]
    for a, b in zip(ds.cameras, back.cameras):
        np.testing.assert_array_equal(a.w2c, b.w2c)
        assert (a.fx, a.cx, a.width) == (b.fx, b.cx, b.width)
    for a, b in zip(ds.depths, back.depths):
        np.testing.assert_array_equal(a.astype(np.float32), b)
    np.testing.assert_array_equal(back.points, ds.points)
    assert back.gt_geometry == ds.gt_geometry
    assert load_dataset(root / "manifest.json").bbox.tolist() == ds.bbox.tolist()


def test_missing_image_names_the_file(saved):
    _, root = saved
    (root / "view_001.png").unlink()
    with pytest.raises(DatasetError, match="view_001.png"):
        load_dataset(root)


def test_bad_focal_length_rejected(saved):
    _, root = saved
    edit_manifest(root, lambda m: m["cameras"][0].update(fx=0.0))
    with pytest.raises(DatasetError, match="focal"):
        load_dataset(root)


def test_manifest_errors(saved, tmp_path):
    _, root = saved
    with pytest.raises(DatasetError, match="not found"):
        load_dataset(tmp_path / "nowhere")
    edit_manifest(root, lambda m: m["cameras"][2].update(w=13))
    with pytest.raises(DatasetError, match="13x12"):
        load_dataset(root)
    edit_manifest(root, lambda m: m.update(bbox=[0, 0, 0, 0, 1, 1]))
    with pytest.raises(DatasetError):
        load_dataset(root)
    (root / "manifest.json").write_text("{not json")
    with pytest.raises(DatasetError, match="malformed"):
        load_dataset(root)


def test_dataset_validation():
    cam = axis_camera(4)
    with pytest.raises(DatasetError):
        Dataset([cam], [np.zeros((4, 5, 3))])
    with pytest.raises(DatasetError):
        Dataset([cam], [np.zeros((4, 4, 3))], depths=[-np.ones((4, 4))])


# ---------------------------------------------------------------------------
# checkpoints

def sample_blocks():
    rng = np.random.default_rng(2)
    return {"a": rng.random((5, 3)).astype(np.float32), "b": np.float32(0.25), "c": np.zeros((0, 4), np.float32)}


def test_checkpoint_round_trip(tmp_path):
    arrays = sample_blocks()
    meta = {"n_gaussians": 5, "iteration": 7, "nested": {"x": [1, 2]}}
    write_checkpoint(tmp_path / "c.spkg", arrays, meta)
    back, m = read_checkpoint(tmp_path / "c.spkg")
    assert m == meta and set(back) == set(arrays)
    for k in arrays:
        assert back[k].shape == np.shape(arrays[k]) and np.array_equal(back[k], arrays[k])
    assert (tmp_path / "c.spkg").read_bytes()[:4] == b"SPKG"


def test_checkpoint_truncation_reports_offset(tmp_path):
    write_checkpoint(tmp_path / "c.spkg", sample_blocks(), {"n_gaussians": 5})
    data = (tmp_path / "c.spkg").read_bytes()
    for cut in (2, 10, len(data) // 2, len(data) - 1):
        (tmp_path / "t.spkg").write_bytes(data[:cut])
        with pytest.raises(CheckpointError, match="offset|magic"):
            read_checkpoint(tmp_path / "t.spkg")
    (tmp_path / "t.spkg").write_bytes(data + b"x")
    with pytest.raises(CheckpointError, match="trailing"):
        read_checkpoint(tmp_path / "t.spkg")


def test_checkpoint_version_and_magic(tmp_path):
    write_checkpoint(tmp_path / "c.spkg", sample_blocks(), {"n_gaussians": 5})
    data = bytearray((tmp_path / "c.spkg").read_bytes())
    data[4:8] = struct.pack("<I", VERSION + 1)
    (tmp_path / "v.spkg").write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="unsupported checkpoint version"):
        read_checkpoint(tmp_path / "v.spkg")
    data[:4] = b"NOPE"
    (tmp_path / "m.spkg").write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="magic"):
        read_checkpoint(tmp_path / "m.spkg")


def test_checkpoint_rejects_lossy_blocks(tmp_path):
    with pytest.raises(CheckpointError, match="float32"):
        write_checkpoint(tmp_path / "c.spkg", {"x": np.array([0.1])}, {})
    assert not (tmp_path / "c.spkg").exists()
