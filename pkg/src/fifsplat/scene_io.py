"""Datasets on disk (JSON manifest + PNG + PFM) and the binary checkpoint format."""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import Camera


class DatasetError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class Dataset:
    cameras: list
    images: list  # linear RGB float arrays (h, w, 3)
    depths: list | None = None  # z-depth, 0 where invalid
    split: list | None = None
    bbox: np.ndarray = None
    gt_geometry: list | None = None
    points: np.ndarray | None = None
    point_colors: np.ndarray | None = None
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if self.split is None:
            self.split = ["train"] * len(self.cameras)
        for cam, img in zip(self.cameras, self.images):
            if img.shape != (cam.height, cam.width, 3):
                raise DatasetError(f"image shape {img.shape} does not match camera {cam.width}x{cam.height}")
        if self.depths is not None:
            for cam, d in zip(self.cameras, self.depths):
                if d is not None and d.shape != (cam.height, cam.width):
                    raise DatasetError("depth map shape does not match camera")
                if d is not None and np.any(d < 0):
                    raise DatasetError("depth maps must be non-negative (0 marks invalid)")

    def __len__(self):
        return len(self.cameras)

    def indices(self, which="train"):
        return [i for i, s in enumerate(self.split) if s == which]

    def depth_mask(self, i):
        d = None if self.depths is None else self.depths[i]
        return None if d is None else d > 0

    @property
    def diagonal(self):
        return float(np.linalg.norm(self.bbox[3:] - self.bbox[:3]))


# ---------------------------------------------------------------------------
# sRGB / PNG / PFM
# ---------------------------------------------------------------------------

def srgb_to_linear(c):
    c = np.asarray(c, dtype=np.float64)
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(c):
    c = np.clip(np.asarray(c, dtype=np.float64), 0.0, 1.0)
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * c ** (1 / 2.4) - 0.055)


def write_png(path, linear_rgb):
    q = np.round(linear_to_srgb(linear_rgb) * 255.0).astype(np.uint8)
    Image.fromarray(q, mode="RGB").save(path)


def read_png(path):
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return srgb_to_linear(arr)


def write_pfm(path, data):
    data = np.asarray(data, dtype="<f4")
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.flipud(data).tobytes())


def read_pfm(path):
    with open(path, "rb") as f:
        kind = f.readline().strip()
        if kind not in (b"Pf", b"PF"):
            raise DatasetError(f"{path}: not a PFM file")
        w, h = map(int, f.readline().split())
        scale = float(f.readline())
        dt = "<f4" if scale < 0 else ">f4"
        ch = 3 if kind == b"PF" else 1
        raw = f.read()
    need = w * h * ch * 4
    if len(raw) < need:
        raise DatasetError(f"{path}: truncated PFM ({len(raw)} of {need} bytes)")
    arr = np.frombuffer(raw[:need], dtype=dt).reshape(h, w, ch) if ch == 3 else \
        np.frombuffer(raw[:need], dtype=dt).reshape(h, w)
    return np.flipud(arr).astype(np.float32)


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

def save_dataset(ds: Dataset, root):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    cams = []
    for i, (cam, img) in enumerate(zip(ds.cameras, ds.images)):
        name = f"view_{i:03d}"
        write_png(root / f"{name}.png", img)
        entry = {
            "w": cam.width, "h": cam.height, "fx": cam.fx, "fy": cam.fy, "cx": cam.cx,
            "cy": cam.cy, "w2c": cam.w2c.reshape(-1).tolist(), "image": f"{name}.png",
            "depth": None, "split": ds.split[i], "near": cam.near, "far": cam.far,
        }
        if ds.depths is not None and ds.depths[i] is not None:
            write_pfm(root / f"{name}.pfm", ds.depths[i])
            entry["depth"] = f"{name}.pfm"
        cams.append(entry)
    manifest = {"cameras": cams, "bbox": np.asarray(ds.bbox, dtype=float).tolist(),
                "background": np.asarray(ds.background, dtype=float).tolist()}
    if ds.gt_geometry is not None:
        manifest["gt_geometry"] = ds.gt_geometry
    if ds.points is not None:
        from .mesh import write_ply_points

        write_ply_points(root / "points.ply", ds.points, ds.point_colors)
        manifest["points"] = "points.ply"
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return root / "manifest.json"


def load_dataset(path):
    path = Path(path)
    mpath = path / "manifest.json" if path.is_dir() else path
    root = mpath.parent
    if not mpath.exists():
        raise DatasetError(f"manifest not found: {mpath}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"{mpath}: malformed JSON ({e})") from e
    if "cameras" not in manifest or "bbox" not in manifest:
        raise DatasetError(f"{mpath}: manifest needs 'cameras' and 'bbox'")
    cams, images, depths, split = [], [], [], []
    for i, c in enumerate(manifest["cameras"]):
        try:
            if len(c["w2c"]) != 16:
                raise DatasetError(f"camera {i}: w2c must have 16 entries")
            cam = Camera.from_w2c(c["w2c"], int(c["w"]), int(c["h"]), float(c["fx"]), float(c["fy"]),
                                  float(c["cx"]), float(c["cy"]), near=float(c.get("near", 0.01)),
                                  far=float(c.get("far", 100.0)))
        except KeyError as e:
            raise DatasetError(f"camera {i}: missing field {e}") from e
        except ValueError as e:
            raise DatasetError(f"camera {i}: {e}") from e
        ipath = root / c["image"]
        if not ipath.exists():
            raise DatasetError(f"camera {i}: image file not found: {ipath}")
        img = read_png(ipath)
        if img.shape[:2] != (cam.height, cam.width):
            raise DatasetError(f"camera {i}: image {ipath.name} is {img.shape[1]}x{img.shape[0]}, "
                               f"camera says {cam.width}x{cam.height}")
        d = None
        if c.get("depth"):
            dpath = root / c["depth"]
            if not dpath.exists():
                raise DatasetError(f"camera {i}: depth file not found: {dpath}")
            d = read_pfm(dpath).astype(np.float64)
            if d.shape != (cam.height, cam.width):
                raise DatasetError(f"camera {i}: depth {dpath.name} has wrong size")
        cams.append(cam)
        images.append(img)
        depths.append(d)
        split.append(c.get("split", "train"))
    points = colors = None
    if manifest.get("points"):
        from .mesh import read_ply

        ppath = root / manifest["points"]
        if not ppath.exists():
            raise DatasetError(f"points file not found: {ppath}")
        ply = read_ply(ppath)
        points, colors = ply["vertices"].astype(np.float64), ply.get("colors")
    bbox = np.asarray(manifest["bbox"], dtype=np.float64)
    if bbox.shape != (6,) or np.any(bbox[3:] <= bbox[:3]):
        raise DatasetError(f"{mpath}: bbox must be 6 floats with min < max")
    return Dataset(
        cameras=cams, images=images, depths=depths if any(d is not None for d in depths) else None,
        split=split, bbox=bbox, gt_geometry=manifest.get("gt_geometry"), points=points,
        point_colors=colors, background=np.asarray(manifest.get("background", [0, 0, 0]), dtype=np.float64),
    )


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"SPKG"
VERSION = 1
_F32, _JSON = 0, 1


def write_checkpoint(path, arrays: dict, meta: dict):
    """Header: magic, u32 version, u32 n_gaussians, u32 n_blocks; then named blocks.

    Array blocks are little-endian float32; a final JSON block carries scalars and RNG state.
    """
    n = int(meta.get("n_gaussians", 0))
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<III", VERSION, n, len(arrays) + 1))
    for name, arr in arrays.items():
        a = np.asarray(arr)
        f32 = a.astype("<f4")
        if not np.array_equal(f32.astype(a.dtype), a, equal_nan=True):
            raise CheckpointError(f"block {name!r} is not exactly representable in float32")
        nb = name.encode()
        buf.write(struct.pack("<BH", _F32, len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", a.ndim))
        buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
        buf.write(f32.tobytes())
    js = json.dumps(meta).encode()
    buf.write(struct.pack("<BH", _JSON, 4))
    buf.write(b"meta")
    buf.write(struct.pack("<I", len(js)))
    buf.write(js)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def read_checkpoint(path):
    data = Path(path).read_bytes()
    pos = 0

    def take(k, what):
        nonlocal pos
        if pos + k > len(data):
            raise CheckpointError(f"{path}: truncated while reading {what} at offset {pos} "
                                  f"(need {k} bytes, file has {len(data)})")
        out = data[pos:pos + k]
        pos += k
        return out

    if take(4, "magic") != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    version, n, nblocks = struct.unpack("<III", take(12, "header"))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    arrays, meta = {}, None
    for _ in range(nblocks):
        kind, nlen = struct.unpack("<BH", take(3, "block header"))
        name = take(nlen, "block name").decode()
        if kind == _F32:
            (ndim,) = struct.unpack("<I", take(4, f"{name} ndim"))
            shape = struct.unpack(f"<{ndim}I", take(4 * ndim, f"{name} shape"))
            count = int(np.prod(shape)) if ndim else 1
            arrays[name] = np.frombuffer(take(4 * count, f"{name} data"), dtype="<f4").reshape(shape).copy()
        elif kind == _JSON:
            (ln,) = struct.unpack("<I", take(4, "json length"))
            meta = json.loads(take(ln, "json").decode())
        else:
            raise CheckpointError(f"{path}: unknown block type {kind} at offset {pos}")
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes after last block")
    if meta is None:
        raise CheckpointError(f"{path}: missing metadata block")
    if int(meta.get("n_gaussians", n)) != n:
        raise CheckpointError(f"{path}: header count {n} disagrees with metadata")
    return arrays, meta
