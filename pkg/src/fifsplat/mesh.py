"""TSDF fusion, masked marching cubes, surface sampling, Chamfer distance and PLY I/O."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from skimage import measure

from .camera import Camera

log = logging.getLogger(__name__)


@dataclass
class TsdfVolume:
    origin: np.ndarray
    voxel_size: float
    dims: tuple
    tsdf: np.ndarray  # values at grid points origin + idx * voxel_size, in [-1, 1]
    weight: np.ndarray
    truncation: float

    @classmethod
    def for_bbox(cls, bbox, resolution=128, voxel_size=None, inflate=0.05, truncation_voxels=4.0):
        """Cubic voxels covering ``bbox`` grown by ``inflate`` of its extent on every side."""
        bbox = np.asarray(bbox, dtype=np.float64)
        lo, hi = bbox[:3], bbox[3:]
        if np.any(hi <= lo):
            raise ValueError("degenerate bbox")
        pad = inflate * (hi - lo)
        lo, hi = lo - pad, hi + pad
        if voxel_size is None:
            if resolution < 2:
                raise ValueError("resolution must be >= 2")
            voxel_size = float(np.max(hi - lo)) / (resolution - 1)
        if voxel_size <= 0:
            raise ValueError("voxel size must be positive")
        dims = tuple(int(np.ceil((hi[i] - lo[i]) / voxel_size - 1e-9)) + 1 for i in range(3))
        return cls(lo, float(voxel_size), dims, np.ones(dims), np.zeros(dims),
                   truncation_voxels * float(voxel_size))

    def grid_points(self):
        axes = [self.origin[i] + self.voxel_size * np.arange(self.dims[i]) for i in range(3)]
        X, Y, Z = np.meshgrid(*axes, indexing="ij")
        return np.stack([X, Y, Z], axis=-1)

    def integrate(self, depth, cam: Camera, valid=None):
        """Fuse one z-depth map; ``valid`` masks pixels that count as observations."""
        depth = np.asarray(depth, dtype=np.float64)
        valid = depth > 0 if valid is None else (np.asarray(valid, bool) & (depth > 0))
        pts = self.grid_points().reshape(-1, 3)
        pc = cam.to_camera(pts)
        z = pc[:, 2]
        front = z > cam.near
        zs = np.where(front, z, 1.0)
        u = np.floor(cam.fx * pc[:, 0] / zs + cam.cx).astype(np.int64)
        v = np.floor(cam.fy * pc[:, 1] / zs + cam.cy).astype(np.int64)
        inside = front & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
        idx = np.flatnonzero(inside)
        d = depth[v[idx], u[idx]]
        ok = valid[v[idx], u[idx]]
        sdf = d - z[idx]
        ok &= sdf >= -self.truncation  # far behind the surface: unknown
        idx, sdf = idx[ok], sdf[ok]
        val = np.clip(sdf / self.truncation, -1.0, 1.0)
        t = self.tsdf.reshape(-1)
        w = self.weight.reshape(-1)
        t[idx] = (t[idx] * w[idx] + val) / (w[idx] + 1.0)
        w[idx] += 1.0
        return int(idx.size)

    def dump(self, path):
        """Raw debug dump: 'TSDF' + 3 u32 dims + 4 f32 (origin, voxel) + tsdf and weight blocks."""
        with open(path, "wb") as f:
            f.write(b"TSDF")
            f.write(struct.pack("<3I", *self.dims))
            f.write(struct.pack("<4f", *self.origin, self.voxel_size))
            f.write(self.tsdf.astype("<f4").tobytes())
            f.write(self.weight.astype("<f4").tobytes())


def tsdf_fuse(depths, cameras, volume: TsdfVolume, masks=None):
    """Fuse depth maps (normalized depth; masked pixels are skipped) into ``volume``."""
    touched = 0
    for i, (d, cam) in enumerate(zip(depths, cameras)):
        touched += volume.integrate(d, cam, None if masks is None else masks[i])
    if not np.any(volume.weight > 0):
        log.warning("TSDF volume received no observations (grid outside every frustum?)")
    return volume


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")

    @property
    def is_empty(self):
        return self.triangles.shape[0] == 0

    def areas(self):
        v = self.vertices[self.triangles]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)


def marching_cubes(volume: TsdfVolume, iso=0.0):
    """Polygonize the iso-surface over cells whose eight corners were all observed."""
    t = volume.tsdf
    observed = volume.weight > 0
    # skimage reads the mask at a cell's far corner: mask[i, j, k] gates the cell [i-1, i]^3
    cell = np.zeros_like(observed)
    cell[1:, 1:, 1:] = (
        observed[:-1, :-1, :-1] & observed[1:, :-1, :-1] & observed[:-1, 1:, :-1]
        & observed[:-1, :-1, 1:] & observed[1:, 1:, :-1] & observed[1:, :-1, 1:]
        & observed[:-1, 1:, 1:] & observed[1:, 1:, 1:])
    if min(volume.dims) < 2 or not cell.any():
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64))
    vals = t[observed]
    if not (vals.min() < iso < vals.max()):
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64))
    try:
        verts, faces, normals, _ = measure.marching_cubes(
            t, level=iso, spacing=(volume.voxel_size,) * 3, mask=cell, allow_degenerate=False)
    except (ValueError, RuntimeError):
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64))
    mesh = TriangleMesh(verts + volume.origin, faces, normals)
    return drop_degenerate(mesh)


def drop_degenerate(mesh: TriangleMesh, tol=0.0):
    keep = mesh.areas() > tol
    if keep.all():
        return mesh
    return TriangleMesh(mesh.vertices, mesh.triangles[keep], mesh.normals)


def sample_mesh_points(mesh: TriangleMesh, n, seed=0):
    """Area-weighted, barycentric-uniform surface samples."""
    if n <= 0:
        raise ValueError("sample count must be positive")
    if mesh.is_empty:
        raise ValueError("cannot sample an empty mesh")
    areas = mesh.areas()
    total = areas.sum()
    if not total > 0:
        raise ValueError("mesh has zero total area")
    rng = np.random.default_rng(seed)
    tri = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    v = mesh.vertices[mesh.triangles[tri]]
    return ((1 - r1)[:, None] * v[:, 0] + (r1 * (1 - r2))[:, None] * v[:, 1]
            + (r1 * r2)[:, None] * v[:, 2])


def chamfer_distance(a, b):
    """0.5 * (mean_a min_b |a - b| + mean_b min_a |a - b|)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer distance needs two non-empty point sets")
    dab, _ = cKDTree(b).query(a)
    dba, _ = cKDTree(a).query(b)
    return 0.5 * (float(dab.mean()) + float(dba.mean()))


# ---------------------------------------------------------------------------
# PLY
# ---------------------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1", "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2", "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def write_ply(path, mesh: TriangleMesh, binary=True):
    v = np.asarray(mesh.vertices, dtype=np.float32)
    f = np.asarray(mesh.triangles, dtype=np.int32)
    fmt = "binary_little_endian" if binary else "ascii"
    header = (f"ply\nformat {fmt} 1.0\nelement vertex {len(v)}\nproperty float x\n"
              f"property float y\nproperty float z\nelement face {len(f)}\n"
              "property list uchar int vertex_indices\nend_header\n")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if binary:
            fh.write(v.astype("<f4").tobytes())
            if len(f):
                rec = np.zeros(len(f), dtype=[("n", "u1"), ("i", "<i4", (3,))])
                rec["n"] = 3
                rec["i"] = f
                fh.write(rec.tobytes())
        else:
            for p in v:
                fh.write((" ".join(repr(float(x)) for x in p) + "\n").encode())
            for t in f:
                fh.write(f"3 {t[0]} {t[1]} {t[2]}\n".encode())


def write_ply_points(path, points, colors=None):
    """ASCII vertex-only PLY; colors (linear floats in [0, 1]) stored as uchar."""
    pts = np.asarray(points, dtype=np.float64)
    lines = ["ply", "format ascii 1.0", f"element vertex {len(pts)}",
             "property double x", "property double y", "property double z"]
    if colors is not None:
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
        cols = np.clip(np.round(np.asarray(colors) * 255), 0, 255).astype(np.uint8)
    lines.append("end_header")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
        for i, p in enumerate(pts):
            row = " ".join(repr(float(x)) for x in p)
            if colors is not None:
                row += f" {cols[i, 0]} {cols[i, 1]} {cols[i, 2]}"
            fh.write(row + "\n")


def read_ply(path):
    """Vertices (and faces/colors when present) from ASCII or binary little-endian PLY."""
    data = Path(path).read_bytes()
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise ValueError(f"{path}: not a PLY file")
    body_start = data.index(b"\n", end) + 1
    header = data[:end].decode("ascii").splitlines()
    fmt = None
    elements = []
    for line in header:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append([parts[1], int(parts[2]), []])
        elif parts[0] == "property":
            if parts[1] == "list":
                elements[-1][2].append((parts[4], "list", _PLY_TYPES[parts[2]], _PLY_TYPES[parts[3]]))
            else:
                elements[-1][2].append((parts[2], _PLY_TYPES[parts[1]]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise ValueError(f"{path}: unsupported PLY format {fmt}")
    out = {}
    if fmt == "ascii":
        tokens = data[body_start:].split()
        pos = 0
        for name, count, props in elements:
            rows = []
            for _ in range(count):
                row = {}
                for prop in props:
                    if prop[1] == "list":
                        k = int(tokens[pos])
                        row[prop[0]] = [int(x) for x in tokens[pos + 1:pos + 1 + k]]
                        pos += 1 + k
                    else:
                        row[prop[0]] = float(tokens[pos])
                        pos += 1
                rows.append(row)
            out[name] = rows
        verts = out.get("vertex", [])
        res = {"vertices": np.array([[r["x"], r["y"], r["z"]] for r in verts]).reshape(-1, 3)}
        if verts and "red" in verts[0]:
            res["colors"] = np.array([[r["red"], r["green"], r["blue"]] for r in verts]) / 255.0
        faces = out.get("face", [])
        res["faces"] = np.array([r["vertex_indices"] for r in faces], dtype=np.int64).reshape(-1, 3)
        return res
    pos = body_start
    res = {}
    for name, count, props in elements:
        if any(p[1] == "list" for p in props):
            idx = []
            for _ in range(count):
                for prop in props:
                    if prop[1] == "list":
                        ct = np.dtype("<" + prop[2])
                        k = int(np.frombuffer(data, ct, 1, pos)[0])
                        pos += ct.itemsize
                        it = np.dtype("<" + prop[3])
                        idx.append(np.frombuffer(data, it, k, pos))
                        pos += it.itemsize * k
                    else:
                        pos += np.dtype(prop[1]).itemsize
            res[name] = idx
        else:
            dt = np.dtype([(p[0], "<" + p[1]) for p in props])
            arr = np.frombuffer(data, dt, count, pos)
            pos += dt.itemsize * count
            res[name] = arr
    v = res.get("vertex")
    outd = {"vertices": np.zeros((0, 3)) if v is None else
            np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64)}
    if v is not None and "red" in v.dtype.names:
        outd["colors"] = np.stack([v["red"], v["green"], v["blue"]], axis=1) / 255.0
    faces = res.get("face", [])
    outd["faces"] = np.array(faces, dtype=np.int64).reshape(-1, 3)
    return outd


def read_mesh(path):
    ply = read_ply(path)
    return TriangleMesh(ply["vertices"], ply["faces"])
