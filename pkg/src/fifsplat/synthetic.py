"""Analytic scenes (planes, spheres, boxes) ray-traced to images with exact depth."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import Camera

EPS = 1e-9


def _plane_axes(normal):
    n = np.asarray(normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    helper = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(n, helper)
    u /= np.linalg.norm(u)
    return n, u, np.cross(n, u)


def _extent2(extent):
    e = np.atleast_1d(np.asarray(extent, dtype=np.float64))
    return np.array([e[0], e[0]]) if e.size == 1 else e[:2]


def validate_primitive(p):
    kind = p.get("type")
    if kind == "plane":
        n = np.asarray(p["normal"], dtype=np.float64)
        if np.linalg.norm(n) < EPS or np.any(_extent2(p["extent"]) <= 0):
            raise ValueError(f"degenerate plane {p}")
    elif kind == "sphere":
        if not p["radius"] > 0:
            raise ValueError(f"degenerate sphere {p}")
    elif kind == "box":
        if np.any(np.asarray(p["half_extents"], dtype=np.float64) <= 0):
            raise ValueError(f"degenerate box {p}")
    else:
        raise ValueError(f"unknown primitive type {kind!r}")


def intersect(p, origins, dirs):
    """Ray parameter and outward unit normal for one primitive; t = inf on miss."""
    n_rays = dirs.shape[0]
    t = np.full(n_rays, np.inf)
    nrm = np.zeros((n_rays, 3))
    kind = p["type"]
    if kind == "plane":
        n, u, v = _plane_axes(p["normal"])
        p0 = np.asarray(p["point"], dtype=np.float64)
        ext = _extent2(p["extent"])
        dn = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            th = ((p0 - origins) @ n) / dn
        x = origins + th[:, None] * dirs - p0
        ok = (np.abs(dn) > EPS) & (th > EPS) & (np.abs(x @ u) <= ext[0]) & (np.abs(x @ v) <= ext[1])
        t[ok] = th[ok]
        nrm[ok] = n
    elif kind == "sphere":
        c = np.asarray(p["center"], dtype=np.float64)
        r = float(p["radius"])
        oc = origins - c
        b = np.sum(oc * dirs, 1)
        cc = np.sum(oc * oc, 1) - r * r
        disc = b * b - cc
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t0 = -b - sq
        t1 = -b + sq
        th = np.where(t0 > EPS, t0, t1)
        ok &= th > EPS
        t[ok] = th[ok]
        hit = origins[ok] + th[ok, None] * dirs[ok]
        nrm[ok] = (hit - c) / r
    elif kind == "box":
        c = np.asarray(p["center"], dtype=np.float64)
        h = np.asarray(p["half_extents"], dtype=np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            ta = (c - h - origins) * inv
            tb = (c + h - origins) * inv
        tmin = np.minimum(ta, tb)
        tmax = np.maximum(ta, tb)
        tn = np.max(tmin, 1)
        tf = np.min(tmax, 1)
        ok = (tf >= tn) & (tf > EPS)
        th = np.where(tn > EPS, tn, tf)
        t[ok] = th[ok]
        hit = origins[ok] + th[ok, None] * dirs[ok]
        local = (hit - c) / h
        axis = np.argmax(np.abs(local), 1)
        nn = np.zeros_like(local)
        nn[np.arange(len(axis)), axis] = np.sign(local[np.arange(len(axis)), axis])
        nrm[ok] = nn
    else:
        raise ValueError(f"unknown primitive type {kind!r}")
    return t, nrm


def albedo(p, pts):
    a = p.get("albedo", {"kind": "constant", "color": [0.7, 0.7, 0.7]})
    if a["kind"] == "constant":
        return np.broadcast_to(np.asarray(a["color"], dtype=np.float64), pts.shape).copy()
    if a["kind"] == "checker":
        period = float(a.get("period", 0.25))
        cells = np.floor(pts / period + 1e-9).astype(np.int64).sum(1) % 2
        cols = np.asarray(a["colors"], dtype=np.float64)
        return cols[cells]
    raise ValueError(f"unknown albedo kind {a['kind']!r}")


def trace(primitives, cam: Camera, light_dir, ambient=0.3, background=(0.0, 0.0, 0.0)):
    """Closest-hit Lambert render: (rgb, z-depth, valid mask, world hit points)."""
    dirs = cam.pixel_rays().reshape(-1, 3)
    origins = np.broadcast_to(cam.center, dirs.shape)
    best = np.full(dirs.shape[0], np.inf)
    normal = np.zeros_like(dirs)
    owner = np.full(dirs.shape[0], -1)
    for i, p in enumerate(primitives):
        t, n = intersect(p, origins, dirs)
        closer = t < best
        best[closer] = t[closer]
        normal[closer] = n[closer]
        owner[closer] = i
    hit = np.isfinite(best)
    pts = origins + np.where(hit, best, 0.0)[:, None] * dirs
    rgb = np.tile(np.asarray(background, dtype=np.float64), (dirs.shape[0], 1))
    light = np.asarray(light_dir, dtype=np.float64)
    light = light / np.linalg.norm(light)
    for i, p in enumerate(primitives):
        m = owner == i
        if not m.any():
            continue
        n = normal[m]
        n = np.where((np.sum(n * dirs[m], 1) > 0)[:, None], -n, n)  # two-sided
        shade = ambient + (1 - ambient) * np.maximum(0.0, n @ light)
        rgb[m] = albedo(p, pts[m]) * shade[:, None]
    fwd = cam.R[2]
    depth = np.where(hit, best * (dirs @ fwd), 0.0)
    H, W = cam.height, cam.width
    return (rgb.reshape(H, W, 3), depth.reshape(H, W), hit.reshape(H, W), pts.reshape(H, W, 3))


@dataclass
class SyntheticSpec:
    primitives: list
    camera_count: int = 16
    camera_radius: float = 3.0
    camera_elevation_deg: float = 35.0
    camera_target: tuple = (0.0, 0.0, 0.0)
    camera_up: tuple = (0.0, 0.0, 1.0)
    fov_deg: float = 45.0
    resolution: tuple = (64, 64)
    light_dir: tuple = (0.3, 0.5, 1.0)
    ambient: float = 0.3
    background: tuple = (0.0, 0.0, 0.0)
    holdout_count: int = 0
    n_points: int = 2000
    point_noise: float = 0.0
    bbox: list | None = None
    extra: dict = field(default_factory=dict)

    def validate(self):
        if not self.primitives:
            raise ValueError("synthetic spec needs at least one primitive")
        if self.camera_count < 2:
            raise ValueError("synthetic spec needs at least two cameras")
        for p in self.primitives:
            validate_primitive(p)

    @classmethod
    def from_dict(cls, d):
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        for key in ("camera_target", "camera_up", "resolution", "light_dir", "background"):
            if key in known:
                known[key] = tuple(known[key])
        return cls(**known)

    def to_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


def ring_cameras(spec: SyntheticSpec, count, phase=0.0):
    w, h = spec.resolution
    el = np.radians(spec.camera_elevation_deg)
    target = np.asarray(spec.camera_target, dtype=np.float64)
    cams = []
    for k in range(count):
        az = 2 * np.pi * (k + phase) / count
        eye = target + spec.camera_radius * np.array(
            [np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        cams.append(Camera.look_at(eye, target, spec.camera_up, w, h, spec.fov_deg,
                                   near=0.01, far=10 * spec.camera_radius))
    return cams


def primitive_bbox(p):
    kind = p["type"]
    if kind == "sphere":
        c = np.asarray(p["center"], dtype=np.float64)
        return c - p["radius"], c + p["radius"]
    if kind == "box":
        c = np.asarray(p["center"], dtype=np.float64)
        h = np.asarray(p["half_extents"], dtype=np.float64)
        return c - h, c + h
    n, u, v = _plane_axes(p["normal"])
    ext = _extent2(p["extent"])
    p0 = np.asarray(p["point"], dtype=np.float64)
    corners = np.array([p0 + su * ext[0] * u + sv * ext[1] * v for su in (-1, 1) for sv in (-1, 1)])
    return corners.min(0), corners.max(0)


def sample_primitive_surface(p, n, rng):
    """Uniform area samples on one primitive's surface."""
    kind = p["type"]
    if kind == "plane":
        nrm, u, v = _plane_axes(p["normal"])
        ext = _extent2(p["extent"])
        a = rng.uniform(-1, 1, (n, 2)) * ext
        return np.asarray(p["point"], dtype=np.float64) + a[:, :1] * u + a[:, 1:] * v
    if kind == "sphere":
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return np.asarray(p["center"], dtype=np.float64) + p["radius"] * d
    if kind == "box":
        h = np.asarray(p["half_extents"], dtype=np.float64)
        areas = np.array([h[1] * h[2], h[0] * h[2], h[0] * h[1]] * 2)
        face = rng.choice(6, size=n, p=areas / areas.sum())
        pts = rng.uniform(-1, 1, (n, 3)) * h
        ax = face % 3
        sign = np.where(face < 3, 1.0, -1.0)
        pts[np.arange(n), ax] = sign * h[ax]
        return np.asarray(p["center"], dtype=np.float64) + pts
    raise ValueError(kind)


def primitive_area(p):
    kind = p["type"]
    if kind == "plane":
        e = _extent2(p["extent"])
        return 4 * e[0] * e[1]
    if kind == "sphere":
        return 4 * np.pi * p["radius"] ** 2
    h = np.asarray(p["half_extents"], dtype=np.float64)
    return 8 * (h[0] * h[1] + h[1] * h[2] + h[0] * h[2])


def distance_to_primitive(p, pts):
    """Unsigned Euclidean distance from points to a primitive's surface."""
    pts = np.asarray(pts, dtype=np.float64)
    kind = p["type"]
    if kind == "sphere":
        c = np.asarray(p["center"], dtype=np.float64)
        return np.abs(np.linalg.norm(pts - c, axis=1) - p["radius"])
    if kind == "plane":
        n, u, v = _plane_axes(p["normal"])
        ext = _extent2(p["extent"])
        x = pts - np.asarray(p["point"], dtype=np.float64)
        du = np.maximum(np.abs(x @ u) - ext[0], 0)
        dv = np.maximum(np.abs(x @ v) - ext[1], 0)
        return np.sqrt((x @ n) ** 2 + du**2 + dv**2)
    c = np.asarray(p["center"], dtype=np.float64)
    h = np.asarray(p["half_extents"], dtype=np.float64)
    q = np.abs(pts - c) - h
    outside = np.linalg.norm(np.maximum(q, 0), axis=1)
    inside = np.minimum(np.max(q, axis=1), 0)
    return np.abs(outside + inside)


def visible_surface_samples(primitives, cameras, n, rng, tol=1e-6):
    """Area-uniform surface samples kept only if some camera sees them unoccluded."""
    areas = np.array([primitive_area(p) for p in primitives])
    counts = rng.multinomial(n * 4, areas / areas.sum())
    pts = np.concatenate([sample_primitive_surface(p, c, rng) for p, c in zip(primitives, counts)])
    seen = np.zeros(len(pts), bool)
    for cam in cameras:
        pc = cam.to_camera(pts)
        z = pc[:, 2]
        u = cam.fx * pc[:, 0] / np.maximum(z, 1e-9) + cam.cx
        v = cam.fy * pc[:, 1] / np.maximum(z, 1e-9) + cam.cy
        inview = (z > cam.near) & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
        idx = np.flatnonzero(inview & ~seen)
        if idx.size == 0:
            continue
        d = pts[idx] - cam.center
        dist = np.linalg.norm(d, axis=1)
        d /= dist[:, None]
        best = np.full(idx.size, np.inf)
        for p in primitives:
            t, _ = intersect(p, np.broadcast_to(cam.center, d.shape), d)
            best = np.minimum(best, t)
        seen[idx] = best >= dist - 1e-6 * np.maximum(1.0, dist) - tol
    out = pts[seen]
    if len(out) > n:
        out = out[np.sort(rng.choice(len(out), size=n, replace=False))]
    return out


def generate_synthetic(spec: SyntheticSpec, seed=0):
    """Ray-trace every camera; returns a :class:`~fifsplat.scene_io.Dataset`."""
    from .scene_io import Dataset

    spec.validate()
    rng = np.random.default_rng(seed)
    train = ring_cameras(spec, spec.camera_count)
    test = ring_cameras(spec, spec.holdout_count, phase=0.5) if spec.holdout_count else []
    cams, images, depths, split = [], [], [], []
    for cam, tag in [(c, "train") for c in train] + [(c, "test") for c in test]:
        rgb, depth, hit, _ = trace(spec.primitives, cam, spec.light_dir, spec.ambient, spec.background)
        cams.append(cam)
        images.append(rgb)
        depths.append(depth)
        split.append(tag)

    if spec.bbox is not None:
        bbox = np.asarray(spec.bbox, dtype=np.float64)
    else:
        lo = np.min([primitive_bbox(p)[0] for p in spec.primitives], axis=0)
        hi = np.max([primitive_bbox(p)[1] for p in spec.primitives], axis=0)
        pad = 0.05 * np.linalg.norm(hi - lo)
        bbox = np.concatenate([lo - pad, hi + pad])

    # sparse "structure-from-motion" style points from training depth maps
    pts, cols = [], []
    for cam, img, depth in zip(train, images, depths):
        world = cam.backproject(depth)
        valid = depth > 0
        pts.append(world[valid])
        cols.append(img[valid])
    pts = np.concatenate(pts)
    cols = np.concatenate(cols)
    take = rng.choice(len(pts), size=min(spec.n_points, len(pts)), replace=False)
    points = pts[take] + rng.normal(scale=spec.point_noise, size=(take.size, 3)) if spec.point_noise else pts[take]
    return Dataset(
        cameras=cams, images=images, depths=depths, split=split, bbox=bbox,
        gt_geometry=[dict(p) for p in spec.primitives], points=points, point_colors=cols[take],
        background=np.asarray(spec.background, dtype=np.float64),
    )


def plane_sphere_spec(resolution=64, camera_count=16, holdout_count=4):
    """Checkered ground plane with a sphere resting on it."""
    return SyntheticSpec(
        primitives=[
            {"type": "plane", "point": [0.0, 0.0, 0.0], "normal": [0.0, 0.0, 1.0], "extent": [1.0, 1.0],
             "albedo": {"kind": "checker", "colors": [[0.85, 0.8, 0.7], [0.25, 0.3, 0.45]], "period": 0.25}},
            {"type": "sphere", "center": [0.0, 0.0, 0.35], "radius": 0.35,
             "albedo": {"kind": "checker", "colors": [[0.8, 0.3, 0.2], [0.9, 0.75, 0.3]], "period": 0.2}},
        ],
        camera_count=camera_count, resolution=(resolution, resolution), holdout_count=holdout_count,
    )


def plane_spec(resolution=64, camera_count=16, holdout_count=0):
    spec = plane_sphere_spec(resolution, camera_count, holdout_count)
    spec.primitives = spec.primitives[:1]
    return spec
