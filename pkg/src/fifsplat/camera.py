"""Pinhole camera with a rigid world-to-camera transform (OpenCV axes: +z forward)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Camera:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray  # world-to-camera rotation
    t: np.ndarray  # world-to-camera translation
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        self.validate()

    def validate(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"bad resolution {self.width}x{self.height}")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive (fx={self.fx}, fy={self.fy})")
        if not (self.near > 0 and self.far > self.near):
            raise ValueError(f"need 0 < near < far, got near={self.near}, far={self.far}")
        if np.abs(self.R @ self.R.T - np.eye(3)).max() > 1e-9 or np.linalg.det(self.R) < 0:
            raise ValueError("camera rotation is not a proper orthonormal matrix")

    @classmethod
    def from_w2c(cls, w2c, width, height, fx, fy, cx, cy, **kw):
        w2c = np.asarray(w2c, dtype=np.float64).reshape(4, 4)
        return cls(width, height, fx, fy, cx, cy, w2c[:3, :3], w2c[:3, 3], **kw)

    @classmethod
    def look_at(cls, eye, target, up, width, height, fov_y_deg=45.0, **kw):
        """Camera at ``eye`` looking at ``target``; image y points along -up."""
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        # re-orthonormalize to machine precision
        u, _, vt = np.linalg.svd(R)
        R = u @ vt
        f = 0.5 * height / np.tan(np.radians(fov_y_deg) / 2)
        return cls(width, height, f, f, width / 2, height / 2, R, -R @ eye, **kw)

    @property
    def w2c(self):
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.t
        return m

    @property
    def center(self):
        return -self.R.T @ self.t

    def to_camera(self, pts):
        return np.asarray(pts, dtype=np.float64) @ self.R.T + self.t

    def pixel_rays(self):
        """Unit ray directions (world frame) through pixel centers, shape (h, w, 3)."""
        xs = (np.arange(self.width) + 0.5 - self.cx) / self.fx
        ys = (np.arange(self.height) + 0.5 - self.cy) / self.fy
        X, Y = np.meshgrid(xs, ys)
        d = np.stack([X, Y, np.ones_like(X)], axis=-1)
        d = d @ self.R  # camera -> world (R^T applied on the right)
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def backproject(self, depth):
        """World points for a z-depth map, shape (h, w, 3)."""
        xs = (np.arange(self.width) + 0.5 - self.cx) / self.fx
        ys = (np.arange(self.height) + 0.5 - self.cy) / self.fy
        X, Y = np.meshgrid(xs, ys)
        pc = np.stack([X * depth, Y * depth, depth], axis=-1)
        return (pc - self.t) @ self.R
