"""Screen-space projection of flattened Gaussians (affine/EWA approximation).

Everything here is vectorized over the N primitives; the per-pixel work lives
in the raster kernels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import Camera
from .core import FlattenedGaussian, GaussianSet, quat_to_rotmat, sigmoid

DILATION = 0.3
# exp(-9/2): value of a Gaussian at 3 sigma; nothing below it is ever blended.
SUPPORT_FLOOR = float(np.exp(-4.5))


def cutoff_radius(cov2d, local_threshold):
    """Pixel radius beyond which the gated 2D Gaussian is exactly zero.

    ``cov2d`` is (..., 2, 2) or a (..., 3) packed (c00, c01, c11) array.
    """
    cov2d = np.asarray(cov2d, dtype=np.float64)
    if cov2d.shape[-2:] == (2, 2):
        c00, c01, c11 = cov2d[..., 0, 0], cov2d[..., 0, 1], cov2d[..., 1, 1]
    else:
        c00, c01, c11 = cov2d[..., 0], cov2d[..., 1], cov2d[..., 2]
    mid = 0.5 * (c00 + c11)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - (c00 * c11 - c01 * c01), 0.0))
    v = np.maximum(np.asarray(local_threshold, dtype=np.float64), SUPPORT_FLOOR)
    return np.sqrt(-2.0 * np.log(v)) * np.sqrt(lam_max)


@dataclass
class ScreenSplat:
    center: np.ndarray  # (2,) pixels
    cov2d: np.ndarray  # (2, 2)
    depth: float
    radius: float
    index: int


@dataclass
class Projection:
    """Per-primitive screen-space quantities plus what the backward pass needs."""

    means2d: np.ndarray  # (N, 2)
    cov2d: np.ndarray  # (N, 3) packed
    conics: np.ndarray  # (N, 3) packed inverse
    depths: np.ndarray  # (N,) camera-space z
    radii: np.ndarray  # (N,)
    normals: np.ndarray  # (N, 3) camera frame, facing the camera
    visible: np.ndarray  # (N,) bool
    # cached intermediates
    quat_unit: np.ndarray
    rot: np.ndarray
    p_cam: np.ndarray
    A: np.ndarray
    B: np.ndarray
    a_cam: np.ndarray
    b_cam: np.ndarray
    flip: np.ndarray
    scales: np.ndarray

    def __len__(self):
        return self.means2d.shape[0]


def project(gaussians: GaussianSet, cam: Camera) -> Projection:
    means = np.asarray(gaussians.means, dtype=np.float64)
    scales = np.asarray(gaussians.scales, dtype=np.float64)
    q = np.asarray(gaussians.quats, dtype=np.float64)
    n = means.shape[0]

    qn = q / np.linalg.norm(q, axis=1, keepdims=True) if n else q
    rot = quat_to_rotmat(qn) if n else np.zeros((0, 3, 3))
    p_cam = means @ cam.R.T + cam.t
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    in_depth = (z > cam.near) & (z < cam.far)
    zs = np.where(in_depth, z, 1.0)

    a_cam = rot[:, :, 0] @ cam.R.T
    b_cam = rot[:, :, 1] @ cam.R.T
    n_cam = rot[:, :, 2] @ cam.R.T

    # J @ v for the affine Jacobian at the center
    def jmul(v):
        return np.stack([
            cam.fx / zs * v[:, 0] - cam.fx * x / zs**2 * v[:, 2],
            cam.fy / zs * v[:, 1] - cam.fy * y / zs**2 * v[:, 2],
        ], axis=1)

    A = jmul(a_cam)
    B = jmul(b_cam)
    sx2 = scales[:, 0] ** 2
    sy2 = scales[:, 1] ** 2
    c00 = sx2 * A[:, 0] ** 2 + sy2 * B[:, 0] ** 2 + DILATION
    c01 = sx2 * A[:, 0] * A[:, 1] + sy2 * B[:, 0] * B[:, 1]
    c11 = sx2 * A[:, 1] ** 2 + sy2 * B[:, 1] ** 2 + DILATION
    det = c00 * c11 - c01 * c01
    cov2d = np.stack([c00, c01, c11], axis=1)
    conics = np.stack([c11 / det, -c01 / det, c00 / det], axis=1)

    means2d = np.stack([cam.fx * x / zs + cam.cx, cam.fy * y / zs + cam.cy], axis=1)
    radii = cutoff_radius(cov2d, gaussians.local_thresholds)

    flip = np.where(np.einsum("ij,ij->i", n_cam, p_cam) > 0, -1.0, 1.0)
    normals = n_cam * flip[:, None]

    on_image = (
        (means2d[:, 0] + radii >= 0) & (means2d[:, 0] - radii <= cam.width)
        & (means2d[:, 1] + radii >= 0) & (means2d[:, 1] - radii <= cam.height)
    )
    visible = in_depth & on_image & np.isfinite(radii)
    return Projection(
        means2d, cov2d, conics, z.copy(), radii, normals, visible,
        qn, rot, p_cam, A, B, a_cam, b_cam, flip, scales,
    )


def project_gaussian(g: FlattenedGaussian, cam: Camera, index: int = 0):
    """Project one primitive; returns a ScreenSplat or ``None`` when culled."""
    gs = GaussianSet.from_primitives([g])
    pr = project(gs, cam)
    if not pr.visible[0]:
        return None
    c = pr.cov2d[0]
    return ScreenSplat(
        center=pr.means2d[0].copy(),
        cov2d=np.array([[c[0], c[1]], [c[1], c[2]]]),
        depth=float(pr.depths[0]),
        radius=float(pr.radii[0]),
        index=index,
    )


def _quat_backward(qn, q_raw, dR):
    """dL/dq for R(q / |q|) given dL/dR (N, 3, 3)."""
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    g = lambda i, j: dR[:, i, j]  # noqa: E731
    dw = 2 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1))
    dx = 2 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2 * x * g(1, 1) - w * g(1, 2)
              + z * g(2, 0) + w * g(2, 1) - 2 * x * g(2, 2))
    dy = 2 * (-2 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2)
              - w * g(2, 0) + z * g(2, 1) - 2 * y * g(2, 2))
    dz = 2 * (-2 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2 * z * g(1, 1)
              + y * g(1, 2) + x * g(2, 0) + y * g(2, 1))
    dqn = np.stack([dw, dx, dy, dz], axis=1)
    norm = np.linalg.norm(q_raw, axis=1, keepdims=True)
    return (dqn - qn * np.sum(qn * dqn, axis=1, keepdims=True)) / norm


def project_backward(pr: Projection, cam: Camera, quats, g_means2d, g_conics, g_depths, g_normals):
    """Chain screen-space gradients back to (means, scales, quats)."""
    x, y, z = pr.p_cam[:, 0], pr.p_cam[:, 1], pr.p_cam[:, 2]
    z = np.where(pr.visible, z, 1.0)
    fx, fy = cam.fx, cam.fy

    # conic -> covariance: dSigma = -K dK K with symmetric full-matrix dK
    Ka, Kb, Kc = pr.conics[:, 0], pr.conics[:, 1], pr.conics[:, 2]
    K = np.stack([np.stack([Ka, Kb], -1), np.stack([Kb, Kc], -1)], -2)
    gK = np.stack([
        np.stack([g_conics[:, 0], 0.5 * g_conics[:, 1]], -1),
        np.stack([0.5 * g_conics[:, 1], g_conics[:, 2]], -1),
    ], -2)
    gS = -K @ gK @ K

    sx, sy = pr.scales[:, 0], pr.scales[:, 1]
    GA = np.einsum("nij,nj->ni", gS, pr.A)
    GB = np.einsum("nij,nj->ni", gS, pr.B)
    dA = 2 * (sx**2)[:, None] * GA
    dB = 2 * (sy**2)[:, None] * GB
    d_scales = np.stack([2 * sx * np.sum(pr.A * GA, 1), 2 * sy * np.sum(pr.B * GB, 1)], axis=1)

    # A = J a_cam, B = J b_cam
    def jt_mul(d):
        return np.stack([
            fx / z * d[:, 0],
            fy / z * d[:, 1],
            -fx * x / z**2 * d[:, 0] - fy * y / z**2 * d[:, 1],
        ], axis=1)

    d_acam = jt_mul(dA)
    d_bcam = jt_mul(dB)
    dJ00 = dA[:, 0] * pr.a_cam[:, 0] + dB[:, 0] * pr.b_cam[:, 0]
    dJ02 = dA[:, 0] * pr.a_cam[:, 2] + dB[:, 0] * pr.b_cam[:, 2]
    dJ11 = dA[:, 1] * pr.a_cam[:, 1] + dB[:, 1] * pr.b_cam[:, 1]
    dJ12 = dA[:, 1] * pr.a_cam[:, 2] + dB[:, 1] * pr.b_cam[:, 2]

    gx = g_means2d[:, 0] * fx / z + dJ02 * (-fx / z**2)
    gy = g_means2d[:, 1] * fy / z + dJ12 * (-fy / z**2)
    gz = (
        -g_means2d[:, 0] * fx * x / z**2 - g_means2d[:, 1] * fy * y / z**2
        + dJ00 * (-fx / z**2) + dJ02 * (2 * fx * x / z**3)
        + dJ11 * (-fy / z**2) + dJ12 * (2 * fy * y / z**3)
        + g_depths
    )
    d_pcam = np.stack([gx, gy, gz], axis=1)
    d_means = d_pcam @ cam.R

    dR = np.zeros_like(pr.rot)
    dR[:, :, 0] = d_acam @ cam.R
    dR[:, :, 1] = d_bcam @ cam.R
    dR[:, :, 2] = (g_normals * pr.flip[:, None]) @ cam.R
    d_quats = _quat_backward(pr.quat_unit, np.asarray(quats, dtype=np.float64), dR)

    for arr in (d_means, d_scales, d_quats):
        arr[~pr.visible] = 0.0
    return d_means, d_scales, d_quats


def opacities_of(gaussians: GaussianSet):
    return sigmoid(gaussians.opacity_logits)
