"""Forward blending with both FIF gates, and its analytic adjoint."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import _raster_numpy
from ._accel import use_numba
from .camera import Camera
from .core import GaussianSet, GlobalThresholds, SurrogateConfig, sigmoid
from .projection import SUPPORT_FLOOR, Projection, project, project_backward

log = logging.getLogger(__name__)

T_MIN = 1e-4
DEPTH_EPS = 1e-6


def _kernels(backend):
    if use_numba(backend):
        from . import _raster_numba

        return _raster_numba
    return _raster_numpy


@dataclass
class RenderBuffers:
    color: np.ndarray  # (h, w, 3)
    raw_depth: np.ndarray  # (h, w) blended depth, not divided by alpha
    norm_depth: np.ndarray  # (h, w) raw_depth / acc_alpha
    normal: np.ndarray  # (h, w, 3) renormalized, camera frame
    normal_raw: np.ndarray  # (h, w, 3) blended, not renormalized
    acc_alpha: np.ndarray  # (h, w)
    # flat contributor lists, pixel-major, front-to-back within a pixel
    offsets: np.ndarray
    ent_splat: np.ndarray
    ent_pix: np.ndarray
    ent_g: np.ndarray  # projected Gaussian value before the local gate
    ent_w: np.ndarray  # omega after both gates
    ent_t: np.ndarray  # transmittance in front of the entry
    # forward context kept for the backward pass
    proj: Projection = field(repr=False, default=None)
    alphas: np.ndarray = field(repr=False, default=None)
    global_threshold: float = 0.0
    use_fif: bool = True
    background: np.ndarray = field(repr=False, default=None)
    n_gaussians: int = 0
    width: int = 0
    height: int = 0

    @property
    def n_entries(self):
        return self.ent_splat.shape[0]

    def entry_range(self, x, y):
        p = y * self.width + x
        return self.offsets[p], self.offsets[p + 1]

    def contributors(self, x, y):
        """Ordered (splat index, omega, T) triples blended at pixel (x, y)."""
        a, b = self.entry_range(x, y)
        return [(int(self.ent_splat[e]), float(self.ent_w[e]), float(self.ent_t[e])) for e in range(a, b)]

    def entry_depths(self):
        return self.proj.depths[self.ent_splat]

    def entry_blend_weights(self):
        """T * omega for every entry."""
        return self.ent_t * self.ent_w


@dataclass
class GradientBundle:
    means: np.ndarray
    scales: np.ndarray
    quats: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    local_thresholds: np.ndarray
    global_threshold: float
    screen_grad_norm: np.ndarray  # |dL/d mean2d| in NDC units, per Gaussian
    visible: np.ndarray

    PARAMS = ("means", "scales", "quats", "opacity_logits", "colors", "local_thresholds")

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros((n, 3)), np.zeros((n, 2)), np.zeros((n, 4)), np.zeros(n),
                   np.zeros((n, 3)), np.zeros(n), 0.0, np.zeros(n), np.zeros(n, bool))

    def add_(self, other: "GradientBundle"):
        for name in self.PARAMS:
            getattr(self, name)[...] += getattr(other, name)
        self.global_threshold += other.global_threshold
        return self

    def is_finite(self):
        return all(np.all(np.isfinite(getattr(self, n))) for n in self.PARAMS) and np.isfinite(
            self.global_threshold)


def _sorted_visible(proj: Projection):
    vis = np.flatnonzero(proj.visible)
    order = vis[np.argsort(proj.depths[vis], kind="stable")]
    return order.astype(np.int64)


def rasterize_forward(gaussians: GaussianSet, thresholds: GlobalThresholds, cam: Camera,
                      background=(0.0, 0.0, 0.0), use_fif=True, backend=None) -> RenderBuffers:
    """Project, depth-sort and blend. ``use_fif=False`` is the ungated reference path."""
    W, H = cam.width, cam.height
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    proj = project(gaussians, cam)
    alphas = sigmoid(gaussians.opacity_logits)
    vp = np.asarray(gaussians.local_thresholds, dtype=np.float64)
    colors = np.asarray(gaussians.colors, dtype=np.float64)
    order = _sorted_visible(proj)
    va = float(thresholds.opacity)

    k = _kernels(backend)
    (offsets, color, depth, acc, nraw, ent_splat, ent_pix, ent_g, ent_w, ent_t) = k.forward(
        proj.means2d, proj.conics, alphas, va, vp, proj.radii, order, colors,
        proj.depths, proj.normals, bg, W, H, bool(use_fif), SUPPORT_FLOOR)

    norm_depth = depth / np.maximum(acc, DEPTH_EPS)
    nlen = np.linalg.norm(nraw, axis=-1, keepdims=True)
    normal = np.where(nlen > 1e-12, nraw / np.maximum(nlen, 1e-12), 0.0)
    return RenderBuffers(
        color=color, raw_depth=depth, norm_depth=norm_depth, normal=normal, normal_raw=nraw,
        acc_alpha=acc, offsets=offsets, ent_splat=ent_splat, ent_pix=ent_pix, ent_g=ent_g,
        ent_w=ent_w, ent_t=ent_t, proj=proj, alphas=alphas, global_threshold=va,
        use_fif=bool(use_fif), background=bg, n_gaussians=len(gaussians), width=W, height=H,
    )


@dataclass
class Upstream:
    """dL/d(buffer) for every buffer a loss can touch. Missing entries are zero."""

    color: np.ndarray = None
    raw_depth: np.ndarray = None
    norm_depth: np.ndarray = None
    acc_alpha: np.ndarray = None
    normal: np.ndarray = None
    normal_raw: np.ndarray = None
    entry_weight: np.ndarray = None  # dL/d(T*omega) per entry
    entry_depth: np.ndarray = None  # dL/dt per entry

    def __add__(self, other):
        out = Upstream()
        for f in self.__dataclass_fields__:
            a, b = getattr(self, f), getattr(other, f)
            setattr(out, f, a if b is None else (b if a is None else a + b))
        return out


def _z(a, shape):
    return np.zeros(shape) if a is None else np.asarray(a, dtype=np.float64)


def rasterize_backward(gaussians: GaussianSet, thresholds: GlobalThresholds, cam: Camera,
                       buffers: RenderBuffers, upstream: Upstream,
                       surrogate: SurrogateConfig = SurrogateConfig(), backend=None) -> GradientBundle:
    W, H = cam.width, cam.height
    N = len(gaussians)
    if buffers.n_gaussians != N or (buffers.width, buffers.height) != (W, H):
        raise ValueError("render buffers do not match this scene/camera")
    if abs(buffers.global_threshold - float(thresholds.opacity)) > 0:
        raise ValueError("render buffers were produced with a different global threshold")
    P = W * H
    E = buffers.n_entries

    g_color = _z(upstream.color, (H, W, 3)).reshape(P, 3)
    g_raw = _z(upstream.raw_depth, (H, W)).copy()
    g_acc = _z(upstream.acc_alpha, (H, W)).copy()
    g_nraw = _z(upstream.normal_raw, (H, W, 3)).copy()
    if upstream.norm_depth is not None:
        gnd = np.asarray(upstream.norm_depth, dtype=np.float64)
        a = buffers.acc_alpha
        live = a > DEPTH_EPS
        den = np.maximum(a, DEPTH_EPS)
        g_raw += gnd / den
        g_acc += np.where(live, -gnd * buffers.raw_depth / den**2, 0.0)
    if upstream.normal is not None:
        gn = np.asarray(upstream.normal, dtype=np.float64)
        nlen = np.linalg.norm(buffers.normal_raw, axis=-1, keepdims=True)
        n = buffers.normal
        proj_g = gn - n * np.sum(n * gn, axis=-1, keepdims=True)
        g_nraw += np.where(nlen > 1e-12, proj_g / np.maximum(nlen, 1e-12), 0.0)
    g_went = _z(upstream.entry_weight, (E,))
    g_tent = _z(upstream.entry_depth, (E,))

    pr = buffers.proj
    vp = np.asarray(gaussians.local_thresholds, dtype=np.float64)
    colors = np.asarray(gaussians.colors, dtype=np.float64)
    va = float(thresholds.opacity)
    k = _kernels(backend)
    g_mean2d, g_conic, g_col, g_dep, g_nrm, g_ahat, g_vp = k.backward(
        buffers.offsets, buffers.ent_splat, buffers.ent_pix, buffers.ent_g, buffers.ent_w,
        buffers.ent_t, pr.means2d, pr.conics, buffers.alphas, va, vp, colors, pr.depths,
        pr.normals, buffers.background, W, g_color, g_raw.reshape(P), g_acc.reshape(P),
        g_nraw.reshape(P, 3), g_went, g_tent, buffers.use_fif, surrogate.k, surrogate.lam)

    alphas = buffers.alphas
    if buffers.use_fif:
        win = surrogate.lam * alphas * np.maximum(
            0.0, (surrogate.k - np.abs(alphas - va)) / surrogate.k**2)
        g_va = float(np.sum(g_ahat * win))
        g_alpha = np.where(alphas >= va, g_ahat, 0.0)
    else:
        g_va = 0.0
        g_alpha = g_ahat
    g_logit = g_alpha * alphas * (1.0 - alphas)

    d_means, d_scales, d_quats = project_backward(pr, cam, gaussians.quats, g_mean2d, g_conic,
                                                  g_dep, g_nrm)
    screen = np.hypot(g_mean2d[:, 0] * 0.5 * W, g_mean2d[:, 1] * 0.5 * H)
    bundle = GradientBundle(d_means, d_scales, d_quats, g_logit, g_col, g_vp, g_va, screen,
                            pr.visible.copy())
    if not bundle.is_finite():
        log.warning("non-finite gradient produced by rasterize_backward")
    return bundle


def render_ray_profile(gaussians: GaussianSet, thresholds: GlobalThresholds, cam: Camera, pixel,
                       background=(0.0, 0.0, 0.0), buffers: RenderBuffers = None, backend=None):
    """The (t, omega, T, index) sequence blended at ``pixel`` (x, y), front to back."""
    x, y = pixel
    if not (0 <= x < cam.width and 0 <= y < cam.height):
        raise ValueError(f"pixel {pixel} outside {cam.width}x{cam.height} image")
    if buffers is None:
        buffers = rasterize_forward(gaussians, thresholds, cam, background, backend=backend)
    a, b = buffers.entry_range(x, y)
    depths = buffers.proj.depths
    return [
        (float(depths[buffers.ent_splat[e]]), float(buffers.ent_w[e]), float(buffers.ent_t[e]),
         int(buffers.ent_splat[e]))
        for e in range(a, b)
    ]
