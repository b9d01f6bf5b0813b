"""Loss terms with hand-written gradients.

Every term returns ``(value, grad)``. Terms that act on render buffers return
their gradient as an :class:`~fifsplat.render.Upstream` so the rasterizer
adjoint can consume them directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .camera import Camera
from .render import RenderBuffers, Upstream

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass
class LossWeights:
    ssim: float = 0.2
    opacity_threshold: float = 2e-5
    local_threshold: float = 2e-5
    scale: float = 5e-4
    tv: float = 1.0
    distortion: float = 100.0
    normal: float = 0.05
    scale_knee: float | None = None  # None -> 2% of the scene bbox diagonal
    # distortion is measured on NDC-mapped depth with these planes; null -> raw z
    distortion_near: float | None = 0.2
    distortion_far: float = 100.0

    def __post_init__(self):
        for name in ("ssim", "opacity_threshold", "local_threshold", "scale", "tv",
                     "distortion", "normal"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")
        if self.scale_knee is not None and self.scale_knee <= 0:
            raise ValueError("scale_knee must be > 0")
        if self.distortion_near is not None and not 0 < self.distortion_near < self.distortion_far:
            raise ValueError("need 0 < distortion_near < distortion_far")

    @property
    def distortion_ndc(self):
        return None if self.distortion_near is None else (self.distortion_near, self.distortion_far)


# weight attribute applied to each raw term in the total; photometric is unweighted
TERM_WEIGHTS = {
    "photometric": None,
    "distortion": "distortion",
    "normal": "normal",
    "opacity_threshold": "opacity_threshold",
    "local_threshold": "local_threshold",
    "scale": "scale",
    "tv": "tv",
}


@dataclass
class LossReport:
    total: float
    terms: dict = field(default_factory=dict)

    def row(self):
        return {**self.terms, "total": self.total}


def total_loss(terms: dict, weights: LossWeights) -> LossReport:
    """Weighted sum of raw terms; unknown term names are rejected."""
    total = 0.0
    for name, value in terms.items():
        if name not in TERM_WEIGHTS:
            raise KeyError(f"unknown loss term {name!r}")
        w = TERM_WEIGHTS[name]
        total += value if w is None else getattr(weights, w) * value
    return LossReport(float(total), {k: float(v) for k, v in terms.items()})


# ---------------------------------------------------------------------------
# photometric
# ---------------------------------------------------------------------------

def gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - size // 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _blur(img, win):
    # zero-padded separable filter over the two spatial axes
    out = correlate1d(img, win, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, win, axis=1, mode="constant", cval=0.0)


def ssim(x, y, window=11, sigma=1.5, return_grad=False):
    """Mean SSIM over pixels and channels (zero-padded Gaussian window).

    With ``return_grad`` also returns dSSIM/dx.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    win = gaussian_window(window, sigma)
    mx, my = _blur(x, win), _blur(y, win)
    qx, qy, rxy = _blur(x * x, win), _blur(y * y, win), _blur(x * y, win)
    sxx, syy, sxy = qx - mx * mx, qy - my * my, rxy - mx * my
    a1 = 2 * mx * my + SSIM_C1
    a2 = 2 * sxy + SSIM_C2
    b1 = mx * mx + my * my + SSIM_C1
    b2 = sxx + syy + SSIM_C2
    smap = a1 * a2 / (b1 * b2)
    val = float(smap.mean())
    if not return_grad:
        return val
    n = smap.size
    d_mx = (2 * my * a2 / (b1 * b2) - smap * 2 * mx / b1) / n
    d_sxx = -smap / b2 / n
    d_sxy = 2 * a1 / (b1 * b2) / n
    g_m = d_mx + d_sxx * (-2 * mx) + d_sxy * (-my)
    grad = _blur(g_m, win) + 2 * x * _blur(d_sxx, win) + y * _blur(d_sxy, win)
    return val, grad


def photometric_loss(rendered, gt, lam=0.2):
    """``(1 - lam) * L1 + lam * (1 - SSIM) / 2`` and its gradient w.r.t. ``rendered``."""
    rendered = np.asarray(rendered, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if rendered.shape != gt.shape:
        raise ValueError(f"shape mismatch {rendered.shape} vs {gt.shape}")
    diff = rendered - gt
    l1 = float(np.abs(diff).mean())
    grad = (1 - lam) * np.sign(diff) / diff.size
    value = (1 - lam) * l1
    if lam > 0:
        s, ds = ssim(rendered, gt, return_grad=True)
        value += lam * (1.0 - s) / 2.0
        grad = grad - lam * ds / 2.0
    return value, grad


# ---------------------------------------------------------------------------
# geometry regularizers
# ---------------------------------------------------------------------------

def _segment_prefix(values, offsets, ent_pix):
    """Exclusive prefix sum of ``values`` within each pixel's entry segment."""
    c = np.cumsum(values) - values
    start = np.concatenate([[0.0], np.cumsum(values)])[offsets[ent_pix]]
    return c - start


def ndc_depth(t, near, far):
    """Map z-depth to [0, 1): far/(far - near) * (1 - near/t); returns (m, dm/dt)."""
    s = far / (far - near)
    return s * (1.0 - near / t), s * near / (t * t)


def depth_distortion_loss(buffers: RenderBuffers, ndc=None):
    """Mean over pixels of sum_{i != j} w_i w_j |t_i - t_j| with w = T * omega.

    ``ndc=(near, far)`` measures the spread on the mapped depth of :func:`ndc_depth`
    instead of raw z, which keeps the term scale-free.
    """
    E = buffers.n_entries
    P = buffers.offsets.shape[0] - 1
    if E == 0:
        return 0.0, Upstream(entry_weight=np.zeros(0), entry_depth=np.zeros(0))
    w = buffers.entry_blend_weights()
    t = buffers.entry_depths()
    dm = None
    if ndc is not None:
        t, dm = ndc_depth(t, *ndc)
    pix = buffers.ent_pix
    tot_w = np.bincount(pix, w, minlength=P)[pix]
    tot_wt = np.bincount(pix, w * t, minlength=P)[pix]
    a_lt = _segment_prefix(w, buffers.offsets, pix)
    b_lt = _segment_prefix(w * t, buffers.offsets, pix)
    a_gt = tot_w - a_lt - w
    b_gt = tot_wt - b_lt - w * t
    spread = t * a_lt - b_lt + b_gt - t * a_gt  # sum_j w_j |t - t_j|
    value = float(np.sum(w * spread)) / P
    g_w = 2.0 * spread / P
    g_t = 2.0 * w * (a_lt - a_gt) / P
    if dm is not None:
        g_t = g_t * dm
    return value, Upstream(entry_weight=g_w, entry_depth=g_t)


def _pixel_dirs(cam: Camera):
    xs = (np.arange(cam.width) + 0.5 - cam.cx) / cam.fx
    ys = (np.arange(cam.height) + 0.5 - cam.cy) / cam.fy
    X, Y = np.meshgrid(xs, ys)
    return np.stack([X, Y, np.ones_like(X)], axis=-1)


def depth_normals(depth, cam: Camera):
    """Camera-frame normals from central differences of a z-depth map.

    Returns ``(normals, intermediates)``; border pixels get zero normals.
    """
    dirs = _pixel_dirs(cam)
    X = dirs * depth[..., None]
    a = np.zeros_like(X)
    b = np.zeros_like(X)
    a[1:-1, 1:-1] = 0.5 * (X[1:-1, 2:] - X[1:-1, :-2])
    b[1:-1, 1:-1] = 0.5 * (X[2:, 1:-1] - X[:-2, 1:-1])
    c = np.cross(a, b)
    clen = np.linalg.norm(c, axis=-1, keepdims=True)
    chat = np.where(clen > 1e-20, c / np.maximum(clen, 1e-20), 0.0)
    return -chat, (dirs, a, b, chat, clen)


def normal_consistency_loss(buffers: RenderBuffers, cam: Camera, alpha_min=0.5):
    """Mean over valid pixels of sum_i w_i (1 - n_i . N), N from the normalized depth.

    Uses sum_i w_i (1 - n_i . N) = acc - normal_raw . N, so no per-entry pass is needed.
    """
    H, W = buffers.acc_alpha.shape
    acc = buffers.acc_alpha
    N, (dirs, a, b, chat, clen) = depth_normals(buffers.norm_depth, cam)
    valid = np.zeros((H, W), bool)
    ok = acc > alpha_min
    valid[1:-1, 1:-1] = (ok[1:-1, 1:-1] & ok[1:-1, 2:] & ok[1:-1, :-2] & ok[2:, 1:-1]
                         & ok[:-2, 1:-1] & (clen[1:-1, 1:-1, 0] > 1e-20))
    nv = int(valid.sum())
    if nv == 0:
        return 0.0, Upstream()
    nraw = buffers.normal_raw
    per_pix = acc - np.sum(nraw * N, axis=-1)
    value = float(per_pix[valid].sum()) / nv

    vm = valid[..., None].astype(np.float64)
    g_acc = valid / nv
    g_nraw = -N * vm / nv
    g_N = -nraw * vm / nv
    g_chat = -g_N
    g_c = np.where(clen > 1e-20, (g_chat - chat * np.sum(chat * g_chat, -1, keepdims=True))
                   / np.maximum(clen, 1e-20), 0.0)
    g_a = np.cross(b, g_c)
    g_b = np.cross(g_c, a)
    g_X = np.zeros_like(dirs)
    g_X[1:-1, 2:] += 0.5 * g_a[1:-1, 1:-1]
    g_X[1:-1, :-2] -= 0.5 * g_a[1:-1, 1:-1]
    g_X[2:, 1:-1] += 0.5 * g_b[1:-1, 1:-1]
    g_X[:-2, 1:-1] -= 0.5 * g_b[1:-1, 1:-1]
    g_depth = np.sum(g_X * dirs, axis=-1)
    return value, Upstream(acc_alpha=g_acc, normal_raw=g_nraw, norm_depth=g_depth)


def total_variance_loss(depth, mask=None):
    """mean |d/dx depth| + mean |d/dy depth| over neighbor pairs inside ``mask``."""
    d = np.asarray(depth, dtype=np.float64)
    m = np.ones_like(d, dtype=bool) if mask is None else np.asarray(mask, bool)
    grad = np.zeros_like(d)
    value = 0.0
    for axis in (1, 0):
        lo = [slice(None)] * 2
        hi = [slice(None)] * 2
        lo[axis] = slice(None, -1)
        hi[axis] = slice(1, None)
        lo, hi = tuple(lo), tuple(hi)
        pair = m[lo] & m[hi]
        n = int(pair.sum())
        if n == 0:
            continue
        diff = d[hi] - d[lo]
        value += float(np.abs(diff)[pair].sum()) / n
        s = np.sign(diff) * pair / n
        grad[hi] += s
        grad[lo] -= s
    return value, grad


# ---------------------------------------------------------------------------
# threshold / scale terms
# ---------------------------------------------------------------------------

def threshold_loss(v, lam):
    """``lam / v`` and its derivative. ``v`` may be an array (summed)."""
    v = np.asarray(v, dtype=np.float64)
    if np.any(v <= 0):
        raise ValueError("threshold must be positive for the threshold loss")
    value = float(np.sum(lam / v))
    grad = -lam / v**2
    return value, (float(grad) if grad.ndim == 0 else grad)


def scale_loss(scales, knee):
    """Sum over Gaussians of R(max(Sx, Sy)) with R(m) = 0 below ``knee`` else m."""
    if knee <= 0:
        raise ValueError("scale knee must be positive")
    s = np.asarray(scales, dtype=np.float64)
    grad = np.zeros_like(s)
    if s.shape[0] == 0:
        return 0.0, grad
    axis = np.argmax(s, axis=1)
    m = s[np.arange(s.shape[0]), axis]
    active = m >= knee
    grad[np.arange(s.shape[0])[active], axis[active]] = 1.0
    return float(m[active].sum()), grad
