"""Population control: clone/split, threshold-driven prune and reset, scale-band clone.

Every mutating op returns ``(new_set, src, fresh)``: row ``i`` of the new set
came from row ``src[i]`` of the old one, and ``fresh[i]`` marks rows that are
new Gaussians (their optimizer moments start at zero).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .core import GaussianSet, quat_to_rotmat, sigmoid

log = logging.getLogger(__name__)


@dataclass
class DensityControlConfig:
    grad_threshold: float = 2e-4
    densify_interval: int = 100
    densify_from: int = 100
    densify_until: int | None = None  # None -> half of the training iterations
    reset_interval: int = 3000
    split_scale_factor: float = 1.6
    percent_dense: float = 0.01
    band_center: float | None = None  # None -> the scale-loss knee
    max_screen_size: float | None = None  # pixels
    max_gaussians: int = 5000
    # fixed cutoffs of the original scheme; used only when the global neuron is off
    legacy_prune_opacity: float = 0.005
    legacy_reset_opacity: float = 0.01

    def __post_init__(self):
        if self.densify_interval <= 0 or self.reset_interval <= 0:
            raise ValueError("densify/reset intervals must be positive")

    @property
    def band_halfwidth(self):
        return None if self.band_center is None else self.band_center / 200.0


class DensityStats:
    """Running screen-space gradient norms since the last densify step."""

    def __init__(self, n, dtype=np.float32):
        self.grad_accum = np.zeros(n, dtype=dtype)
        self.counts = np.zeros(n, dtype=dtype)
        self.max_radii = np.zeros(n, dtype=dtype)

    def __len__(self):
        return self.grad_accum.shape[0]

    def update(self, screen_grad_norm, visible, radii):
        dt = self.grad_accum.dtype
        self.grad_accum[visible] = (self.grad_accum[visible] + screen_grad_norm[visible]).astype(dt)
        self.counts[visible] += 1
        self.max_radii[visible] = np.maximum(self.max_radii[visible], radii[visible]).astype(dt)

    def mean(self):
        return np.where(self.counts > 0, self.grad_accum / np.maximum(self.counts, 1), 0.0)

    def reset(self):
        self.grad_accum[:] = 0
        self.counts[:] = 0
        self.max_radii[:] = 0

    def remap(self, src, fresh):
        out = DensityStats(0, self.grad_accum.dtype)
        for name in ("grad_accum", "counts", "max_radii"):
            a = getattr(self, name)[src].copy()
            a[fresh] = 0
            setattr(out, name, a)
        return out


def _identity(n):
    return np.arange(n), np.zeros(n, bool)


def prune(gaussians: GaussianSet, opacity_cutoff, max_screen_size=None, screen_radii=None):
    """Drop Gaussians with opacity strictly below the cutoff or an oversized footprint."""
    alpha = sigmoid(gaussians.opacity_logits)
    drop = alpha < opacity_cutoff
    if max_screen_size is not None and screen_radii is not None:
        drop |= np.asarray(screen_radii) > max_screen_size
    keep = np.flatnonzero(~drop)
    if keep.size == 0 and len(gaussians):
        log.warning("prune removed every Gaussian (cutoff %.4g)", opacity_cutoff)
    return gaussians.subset(keep), keep, np.zeros(keep.size, bool)


def _ordered(x, itype):
    """Map floats to integers whose order matches the float order."""
    i = x.view(itype)
    return np.where(i < 0, np.iinfo(itype).min - i, i)


def _unordered(k, dtype, itype):
    k = np.asarray(k, dtype=itype)
    return np.where(k < 0, np.iinfo(itype).min - k, k).astype(itype).view(dtype)


def logit_at_least(v, dtype=np.float32):
    """Smallest logit in ``dtype`` whose sigmoid is >= v (so gating keeps it)."""
    v = float(v)
    if v <= 0:
        return np.array(-np.inf, dtype=dtype)
    if v > 1:
        raise ValueError(f"opacity cutoff must be <= 1, got {v}")
    dtype = np.dtype(dtype)
    itype = np.dtype(f"i{dtype.itemsize}")
    with np.errstate(divide="ignore"):
        guess = np.array(min(np.log(v) - np.log1p(-v), np.finfo(dtype).max), dtype=dtype)
    # bracket: sigmoid(lo) < v <= sigmoid(hi), then bisect on the ordered bit patterns
    lo, hi = guess, guess
    with np.errstate(over="ignore"):
        step = dtype.type(1)
        while sigmoid(hi) < v:
            hi = np.array(hi + step, dtype=dtype)
            step *= 2
        step = dtype.type(1)
        while sigmoid(lo) >= v:
            lo = np.array(lo - step, dtype=dtype)
            step *= 2
    klo, khi = int(_ordered(lo, itype)), int(_ordered(hi, itype))
    while khi - klo > 1:
        mid = (klo + khi) // 2
        if sigmoid(_unordered(mid, dtype, itype)) >= v:
            khi = mid
        else:
            klo = mid
    return np.array(_unordered(khi, dtype, itype), dtype=dtype)


def opacity_reset(gaussians: GaussianSet, opacity_cutoff):
    """Clamp every opacity down to the cutoff (opacities already below are untouched)."""
    out = gaussians.copy()
    cap = logit_at_least(opacity_cutoff, out.opacity_logits.dtype)
    out.opacity_logits = np.minimum(out.opacity_logits, cap)
    return out


def densify(gaussians: GaussianSet, mean_grads, cfg: DensityControlConfig, scene_extent, rng,
            grad_threshold=None):
    """Clone small / split large Gaussians whose mean screen gradient exceeds the trigger.

    Returns ``(new_set, src, fresh, n_cloned, n_split)``.
    """
    n = len(gaussians)
    tau = cfg.grad_threshold if grad_threshold is None else grad_threshold
    hot = np.asarray(mean_grads) > tau
    max_scale = np.max(gaussians.scales, axis=1) if n else np.zeros(0)
    small = max_scale <= cfg.percent_dense * scene_extent
    clone_idx = np.flatnonzero(hot & small)
    split_idx = np.flatnonzero(hot & ~small)

    parts = []
    src = []
    fresh = []
    keep = np.setdiff1d(np.arange(n), split_idx)
    parts.append(gaussians.subset(keep))
    src.append(keep)
    fresh.append(np.zeros(keep.size, bool))
    if clone_idx.size:
        parts.append(gaussians.subset(clone_idx))
        src.append(clone_idx)
        fresh.append(np.ones(clone_idx.size, bool))
    if split_idx.size:
        for _ in range(2):
            child = gaussians.subset(split_idx).copy()
            R = quat_to_rotmat(child.quats)
            local = rng.normal(size=(split_idx.size, 2)) * child.scales
            offset = np.einsum("nij,nj->ni", R[:, :, :2], local)
            child.means = (child.means + offset).astype(child.means.dtype)
            child.scales = (child.scales / cfg.split_scale_factor).astype(child.scales.dtype)
            parts.append(child)
            src.append(split_idx)
            fresh.append(np.ones(split_idx.size, bool))
    out = parts[0]
    for p in parts[1:]:
        out = out.concat(p)
    return out, np.concatenate(src), np.concatenate(fresh), int(clone_idx.size), int(split_idx.size)


def scale_band_members(scales, theta, delta=None, knee=None):
    """Indices whose R-mapped max in-plane scale lies in [theta - delta, theta + delta]."""
    delta = theta / 200.0 if delta is None else delta
    knee = theta if knee is None else knee
    m = np.max(np.asarray(scales, dtype=np.float64), axis=1)
    r = np.where(m < knee, 0.0, m)
    return np.flatnonzero((r >= theta - delta) & (r <= theta + delta))


def scale_based_clone(gaussians: GaussianSet, theta, delta=None, knee=None, limit=None):
    """Duplicate every Gaussian in the scale band (copies inherit all fields)."""
    members = scale_band_members(gaussians.scales, theta, delta, knee)
    if limit is not None and members.size > limit:
        log.warning("scale-based clone capped: %d candidates, room for %d", members.size, limit)
        m = np.max(gaussians.scales[members], axis=1)
        members = np.sort(members[np.argsort(np.abs(m - theta), kind="stable")[:max(limit, 0)]])
    n = len(gaussians)
    src = np.concatenate([np.arange(n), members])
    fresh = np.concatenate([np.zeros(n, bool), np.ones(members.size, bool)])
    return gaussians.subset(src), src, fresh, int(members.size)
