"""Low-opacity-part statistics: LOG/LOT counts, depth bias, per-ray blend profiles."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import GaussianSet, GlobalThresholds, sigmoid
from .render import rasterize_forward


@dataclass
class LopReport:
    n_gaussians: int
    n_logs: int
    log_proportion: float
    mean_lots_per_view: float
    lots_per_view: list = field(default_factory=list)
    opacity_cutoff: float = 0.1
    value_cutoff: float = 0.1

    def to_dict(self):
        return asdict(self)


def count_logs(gaussians: GaussianSet, opacity_cutoff=0.1):
    """(count, proportion) of Gaussians with opacity strictly below the cutoff."""
    if not 0 < opacity_cutoff <= 1:
        raise ValueError("opacity cutoff must lie in (0, 1]")
    n = len(gaussians)
    if n == 0:
        return 0, 0.0
    c = int(np.sum(sigmoid(gaussians.opacity_logits) < opacity_cutoff))
    return c, c / n


def lots_in_buffers(buffers, value_cutoff=0.1):
    """Blended entries (omega > 0) whose projected Gaussian value is below the cutoff."""
    return int(np.sum((buffers.ent_w > 0) & (buffers.ent_g < value_cutoff)))


def count_lots(gaussians: GaussianSet, thresholds: GlobalThresholds, cameras, value_cutoff=0.1,
               background=(0.0, 0.0, 0.0), use_fif=True, backend=None):
    """Mean over views of the per-view LOT count; also returns the per-view list."""
    if not 0 < value_cutoff < 1:
        raise ValueError("value cutoff must lie in (0, 1)")
    per_view = []
    for cam in cameras:
        buf = rasterize_forward(gaussians, thresholds, cam, background, use_fif=use_fif,
                                backend=backend)
        per_view.append(lots_in_buffers(buf, value_cutoff))
    return (float(np.mean(per_view)) if per_view else 0.0), per_view


def lop_report(gaussians, thresholds, cameras, opacity_cutoff=0.1, value_cutoff=0.1, **kw):
    n_logs, prop = count_logs(gaussians, opacity_cutoff)
    mean_lots, per_view = count_lots(gaussians, thresholds, cameras, value_cutoff, **kw)
    return LopReport(len(gaussians), n_logs, prop, mean_lots, per_view, opacity_cutoff, value_cutoff)


def depth_bias(depth, gt, valid=None):
    """(mean |d - gt|, max |d - gt|, per-pixel map) over valid pixels (default: gt > 0)."""
    depth = np.asarray(depth, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if depth.shape != gt.shape:
        raise ValueError(f"shape mismatch {depth.shape} vs {gt.shape}")
    valid = gt > 0 if valid is None else np.asarray(valid, bool)
    if not valid.any():
        raise ValueError("no valid pixels for depth bias")
    err = np.where(valid, np.abs(depth - gt), 0.0)
    return float(err[valid].mean()), float(err[valid].max()), err


def buffer_depth_bias(buffers, gt, valid=None):
    """Bias of both the raw blended depth and the alpha-normalized depth."""
    raw = depth_bias(buffers.raw_depth, gt, valid)
    norm = depth_bias(buffers.norm_depth, gt, valid)
    return {"raw": {"mean": raw[0], "max": raw[1]}, "normalized": {"mean": norm[0], "max": norm[1]}}


PROFILE_FIELDS = ("view", "x", "y", "t", "omega", "T", "gaussian")


def ray_profile_rows(gaussians, thresholds, cameras, pixels, background=(0.0, 0.0, 0.0),
                     backend=None):
    rows = []
    for v, cam in enumerate(cameras):
        if len(gaussians) == 0:
            continue
        buf = rasterize_forward(gaussians, thresholds, cam, background, backend=backend)
        depths = buf.proj.depths
        for x, y in pixels:
            if not (0 <= x < cam.width and 0 <= y < cam.height):
                raise ValueError(f"pixel {(x, y)} outside view {v}")
            a, b = buf.entry_range(x, y)
            for e in range(a, b):
                rows.append({"view": v, "x": x, "y": y, "t": float(depths[buf.ent_splat[e]]),
                             "omega": float(buf.ent_w[e]), "T": float(buf.ent_t[e]),
                             "gaussian": int(buf.ent_splat[e])})
    return rows


def export_ray_profiles(path, gaussians, thresholds, cameras, pixels, background=(0.0, 0.0, 0.0),
                        backend=None):
    """Write one CSV row per blended entry at each requested pixel of each view."""
    rows = ray_profile_rows(gaussians, thresholds, cameras, pixels, background, backend)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=PROFILE_FIELDS)
        w.writeheader()
        w.writerows(rows)
    return len(rows)


def recomposite(rows, colors, background=(0.0, 0.0, 0.0)):
    """Re-blend profile rows for one pixel: (color, raw depth, acc alpha)."""
    c = np.zeros(3)
    d = 0.0
    T = 1.0
    for r in rows:
        w = r["T"] * r["omega"]
        c += w * np.asarray(colors[r["gaussian"]], dtype=np.float64)
        d += w * r["t"]
        T = r["T"] * (1 - r["omega"])
    return c + T * np.asarray(background, dtype=np.float64), d, 1 - T
