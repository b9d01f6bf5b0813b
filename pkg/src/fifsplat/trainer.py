"""Optimization loop: init, Adam with row-aligned moments, schedules, density control."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .config import TrainConfig
from .core import LOCAL_THRESHOLD_EPS, GaussianSet, GlobalThresholds, logit
from .density import (DensityStats, densify, logit_at_least, opacity_reset, prune,
                      scale_based_clone)
from .losses import (depth_distortion_loss, normal_consistency_loss, photometric_loss,
                     scale_loss, threshold_loss, total_loss, total_variance_loss)
from .render import GradientBundle, Upstream, rasterize_backward, rasterize_forward
from .scene_io import CheckpointError, read_checkpoint, write_checkpoint

log = logging.getLogger(__name__)

BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-15
SCALE_FLOOR = 1e-7
GLOBAL_BOUNDS = (1e-4, 0.99)
# per-Gaussian optimizer groups; scales are optimized as log-scales
GROUPS = ("means", "scales", "quats", "opacity_logits", "colors", "local_thresholds")
DTYPE = np.float32


class NumericalAbort(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# state
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    gaussians: GaussianSet
    global_threshold: np.float32
    moments: dict  # group -> (m, v), rows aligned with the Gaussian set
    steps: dict  # group -> number of Adam updates applied
    iteration: int
    stats: DensityStats
    rng: np.random.Generator
    view_queue: list = field(default_factory=list)

    @property
    def thresholds(self):
        return GlobalThresholds(float(self.global_threshold))

    def remap(self, src, fresh):
        """Re-index every per-Gaussian buffer after a density event."""
        for g in GROUPS:
            m, v = self.moments[g]
            m, v = m[src].copy(), v[src].copy()
            m[fresh] = 0
            v[fresh] = 0
            self.moments[g] = (m, v)
        self.stats = self.stats.remap(src, fresh)

    def check_alignment(self):
        n = len(self.gaussians)
        for g in GROUPS:
            for a in self.moments[g]:
                if a.shape[0] != n:
                    raise AssertionError(f"moment rows for {g} ({a.shape[0]}) != population {n}")
        if len(self.stats) != n:
            raise AssertionError("density stats misaligned with population")


def _zero_moments(gs: GaussianSet):
    out = {}
    for g in GROUPS:
        shape = getattr(gs, g).shape
        out[g] = (np.zeros(shape, DTYPE), np.zeros(shape, DTYPE))
    out["global_threshold"] = (np.zeros((), DTYPE), np.zeros((), DTYPE))
    return out


def random_quats(n, rng):
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return q


def init_scene(points=None, bbox=None, n_random=0, seed=0, colors=None, init_opacity=0.1,
               global_threshold=0.005, local_threshold=0.01):
    """Gaussians from a point set (3-NN scales, random rotations) or uniform in ``bbox``."""
    rng = np.random.default_rng(seed)
    if bbox is not None:
        bbox = np.asarray(bbox, dtype=np.float64)
        if bbox.shape != (6,) or np.any(bbox[3:] <= bbox[:3]):
            raise ValueError("bbox must be (xmin, ymin, zmin, xmax, ymax, zmax) with min < max")
    if points is not None and len(points):
        pts = np.asarray(points, dtype=np.float64)
    elif n_random > 0:
        if bbox is None:
            raise ValueError("random initialization needs a bbox")
        pts = rng.uniform(bbox[:3], bbox[3:], size=(n_random, 3))
    else:
        raise ValueError("init_scene needs points or n_random > 0")
    n = pts.shape[0]
    if n >= 2:
        k = min(4, n)
        d, _ = cKDTree(pts).query(pts, k=k)
        nn = np.mean(d[:, 1:], axis=1)
    else:
        nn = np.full(n, 0.01 if bbox is None else 0.01 * np.linalg.norm(bbox[3:] - bbox[:3]))
    nn = np.maximum(nn, 1e-7)
    if colors is None or len(colors) != n:
        colors = np.full((n, 3), 0.5)
    gs = GaussianSet(
        pts, np.repeat(nn[:, None], 2, axis=1), random_quats(n, rng),
        np.full(n, logit(init_opacity)), np.clip(colors, 0, 1),
        np.full(n, local_threshold),
    ).astype(DTYPE)
    return gs, GlobalThresholds(global_threshold)


def new_state(cfg: TrainConfig, dataset):
    points = dataset.points
    gs, th = init_scene(points, dataset.bbox, cfg.n_random, cfg.seed, dataset.point_colors,
                        cfg.init_opacity, cfg.init_global_threshold, cfg.init_local_threshold)
    if not cfg.use_local_fif:
        gs.local_thresholds[:] = 0
    va = th.opacity if cfg.use_global_fif else 0.0
    return TrainState(gs, DTYPE(va), _zero_moments(gs), {g: 0 for g in (*GROUPS, "global_threshold")},
                      0, DensityStats(len(gs)), np.random.default_rng(cfg.seed + 1))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

def adam_update(param, grad, m, v, step, lr, beta1=BETA1, beta2=BETA2, eps=ADAM_EPS):
    """One bias-corrected Adam step. ``step`` is the 1-based update count.

    Arithmetic runs in float64; results are cast back to the inputs' dtypes.
    """
    p = np.asarray(param, dtype=np.float64)
    g = np.asarray(grad, dtype=np.float64)
    m1 = beta1 * np.asarray(m, dtype=np.float64) + (1 - beta1) * g
    v1 = beta2 * np.asarray(v, dtype=np.float64) + (1 - beta2) * g * g
    mhat = m1 / (1 - beta1**step)
    vhat = v1 / (1 - beta2**step)
    p1 = p - lr * mhat / (np.sqrt(vhat) + eps)
    dt = np.asarray(param).dtype
    return p1.astype(dt), m1.astype(np.asarray(m).dtype), v1.astype(np.asarray(v).dtype)


def _finite_rows(g):
    g = np.asarray(g)
    return np.isfinite(g).reshape(g.shape[0], -1).all(axis=1) if g.ndim else np.isfinite(g)


def adam_step(state: TrainState, grads: GradientBundle, lrs: dict, frozen=()):
    """Update every group in ``lrs`` (absent or frozen groups are left alone), then clamp.

    Rows with a non-finite gradient are skipped. Returns the number of skipped rows.
    """
    gs = state.gaussians
    skipped = 0
    for group in GROUPS:
        if group in frozen or group not in lrs:
            continue
        grad = np.asarray(getattr(grads, group), dtype=np.float64)
        param = getattr(gs, group)
        if group == "scales":
            grad = grad * param  # d/d log s
            param = np.log(np.maximum(param, SCALE_FLOOR)).astype(DTYPE)
        ok = _finite_rows(grad)
        if not ok.all():
            bad = int((~ok).sum())
            skipped += bad
            log.warning("skipping %d non-finite gradient rows in group %s", bad, group)
        m, v = state.moments[group]
        step = state.steps[group] + 1
        new_p, new_m, new_v = adam_update(param[ok], grad[ok], m[ok], v[ok], step, lrs[group])
        param = param.copy()
        param[ok], m[ok], v[ok] = new_p, new_m, new_v
        state.steps[group] = step
        if group == "scales":
            param = np.maximum(np.exp(param.astype(np.float64)), SCALE_FLOOR).astype(DTYPE)
        setattr(gs, group, param)
    if "global_threshold" in lrs and "global_threshold" not in frozen:
        g = float(grads.global_threshold)
        if math.isfinite(g):
            m, v = state.moments["global_threshold"]
            step = state.steps["global_threshold"] + 1
            p, m, v = adam_update(np.asarray(state.global_threshold, DTYPE), np.float64(g), m, v,
                                  step, lrs["global_threshold"])
            state.moments["global_threshold"] = (np.asarray(m, DTYPE), np.asarray(v, DTYPE))
            state.steps["global_threshold"] = step
            state.global_threshold = DTYPE(np.clip(p, *GLOBAL_BOUNDS))
        else:
            skipped += 1
            log.warning("skipping non-finite global threshold gradient")
    clamp_state(state, frozen)
    return skipped


def clamp_state(state: TrainState, frozen=()):
    gs = state.gaussians
    q = gs.quats.astype(np.float64)
    gs.quats = (q / np.linalg.norm(q, axis=1, keepdims=True)).astype(DTYPE)
    gs.colors = np.clip(gs.colors, 0, 1).astype(DTYPE)
    gs.scales = np.maximum(gs.scales, SCALE_FLOOR).astype(DTYPE)
    if "local_thresholds" not in frozen:
        hi = np.nextafter(DTYPE(1 - LOCAL_THRESHOLD_EPS), DTYPE(0))
        gs.local_thresholds = np.clip(gs.local_thresholds, 0, hi).astype(DTYPE)
    # opacity lives in logit space, so alpha in [0, 1] holds by construction


# ---------------------------------------------------------------------------
# one iteration
# ---------------------------------------------------------------------------

def position_lr(cfg: TrainConfig, it, extent):
    t = min(max(it / max(cfg.iterations - 1, 1), 0.0), 1.0)
    a, b = cfg.lr.means, cfg.lr.means_final
    if a <= 0 or b <= 0:
        return a * extent
    return math.exp(math.log(a) * (1 - t) + math.log(b) * t) * extent


def scene_extent(dataset):
    return 0.5 * dataset.diagonal


def scale_knee(cfg: TrainConfig, dataset):
    return cfg.loss.scale_knee if cfg.loss.scale_knee is not None else 0.02 * dataset.diagonal


def compute_gradients(state: TrainState, cfg: TrainConfig, dataset, view, it):
    """Render one view, evaluate every loss term and backpropagate.

    Returns ``(report, grads, buffers)``; gradients are with respect to the stored parameters.
    """
    cam = dataset.cameras[view]
    gt = dataset.images[view]
    g64 = state.gaussians.astype(np.float64)
    th = state.thresholds
    use_fif = cfg.use_global_fif or cfg.use_local_fif
    buf = rasterize_forward(g64, th, cam, cfg.background, use_fif=use_fif, backend=cfg.backend)
    w = cfg.loss
    terms = {}
    lc, g_img = photometric_loss(buf.color, gt, w.ssim)
    terms["photometric"] = lc
    up = Upstream(color=g_img)

    geometry_on = it >= cfg.geometry_warmup * cfg.iterations
    if geometry_on and w.distortion > 0:
        ld, u = depth_distortion_loss(buf, w.distortion_ndc)
        terms["distortion"] = ld
        up = up + Upstream(entry_weight=w.distortion * u.entry_weight,
                           entry_depth=w.distortion * u.entry_depth)
    if geometry_on and w.normal > 0:
        ln, u = normal_consistency_loss(buf, cam)
        terms["normal"] = ln
        up = up + _scale_upstream(u, w.normal)
    if w.tv > 0:
        lt, g_tv = total_variance_loss(buf.norm_depth, buf.acc_alpha > 0.5)
        terms["tv"] = lt
        up = up + Upstream(norm_depth=w.tv * g_tv)

    grads = rasterize_backward(g64, th, cam, buf, up, cfg.surrogate, backend=cfg.backend)

    knee = scale_knee(cfg, dataset)
    ls, g_s = scale_loss(g64.scales, knee)
    terms["scale"] = ls
    grads.scales = grads.scales + w.scale * g_s

    if cfg.use_global_fif:
        la, g_a = threshold_loss(max(float(state.global_threshold), GLOBAL_BOUNDS[0]), 1.0)
        terms["opacity_threshold"] = la
        grads.global_threshold += w.opacity_threshold * g_a
    else:
        grads.global_threshold = 0.0
    if cfg.use_local_fif:
        vp = np.maximum(g64.local_thresholds, LOCAL_THRESHOLD_EPS)
        lp, g_p = threshold_loss(vp, 1.0)
        terms["local_threshold"] = lp
        grads.local_thresholds = grads.local_thresholds + w.local_threshold * g_p
    else:
        grads.local_thresholds = np.zeros_like(grads.local_thresholds)
    report = total_loss(terms, w)
    return report, grads, buf


def _scale_upstream(u: Upstream, s):
    out = Upstream()
    for f in u.__dataclass_fields__:
        a = getattr(u, f)
        setattr(out, f, None if a is None else s * a)
    return out


def next_view(state: TrainState, dataset):
    if not state.view_queue:
        train_views = dataset.indices("train")
        if len(train_views) < 2:
            raise ValueError("training needs at least two training views")
        state.view_queue = [int(train_views[i]) for i in state.rng.permutation(len(train_views))]
    return state.view_queue.pop(0)


def current_lrs(cfg: TrainConfig, state: TrainState, dataset, it):
    lrs = {
        "means": position_lr(cfg, it, scene_extent(dataset)),
        "scales": cfg.lr.scales,
        "quats": cfg.lr.quats,
        "opacity_logits": cfg.lr.opacity,
        "colors": cfg.lr.colors,
    }
    if it >= cfg.threshold_warmup:
        if cfg.use_local_fif:
            lrs["local_thresholds"] = cfg.lr.local_threshold
        if cfg.use_global_fif:
            lrs["global_threshold"] = cfg.lr.global_threshold
    return lrs


# ---------------------------------------------------------------------------
# density control
# ---------------------------------------------------------------------------

def prune_cutoff(cfg: TrainConfig, state: TrainState):
    return float(state.global_threshold) if cfg.use_global_fif else cfg.density.legacy_prune_opacity


def reset_cutoff(cfg: TrainConfig, state: TrainState):
    return float(state.global_threshold) if cfg.use_global_fif else cfg.density.legacy_reset_opacity


def density_step(state: TrainState, cfg: TrainConfig, dataset, it):
    """Densify / scale-clone (until ``densify_until``), then prune. Returns the event row."""
    dc = cfg.density
    event = {"iteration": it, "pruned": 0, "cloned": 0, "split": 0, "scale_cloned": 0}
    n0 = len(state.gaussians)
    if it <= cfg.densify_until:
        grads = state.stats.mean()
        tau = dc.grad_threshold
        extent = scene_extent(dataset)
        while True:
            hot = grads > tau
            growth = int(hot.sum())  # clone: +1, split: 2 children - 1 parent
            if n0 + growth <= dc.max_gaussians:
                break
            tau *= 2.0
            log.warning("population cap %d: escalating densify threshold to %.3g", dc.max_gaussians, tau)
        gs, src, fresh, nc, ns = densify(state.gaussians, grads, dc, extent, state.rng, tau)
        state.gaussians = gs
        state.remap(src, fresh)
        event["cloned"], event["split"] = nc, ns
        knee = scale_knee(cfg, dataset)
        theta = dc.band_center if dc.band_center is not None else knee
        room = dc.max_gaussians - len(state.gaussians)
        gs, src, fresh, nsc = scale_based_clone(state.gaussians, theta, theta / 200.0, knee, room)
        state.gaussians = gs
        state.remap(src, fresh)
        event["scale_cloned"] = nsc
    radii = state.stats.max_radii if dc.max_screen_size is not None else None
    n1 = len(state.gaussians)
    gs, keep, fresh = prune(state.gaussians, prune_cutoff(cfg, state), dc.max_screen_size, radii)
    state.gaussians = gs
    state.remap(keep, fresh)
    event["pruned"] = n1 - len(gs)
    state.stats.reset()
    event["population"] = len(state.gaussians)
    event["global_threshold"] = float(state.global_threshold)
    return event


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_state(path, state: TrainState, cfg: TrainConfig, extra=None):
    arrays = {}
    for name, a in state.gaussians.arrays().items():
        arrays[f"param.{name}"] = a
    for g, (m, v) in state.moments.items():
        arrays[f"adam_m.{g}"] = m
        arrays[f"adam_v.{g}"] = v
    arrays["global_threshold"] = np.asarray(state.global_threshold, DTYPE)
    arrays["stats.grad_accum"] = state.stats.grad_accum
    arrays["stats.counts"] = state.stats.counts
    arrays["stats.max_radii"] = state.stats.max_radii
    meta = {
        "n_gaussians": len(state.gaussians),
        "iteration": state.iteration,
        "steps": state.steps,
        "rng": state.rng.bit_generator.state,
        "view_queue": state.view_queue,
        "config": cfg.to_dict(),
    }
    if extra:
        meta.update(extra)
    write_checkpoint(path, arrays, meta)


def load_state(path):
    """Returns ``(TrainState, meta)``."""
    arrays, meta = read_checkpoint(path)
    try:
        gs = GaussianSet(*(arrays[f"param.{f}"] for f in GaussianSet.FIELDS))
        moments = {g: (arrays[f"adam_m.{g}"], arrays[f"adam_v.{g}"])
                   for g in (*GROUPS, "global_threshold")}
        stats = DensityStats(0)
        stats.grad_accum = arrays["stats.grad_accum"]
        stats.counts = arrays["stats.counts"]
        stats.max_radii = arrays["stats.max_radii"]
        rng = np.random.default_rng()
        rng.bit_generator.state = meta["rng"]
        state = TrainState(gs, DTYPE(arrays["global_threshold"]), moments, dict(meta["steps"]),
                           int(meta["iteration"]), stats, rng, list(meta["view_queue"]))
    except KeyError as e:
        raise CheckpointError(f"{path}: missing checkpoint field {e}") from e
    state.check_alignment()
    return state, meta


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------

LOG_TERMS = ("photometric", "distortion", "normal", "opacity_threshold", "local_threshold",
             "scale", "tv")
DENSITY_FIELDS = ("iteration", "pruned", "cloned", "split", "scale_cloned", "population",
                  "global_threshold")


@dataclass
class TrainResult:
    state: TrainState
    loss_log: list
    density_log: list
    initial_photometric: float
    final_photometric: float


def _open_csv(path, fields, append):
    if path is None:
        return None, None
    f = open(path, "a" if append else "w", newline="")
    w = csv.DictWriter(f, fieldnames=fields)
    if not append or f.tell() == 0:
        w.writeheader()
    return f, w


def train(cfg: TrainConfig, dataset, out_dir=None, state: TrainState = None, stop_at=None,
          progress=None):
    """Run (or resume) training. ``stop_at`` ends early at that iteration count."""
    resumed = state is not None
    if state is None:
        state = new_state(cfg, dataset)
    end = cfg.iterations if stop_at is None else min(stop_at, cfg.iterations)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    loss_f, loss_w = _open_csv(out / "loss_log.csv" if out else None,
                               ("iteration", "view", *LOG_TERMS, "total", "n_gaussians",
                                "global_threshold", "mean_local_threshold"), resumed)
    dens_f, dens_w = _open_csv(out / "density_log.csv" if out else None, DENSITY_FIELDS, resumed)
    ckpt = out / "checkpoint.spkg" if out else None
    loss_log, density_log = [], []
    first = last = None
    frozen = set()
    if not cfg.use_local_fif:
        frozen.add("local_thresholds")
    try:
        while state.iteration < end:
            it = state.iteration
            view = next_view(state, dataset)
            report, grads, buf = compute_gradients(state, cfg, dataset, view, it)
            if not math.isfinite(report.total):
                if ckpt and not (cfg.checkpoint_every and ckpt.exists()):
                    save_state(ckpt, state, cfg)  # parameters are still the last good ones
                raise NumericalAbort(f"loss became non-finite at iteration {it}")
            lrs = current_lrs(cfg, state, dataset, it)
            adam_step(state, grads, lrs, frozen)
            if not cfg.use_global_fif:
                state.global_threshold = DTYPE(0)
            state.stats.update(grads.screen_grad_norm, grads.visible, buf.proj.radii)
            state.iteration = it + 1
            row = {"iteration": it, "view": view, **{t: report.terms.get(t, 0.0) for t in LOG_TERMS},
                   "total": report.total, "n_gaussians": len(state.gaussians),
                   "global_threshold": float(state.global_threshold),
                   "mean_local_threshold": float(np.mean(state.gaussians.local_thresholds))
                   if len(state.gaussians) else 0.0}
            loss_log.append(row)
            if loss_w:
                loss_w.writerow(row)
            first = report.terms["photometric"] if first is None else first
            last = report.terms["photometric"]

            n_it = state.iteration
            dc = cfg.density
            if n_it >= dc.densify_from and n_it % dc.densify_interval == 0 and n_it < cfg.iterations:
                ev = density_step(state, cfg, dataset, n_it)
                density_log.append(ev)
                if dens_w:
                    dens_w.writerow(ev)
                log.info("density @%d: %s", n_it, ev)
            if n_it % dc.reset_interval == 0 and n_it <= cfg.densify_until:
                state.gaussians = opacity_reset(state.gaussians, reset_cutoff(cfg, state))
            if n_it == cfg.iterations:
                # closing prune so the stored population respects the final cutoff
                n_before = len(state.gaussians)
                gs, keep, fresh = prune(state.gaussians, prune_cutoff(cfg, state))
                state.gaussians = gs
                state.remap(keep, fresh)
                ev = {"iteration": n_it, "pruned": n_before - len(gs), "cloned": 0, "split": 0,
                      "scale_cloned": 0, "population": len(gs),
                      "global_threshold": float(state.global_threshold)}
                density_log.append(ev)
                if dens_w:
                    dens_w.writerow(ev)
            if progress is not None and (n_it % max(cfg.log_every, 1) == 0 or n_it == end):
                progress(n_it, report, state)
            if ckpt and cfg.checkpoint_every and n_it % cfg.checkpoint_every == 0:
                save_state(ckpt, state, cfg)
    finally:
        for f in (loss_f, dens_f):
            if f:
                f.close()
    if ckpt:
        save_state(ckpt, state, cfg)
    return TrainResult(state, loss_log, density_log,
                       float("nan") if first is None else first,
                       float("nan") if last is None else last)


def evaluate_photometric(state: TrainState, cfg: TrainConfig, dataset, views=None):
    """Mean photometric loss over ``views`` (default: training views) at the current state."""
    views = dataset.indices("train") if views is None else views
    g64 = state.gaussians.astype(np.float64)
    use_fif = cfg.use_global_fif or cfg.use_local_fif
    vals = []
    for v in views:
        buf = rasterize_forward(g64, state.thresholds, dataset.cameras[v], cfg.background,
                                use_fif=use_fif, backend=cfg.backend)
        vals.append(photometric_loss(buf.color, dataset.images[v], cfg.loss.ssim)[0])
    return float(np.mean(vals))


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, default=float))
