"""``fifsplat`` command line: gen-scene, train, extract, diagnose, eval, render."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .config import ConfigError, TrainConfig, apply_overrides, load_config
from .scene_io import CheckpointError, DatasetError

log = logging.getLogger("fifsplat")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
PRESETS = ("plane", "plane_sphere")


class UsageError(Exception):
    pass


def _write_manifest(out: Path, command, args, extra=None):
    """Effective run record; ``config`` can be fed back through ``--config``."""
    record = {"command": command, "argv": sys.argv[1:], "version": __version__,
              "time": time.strftime("%Y-%m-%dT%H:%M:%S")}
    record.update({k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
                   if k not in ("func",)})
    if extra:
        record.update(extra)
    (out / "run_manifest.yaml").write_text(yaml.safe_dump(record, sort_keys=False))


def _load_checkpoint(path):
    from .trainer import load_state

    p = Path(path)
    if not p.exists():
        raise UsageError(f"checkpoint not found: {p}")
    state, meta = load_state(p)
    cfg = TrainConfig.from_dict(meta.get("config", {}))
    return state, cfg


def _load_data(path):
    from .scene_io import load_dataset

    if path is None:
        raise UsageError("--data is required")
    return load_dataset(path)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_scene(args):
    from .scene_io import save_dataset
    from .synthetic import SyntheticSpec, generate_synthetic, plane_spec, plane_sphere_spec

    if args.spec is None and args.preset is None:
        raise UsageError("gen-scene needs --spec FILE or --preset {plane,plane_sphere}")
    if args.spec is not None:
        p = Path(args.spec)
        if not p.exists():
            raise UsageError(f"spec file not found: {p}")
        try:
            raw = yaml.safe_load(p.read_text())
        except yaml.YAMLError as e:
            raise ConfigError(f"{p}: malformed spec ({e})") from e
        if not isinstance(raw, dict):
            raise ConfigError(f"{p}: spec must be a mapping")
        raw = apply_overrides(raw, args.set)
        try:
            spec = SyntheticSpec.from_dict(raw)
        except TypeError as e:
            raise ConfigError(f"{p}: {e}") from e
    else:
        spec = plane_sphere_spec() if args.preset == "plane_sphere" else plane_spec()
        spec = SyntheticSpec.from_dict(apply_overrides(spec.to_dict(), args.set))
    try:
        ds = generate_synthetic(spec, seed=args.seed)
    except (ValueError, KeyError) as e:
        raise ConfigError(f"invalid scene spec: {e}") from e
    out = Path(args.out)
    save_dataset(ds, out)
    _write_manifest(out, "gen-scene", args, {"spec": spec.to_dict()})
    w, h = spec.resolution
    print(f"wrote {len(ds)} views ({len(ds.indices('train'))} train, {len(ds.indices('test'))} test) "
          f"at {w}x{h}, {len(spec.primitives)} primitive(s) -> {out}")
    return EXIT_OK


def cmd_train(args):
    from .trainer import NumericalAbort, load_state, train

    ds = _load_data(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    state = None
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.disable_global_fif:
        overrides.append("use_global_fif=false")
    if args.disable_local_fif:
        overrides.append("use_local_fif=false")
    if args.resume:
        ck = Path(args.resume) if args.resume != "auto" else out / "checkpoint.spkg"
        if not ck.exists():
            raise UsageError(f"cannot resume: checkpoint not found: {ck}")
        state, meta = load_state(ck)
        base = meta.get("config", {})
        if args.config:
            base = yaml.safe_load(Path(args.config).read_text()) or {}
            base = base.get("config", base)
        cfg = TrainConfig.from_dict(apply_overrides(base, overrides))
        print(f"resuming from {ck} at iteration {state.iteration}")
    else:
        cfg = load_config(args.config, overrides)
    _write_manifest(out, "train", args, {"config": cfg.to_dict()})

    def progress(it, report, st):
        print(f"[{it:6d}] loss {report.total:.5f} photometric {report.terms['photometric']:.5f} "
              f"#G {len(st.gaussians)} V_alpha {float(st.global_threshold):.4f}", flush=True)

    t0 = time.time()
    try:
        res = train(cfg, ds, out_dir=out, state=state, progress=progress if args.verbose >= 0 else None)
    except NumericalAbort as e:
        print(f"numerical abort: {e}; last good checkpoint kept in {out}", file=sys.stderr)
        return EXIT_NUMERIC
    st = res.state
    summary = {
        "iterations": st.iteration,
        "n_gaussians": len(st.gaussians),
        "global_threshold": float(st.global_threshold),
        "mean_local_threshold": float(np.mean(st.gaussians.local_thresholds)) if len(st.gaussians) else 0.0,
        "initial_photometric": res.initial_photometric,
        "final_photometric": res.final_photometric,
        "seconds": time.time() - t0,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    print(f"done: {summary['n_gaussians']} Gaussians, V_alpha {summary['global_threshold']:.4f}, "
          f"checkpoint {out / 'checkpoint.spkg'}")
    return EXIT_OK


def _render_views(state, cfg, ds, views):
    from .render import rasterize_forward

    g = state.gaussians.astype(np.float64)
    use_fif = cfg.use_global_fif or cfg.use_local_fif
    for v in views:
        yield v, rasterize_forward(g, state.thresholds, ds.cameras[v], cfg.background,
                                   use_fif=use_fif, backend=cfg.backend)


def cmd_extract(args):
    from .mesh import TsdfVolume, marching_cubes, tsdf_fuse, write_ply

    state, cfg = _load_checkpoint(args.checkpoint)
    ds = _load_data(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vol = TsdfVolume.for_bbox(ds.bbox, resolution=args.resolution, voxel_size=args.voxel_size,
                              truncation_voxels=args.truncation_voxels)
    views = ds.indices("train")
    depths, masks, cams = [], [], []
    for v, buf in _render_views(state, cfg, ds, views):
        depths.append(buf.norm_depth)
        masks.append(buf.acc_alpha >= args.alpha_min)
        cams.append(ds.cameras[v])
    tsdf_fuse(depths, cams, vol, masks)
    mesh = marching_cubes(vol)
    path = out / "mesh.ply"
    write_ply(path, mesh, binary=not args.ascii)
    if args.dump_volume:
        vol.dump(out / "tsdf.bin")
    _write_manifest(out, "extract", args, {"volume": {"dims": list(vol.dims), "voxel_size": vol.voxel_size,
                                                       "origin": vol.origin.tolist()}})
    if mesh.is_empty:
        log.warning("extracted mesh is empty; wrote an empty PLY")
        print(f"warning: empty mesh written to {path}", file=sys.stderr)
    else:
        print(f"mesh: {len(mesh.vertices)} vertices, {len(mesh.triangles)} triangles, "
              f"grid {vol.dims} voxel {vol.voxel_size:.5g} -> {path}")
    return EXIT_OK


def _parse_pixels(items):
    px = []
    for item in items or ():
        for part in item.replace(";", " ").split():
            try:
                x, y = (int(v) for v in part.split(","))
            except ValueError as e:
                raise UsageError(f"pixel {part!r} is not of the form x,y") from e
            px.append((x, y))
    return px


def cmd_diagnose(args):
    from .diagnostics import buffer_depth_bias, count_logs, export_ray_profiles, lots_in_buffers

    state, cfg = _load_checkpoint(args.checkpoint)
    ds = _load_data(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    views = args.views if args.views else ds.indices("train")
    for v in views:
        if not 0 <= v < len(ds):
            raise UsageError(f"view {v} out of range (dataset has {len(ds)})")
    g = state.gaussians.astype(np.float64)
    n_logs, prop = count_logs(g, args.opacity_cutoff)
    lots, bias = [], {}
    for v, buf in _render_views(state, cfg, ds, views):
        lots.append(lots_in_buffers(buf, args.value_cutoff))
        if ds.depths is not None and ds.depths[v] is not None and np.any(ds.depths[v] > 0):
            bias[str(v)] = buffer_depth_bias(buf, ds.depths[v])
    report = {
        "n_gaussians": len(g),
        "n_logs": n_logs,
        "log_proportion": prop,
        "mean_lots_per_view": float(np.mean(lots)) if lots else 0.0,
        "lots_per_view": dict(zip(map(str, views), lots)),
        "cutoffs": {"opacity": args.opacity_cutoff, "value": args.value_cutoff},
        "global_threshold": float(state.global_threshold),
        "views": list(views),
    }
    if bias:
        report["depth_bias"] = {
            "per_view": bias,
            "mean_raw": float(np.mean([b["raw"]["mean"] for b in bias.values()])),
            "mean_normalized": float(np.mean([b["normalized"]["mean"] for b in bias.values()])),
        }
    else:
        report["depth_bias"] = None  # dataset carries no ground-truth depth
    (out / "lop_report.json").write_text(json.dumps(report, indent=1))
    pixels = _parse_pixels(args.pixel)
    n_rows = export_ray_profiles(out / "ray_profiles.csv", g, state.thresholds,
                                 [ds.cameras[v] for v in views], pixels, cfg.background, cfg.backend)
    _write_manifest(out, "diagnose", args)
    print(f"LOGs {n_logs}/{len(g)} ({prop:.3%}) below {args.opacity_cutoff}; mean LOTs/view "
          f"{report['mean_lots_per_view']:.1f}; {n_rows} profile rows -> {out}")
    return EXIT_OK


def cmd_eval(args):
    from .mesh import chamfer_distance, read_mesh, read_ply, sample_mesh_points
    from .synthetic import visible_surface_samples

    mp = Path(args.mesh)
    if not mp.exists():
        raise UsageError(f"mesh not found: {mp}")
    mesh = read_mesh(mp)
    if mesh.is_empty:
        print(f"error: mesh {mp} is empty", file=sys.stderr)
        return EXIT_USAGE
    pts = sample_mesh_points(mesh, args.samples, args.seed)
    if args.reference:
        rp = Path(args.reference)
        if not rp.exists():
            raise UsageError(f"reference not found: {rp}")
        ply = read_ply(rp)
        if len(ply["faces"]):
            ref = sample_mesh_points(read_mesh(rp), args.samples, args.seed)
            source = f"mesh {rp}"
        else:
            ref = ply["vertices"]
            source = f"point cloud {rp}"
    else:
        ds = _load_data(args.data)
        if not ds.gt_geometry:
            raise UsageError("dataset has no analytic geometry; pass --reference")
        rng = np.random.default_rng(args.seed)
        ref = visible_surface_samples(ds.gt_geometry, ds.cameras, args.samples, rng)
        source = "analytic geometry (camera-visible surface)"
    if len(ref) == 0:
        raise UsageError("reference point set is empty")
    cd = chamfer_distance(pts, ref)
    result = {"chamfer": cd, "samples": args.samples, "reference": source, "mesh": str(mp)}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "chamfer.json").write_text(json.dumps(result, indent=1))
        _write_manifest(out, "eval", args)
    print(json.dumps(result))
    return EXIT_OK


def cmd_render(args):
    from .scene_io import write_pfm, write_png

    state, cfg = _load_checkpoint(args.checkpoint)
    ds = _load_data(args.data)
    if not 0 <= args.view < len(ds):
        raise UsageError(f"view {args.view} out of range (dataset has {len(ds)})")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (v, buf), = _render_views(state, cfg, ds, [args.view])
    write_png(out / f"render_{v:03d}.png", buf.color)
    write_pfm(out / f"depth_{v:03d}.pfm", buf.norm_depth)
    write_pfm(out / f"raw_depth_{v:03d}.pfm", buf.raw_depth)
    write_png(out / f"normal_{v:03d}.png", 0.5 * (buf.normal + 1.0) * (buf.acc_alpha[..., None] > 0))
    _write_manifest(out, "render", args)
    print(f"rendered view {v} -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="fifsplat", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.add_argument("-q", "--quiet", dest="verbose", action="store_const", const=-1)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config override (repeatable)")
        sp.add_argument("--seed", type=int, default=None)

    g = sub.add_parser("gen-scene", help="ray-trace a synthetic dataset")
    common(g)
    g.add_argument("--spec", help="YAML/JSON scene spec")
    g.add_argument("--preset", choices=PRESETS)
    g.set_defaults(func=cmd_gen_scene, seed=0)

    t = sub.add_parser("train", help="optimize a scene")
    common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--disable-global-fif", action="store_true")
    t.add_argument("--disable-local-fif", action="store_true")
    t.add_argument("--resume", nargs="?", const="auto", default=None,
                   help="continue from a checkpoint (default: OUT/checkpoint.spkg)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("extract", help="TSDF-fuse rendered depth into a PLY mesh")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--resolution", type=int, default=128)
    e.add_argument("--voxel-size", type=float, default=None)
    e.add_argument("--truncation-voxels", type=float, default=4.0)
    e.add_argument("--alpha-min", type=float, default=0.5)
    e.add_argument("--ascii", action="store_true")
    e.add_argument("--dump-volume", action="store_true")
    e.set_defaults(func=cmd_extract)

    d = sub.add_parser("diagnose", help="LOG/LOT counts, depth bias and ray profiles")
    common(d)
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--opacity-cutoff", type=float, default=0.1)
    d.add_argument("--value-cutoff", type=float, default=0.1)
    d.add_argument("--pixel", action="append", default=[], help="x,y (repeatable or ';'-separated)")
    d.add_argument("--views", type=int, nargs="*", default=None)
    d.set_defaults(func=cmd_diagnose)

    v = sub.add_parser("eval", help="Chamfer distance of a mesh to a reference")
    common(v, out_required=False)
    v.add_argument("--mesh", required=True)
    v.add_argument("--data")
    v.add_argument("--reference")
    v.add_argument("--samples", type=int, default=20000)
    v.set_defaults(func=cmd_eval, seed=0)

    r = sub.add_parser("render", help="render one view to PNG/PFM")
    common(r)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--view", type=int, default=0)
    r.set_defaults(func=cmd_render)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING if args.verbose <= 0 else (logging.INFO if args.verbose == 1 else logging.DEBUG)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, DatasetError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
