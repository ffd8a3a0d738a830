"""Command-line entry point.

Exit codes:
    0  success
    1  unexpected internal error
    2  usage or configuration error (bad flags, unknown config keys)
    3  input data error (missing or malformed files, invalid datasets)
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE, EXIT_DATA = 0, 1, 2, 3

log = logging.getLogger("trisoup")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def _setup_logging(verbosity: int):
    level = logging.WARNING if verbosity < 0 else logging.INFO if verbosity == 0 else logging.DEBUG
    logging.basicConfig(level=level, format="%(message)s", stream=sys.stderr, force=True)


def _kv(**items) -> str:
    return " ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in items.items())


def _emit(**items):
    print(_kv(**items), flush=True)


def _resolve_config(args):
    from .config import ConfigError, TrainConfig

    try:
        cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
        if args.set:
            cfg = cfg.with_overrides(args.set)
        if getattr(args, "seed", None) is not None:
            cfg = cfg.replace(seed=args.seed)
            cfg.validate()
    except FileNotFoundError as e:
        raise DataError(f"config file not found: {e.filename}") from e
    except ConfigError as e:
        raise UsageError(str(e)) from e
    return cfg


def _need_dir(path, what):
    p = Path(path)
    if not p.is_dir():
        raise DataError(f"{what} not found: {p}")
    return p


def _need_file(path, what):
    p = Path(path)
    if not p.is_file():
        raise DataError(f"{what} not found: {p}")
    return p


# ---------------------------------------------------------------- commands

def cmd_train(args) -> int:
    from .sceneio.colmap import load_sfm
    from .sceneio.files import write_mesh_ply
    from .trainer import evaluate, load_checkpoint, save_checkpoint, train

    cfg = _resolve_config(args)
    data = _need_dir(args.data, "dataset directory")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.ini")
    ds = load_sfm(data, scale=cfg.resolution_scale, holdout_every=cfg.holdout_every)
    state = None
    if args.resume:
        state, _ = load_checkpoint(_need_file(args.resume, "checkpoint"))
    state = train(ds, cfg, state=state, out_dir=out)
    save_checkpoint(out / "checkpoint.tsc", state, cfg)
    write_mesh_ply(out / "triangles.ply", state.soup)
    res = dict(iteration=state.iteration, count=state.soup.count)
    if state.loss_history:
        res["final_loss"] = state.loss_history[-1]
    if ds.holdout:
        res["holdout_psnr"] = evaluate(state.soup, ds, ds.holdout, cfg.raster())
    _emit(event="train_done", **res)
    return EXIT_OK


def cmd_render(args) -> int:
    from .rasterizer import render
    from .sceneio.colmap import Dataset, load_sfm, write_sfm
    from .sceneio.files import save_png, write_pfm
    from .trainer import load_checkpoint

    state, ckcfg = load_checkpoint(_need_file(args.checkpoint, "checkpoint"))
    if args.config is None and ckcfg is not None and not args.set:
        cfg = ckcfg
    else:
        cfg = _resolve_config(args)
    if args.depth_mode:
        cfg = cfg.replace(depth_mode=args.depth_mode)
    ds = load_sfm(_need_dir(args.data, "dataset directory"), scale=cfg.resolution_scale, load_images=False)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.ini")
    st = cfg.raster()
    soup = state.soup
    soup.active_sh_degree = soup.max_sh_degree
    for cam, name in zip(ds.cameras, ds.names):
        r = render(soup, cam, st)
        stem = Path(name).stem
        save_png(out / f"{stem}.png", np.clip(r.color, 0, 1))
        write_pfm(out / f"{stem}.depth.pfm", r.depth)
        write_pfm(out / f"{stem}.normal.pfm", r.normal)
        save_png(out / f"{stem}.normal.png", np.clip(0.5 * (r.normal + 1.0), 0, 1))
    # camera files alongside the maps make the directory self-contained for `fuse`
    write_sfm(Dataset(ds.cameras, [None] * len(ds.cameras), ds.seed, names=ds.names), out)
    _emit(event="render_done", views=len(ds.cameras), depth_mode=cfg.depth_mode, out=str(out))
    return EXIT_OK


def cmd_fuse(args) -> int:
    from .fusion import fuse_depth_maps
    from .sceneio.colmap import load_sfm
    from .sceneio.files import load_image, read_pfm, write_ply_points

    d = _need_dir(args.depths, "depth directory")
    ds = load_sfm(d, load_images=False)
    depths, colors = [], []
    for cam, name in zip(ds.cameras, ds.names):
        stem = Path(name).stem
        depths.append(read_pfm(_need_file(d / f"{stem}.depth.pfm", "depth map")))
        img = d / f"{stem}.png"
        colors.append(load_image(img) if img.exists() else np.zeros((cam.height, cam.width, 3)))
        if depths[-1].shape != (cam.height, cam.width):
            raise DataError(f"depth map {stem} is {depths[-1].shape}, camera expects {(cam.height, cam.width)}")
    cloud = fuse_depth_maps(depths, ds.cameras, colors, args.px_thresh, args.min_views,
                            args.k_neighbors, args.rel_depth)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_ply_points(out, cloud.points, cloud.colors)
    valid = int(sum((x > 0).sum() for x in depths))
    _emit(event="fuse_done", points=len(cloud), valid_depths=valid,
          survival=float(len(cloud) / valid) if valid else 0.0, out=str(out))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .metrics import chamfer, psnr, ssim
    from .sceneio.files import load_image, read_ply_points

    res = {}
    if args.pred and args.ref:
        pd_, rd = _need_dir(args.pred, "prediction directory"), _need_dir(args.ref, "reference directory")
        names = sorted(p.name for p in rd.glob("*.png") if not p.name.endswith(".normal.png"))
        pairs = [(pd_ / n, rd / n) for n in names if (pd_ / n).exists()]
        if not pairs:
            raise DataError(f"no matching PNG files between {pd_} and {rd}")
        ps, ss = [], []
        for a, b in pairs:
            x, y = load_image(a), load_image(b)
            if x.shape != y.shape:
                raise DataError(f"size mismatch for {a.name}")
            ps.append(psnr(x, y))
            ss.append(ssim(x, y))
        res.update(images=len(pairs), psnr=float(np.mean(ps)), ssim=float(np.mean(ss)))
    if args.cloud and args.ref_cloud:
        a, _ = read_ply_points(_need_file(args.cloud, "point cloud"))
        b, _ = read_ply_points(_need_file(args.ref_cloud, "reference cloud"))
        if len(a) == 0 or len(b) == 0:
            raise DataError("chamfer distance needs two non-empty clouds")
        acc, comp, mean = chamfer(a, b)
        res.update(accuracy=acc, completeness=comp, chamfer=mean)
    if not res:
        raise UsageError("eval needs --pred/--ref directories and/or --cloud/--ref-cloud files")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(res, indent=2, sort_keys=True) + "\n")
    _emit(event="eval_done", **res)
    return EXIT_OK


def _hist(name, values, bins=8):
    values = np.asarray(values, float)
    if values.size == 0:
        return f"{name}: empty"
    cnt, edges = np.histogram(values, bins=bins)
    cells = " ".join(f"[{edges[i]:.3g},{edges[i + 1]:.3g}):{c}" for i, c in enumerate(cnt))
    return f"{name}: {cells}"


def cmd_inspect(args) -> int:
    from .connectivity import build_graph
    from .trainer import load_checkpoint

    state, cfg = load_checkpoint(_need_file(args.checkpoint, "checkpoint"))
    soup = state.soup
    g = build_graph(soup, cfg.tau, cfg.rho, cfg.search_radius_factor) if cfg else build_graph(soup)
    deg = np.bincount(np.concatenate([g.tri_a, g.tri_b]), minlength=soup.count) if soup.count else np.zeros(0)
    _emit(count=soup.count, iteration=state.iteration, sh_degree=soup.max_sh_degree,
          degenerate=int(soup.degenerate().sum()), connections=len(g),
          connected_triangles=int((deg > 0).sum()))
    print(_hist("alpha", soup.alpha))
    print(_hist("sigma", np.log10(soup.sigma)).replace("sigma:", "log10_sigma:"))
    print(_hist("scale", np.log10(soup.scale.ravel())).replace("scale:", "log10_scale:"))
    return EXIT_OK


def cmd_synth(args) -> int:
    from .sceneio.colmap import write_sfm
    from .sceneio.files import write_pfm, write_ply_points
    from .synthetic import SCENES, make_dataset

    if args.scene not in SCENES:
        raise UsageError(f"unknown scene {args.scene!r}; choose from {', '.join(sorted(SCENES))}")
    ds, scene, depths = make_dataset(args.scene, args.views, args.size, args.points, args.seed)
    out = Path(args.out)
    write_sfm(ds, out)
    gt = out / "ground_truth"
    gt.mkdir(parents=True, exist_ok=True)
    for name, d in zip(ds.names, depths):
        write_pfm(gt / f"{Path(name).stem}.depth.pfm", d)
    write_ply_points(gt / "surface.ply", scene.observed_points())
    _emit(event="synth_done", scene=args.scene, views=len(ds.cameras), points=len(ds.seed.points), out=str(out))
    return EXIT_OK


# ------------------------------------------------------------------ parser

def _common(p, config=True):
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging")
    p.add_argument("-q", "--quiet", action="store_true", help="warnings only")
    if config:
        p.add_argument("--config", help="INI config file (defaults for every key)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key; repeatable")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="trisoup", description="Triangle-soup radiance field reconstruction.",
                                 epilog="Set TRISOUP_WORKERS to limit kernel threads.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="optimise a triangle soup against posed images")
    p.add_argument("data", help="dataset directory (cameras.txt, images.txt, points3D.txt, images/)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="random seed (overrides the config)")
    p.add_argument("--resume", help="checkpoint to continue from")
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render colour, depth and normal maps from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("data", help="dataset directory providing the cameras")
    p.add_argument("--out", required=True)
    p.add_argument("--depth-mode", choices=("median", "mean"))
    _common(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("fuse", help="fuse rendered depth maps into a filtered point cloud")
    p.add_argument("depths", help="directory written by `render`")
    p.add_argument("--out", required=True, help="output .ply")
    p.add_argument("--px-thresh", type=float, default=1.0)
    p.add_argument("--min-views", type=int, default=3)
    p.add_argument("--k-neighbors", type=int, default=None)
    p.add_argument("--rel-depth", type=float, default=None, help="optional relative depth check")
    _common(p, config=False)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("eval", help="PSNR/SSIM between image dirs, Chamfer between clouds")
    p.add_argument("--pred")
    p.add_argument("--ref")
    p.add_argument("--cloud")
    p.add_argument("--ref-cloud")
    p.add_argument("--out", help="write metrics as JSON")
    _common(p, config=False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="print soup statistics")
    p.add_argument("checkpoint")
    _common(p, config=False)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("synth", help="write a synthetic dataset with analytic ground truth")
    p.add_argument("scene", help="quad, two_plane or cube")
    p.add_argument("--out", required=True)
    p.add_argument("--views", type=int, default=20)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--points", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    _common(p, config=False)
    p.set_defaults(func=cmd_synth)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    _setup_logging(-1 if args.quiet else args.verbose)
    from . import set_workers
    from .camera import CameraError
    from .config import ConfigError
    from .sceneio.checkpoint import CheckpointError
    from .sceneio.colmap import ParseError
    from .soup import InitError

    try:
        set_workers()
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ParseError, CheckpointError, CameraError, InitError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:  # noqa: BLE001
        print(f"error: internal failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
