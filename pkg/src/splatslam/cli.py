"""Command line: simulate, slam, render, eval."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, help_epilog
from .fileio import MissingCalibration, UnreadableFile, format_timestamp, read_ppm, read_tum, write_pfm, write_ppm

EXIT_OK, EXIT_BAD_INPUT, EXIT_TRACKING_LOST = 0, 2, 3

log = logging.getLogger("splatslam")


class BadInput(Exception):
    pass


def _config(args) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise BadInput(f"config file not found: {path}")
        try:
            cfg = RunConfig.load(path)
        except ConfigError as exc:
            raise BadInput(f"{path}: {exc}") from None
    return cfg.update(seed=args.seed, threads=args.threads)


def _set_threads(n):
    if n and n > 0:
        import numba
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    from .simulator import SpecError, bundled_scene, generate_from_spec, load_spec
    spec_path = Path(args.spec)
    if not spec_path.exists():
        try:
            spec_path = bundled_scene(args.spec)
        except FileNotFoundError:
            raise BadInput(f"spec file not found: {args.spec}") from None
    try:
        spec = load_spec(spec_path, args.seed)
    except SpecError as exc:
        raise BadInput(str(exc)) from None
    out = Path(args.out or "dataset")
    generate_from_spec(spec, out)
    print(f"wrote {spec.trajectory.frames} frames to {out}")
    return EXIT_OK


def cmd_slam(args) -> int:
    from .slam import run_slam
    from .tracking import TrackingLost
    cfg = _config(args)
    _set_threads(cfg.threads)
    dataset = Path(args.dataset)
    if not dataset.is_dir():
        raise BadInput(f"dataset directory not found: {dataset}")
    out = Path(args.out or "slam_out")
    try:
        run = run_slam(dataset, cfg, out)
    except TrackingLost as exc:
        print(f"tracking lost: {exc}; partial outputs in {out}", file=sys.stderr)
        return EXIT_TRACKING_LOST
    except (MissingCalibration, UnreadableFile, ValueError) as exc:
        raise BadInput(str(exc)) from None
    n = len(run.poses)
    print(f"{n} frames, {len(run.backend.keyframes)} keyframes, {len(run.map)} primitives, "
          f"{n / run.seconds:.2f} fps -> {out}")
    return EXIT_OK


def _camera(args):
    from .core import CameraModel
    from .fileio import read_calib
    from .sensor import read_camera
    if args.dataset:
        return read_camera(args.dataset)
    if not args.calib or not args.size:
        raise BadInput("render needs --dataset DIR, or --calib FILE with --size WxH")
    try:
        w, h = (int(x) for x in args.size.lower().split("x"))
    except ValueError:
        raise BadInput(f"bad --size {args.size!r}, expected WxH") from None
    K, T = read_calib(args.calib)
    return CameraModel(K[0, 0], K[1, 1], K[0, 2], K[1, 2], w, h, T)


def cmd_render(args) -> int:
    from .gaussian_map import GaussianMap
    from .renderer import render
    cfg = _config(args)
    _set_threads(cfg.threads)
    for p in (args.map, args.poses):
        if not Path(p).exists():
            raise BadInput(f"file not found: {p}")
    try:
        cam = _camera(args)
        gmap = GaussianMap.load_ply(args.map)
        stamps, poses = read_tum(args.poses)
    except (UnreadableFile, MissingCalibration) as exc:
        raise BadInput(str(exc)) from None
    out = Path(args.out or "renders")
    out.mkdir(parents=True, exist_ok=True)
    for t, pose in zip(stamps, poses):
        buf = render(gmap, pose, cam)
        name = format_timestamp(t)
        write_ppm(out / f"{name}.ppm", np.clip(buf.color, 0.0, 1.0))
        write_pfm(out / f"{name}.pfm", buf.depth)
    print(f"rendered {len(poses)} views to {out}")
    return EXIT_OK


def _image_files(d: Path):
    if not d.is_dir():
        raise BadInput(f"image directory not found: {d}")
    return sorted(p for p in d.iterdir() if p.suffix == ".ppm")


def cmd_eval(args) -> int:
    from .metrics import DimensionMismatch, InsufficientOverlap, evaluate_trajectory, image_metrics, write_report
    rows = []
    if args.est or args.gt:
        if not (args.est and args.gt):
            raise BadInput("trajectory evaluation needs both --est and --gt")
        for p in (args.est, args.gt):
            if not Path(p).exists():
                raise BadInput(f"trajectory file not found: {p}")
        try:
            es, ep = read_tum(args.est)
            gs, gp = read_tum(args.gt)
            m = evaluate_trajectory(es, ep, gs, gp)
        except (UnreadableFile, InsufficientOverlap) as exc:
            raise BadInput(str(exc)) from None
        rows.append({"kind": "trajectory", "ate_rmse": m.ate_rmse, "t_rel": m.t_rel, "r_rel": m.r_rel,
                     "matched": m.matched})
        print(f"ATE RMSE {m.ate_rmse:.6f}  t_rel {m.t_rel:.4f} %  r_rel {m.r_rel:.4f} deg/100")
    if args.rendered or args.target:
        if not (args.rendered and args.target):
            raise BadInput("image evaluation needs both --rendered and --target")
        a, b = Path(args.rendered), Path(args.target)
        fa, fb = _image_files(a), _image_files(b)
        if len(fa) != len(fb):
            raise BadInput(f"image counts differ: {len(fa)} in {a} vs {len(fb)} in {b}")
        for x, y in zip(fa, fb):
            try:
                m = image_metrics(read_ppm(x), read_ppm(y))
            except DimensionMismatch as exc:
                raise BadInput(f"{x.name}: {exc}") from None
            rows.append({"kind": "image", "rendered": x.name, "target": y.name, "ssim": m.ssim,
                         "psnr": m.psnr, "composite": m.composite})
        if rows:
            ims = [r for r in rows if r["kind"] == "image"]
            if ims:
                print(f"{len(ims)} images: SSIM {np.mean([r['ssim'] for r in ims]):.4f}  "
                      f"PSNR {np.mean([r['psnr'] for r in ims]):.2f} dB")
    if not rows and not (args.rendered or args.est):
        raise BadInput("nothing to evaluate: give --est/--gt and/or --rendered/--target")
    out = Path(args.out or "metrics.jsonl")
    if out.is_dir():
        out = out / "metrics.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_report(out, rows)
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int, help="random seed (overrides config)")
    common.add_argument("--threads", type=int, help="worker threads; 1 runs everything sequentially")
    common.add_argument("--out", help="output directory or file")
    common.add_argument("-v", "--verbose", action="store_true")
    fmt = argparse.RawDescriptionHelpFormatter
    p = argparse.ArgumentParser(prog="splatslam", description="LiDAR-visual Gaussian SLAM toolkit",
                                epilog=help_epilog(), formatter_class=fmt)
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("simulate", parents=[common], help="generate a synthetic dataset", formatter_class=fmt)
    s.add_argument("spec", help="scene JSON file or bundled scene name (e.g. plane-corridor)")
    s.set_defaults(func=cmd_simulate)
    s = sub.add_parser("slam", parents=[common], help="run the pipeline on a dataset", epilog=help_epilog(),
                       formatter_class=fmt)
    s.add_argument("dataset")
    s.set_defaults(func=cmd_slam)
    s = sub.add_parser("render", parents=[common], help="render a PLY map at TUM poses", formatter_class=fmt)
    s.add_argument("map")
    s.add_argument("poses")
    s.add_argument("--dataset", help="dataset directory providing the camera")
    s.add_argument("--calib", help="calib.txt providing the camera")
    s.add_argument("--size", help="image size WxH when using --calib")
    s.set_defaults(func=cmd_render)
    s = sub.add_parser("eval", parents=[common], help="trajectory and image metrics", formatter_class=fmt)
    s.add_argument("--est")
    s.add_argument("--gt")
    s.add_argument("--rendered")
    s.add_argument("--target")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except BadInput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT


if __name__ == "__main__":
    sys.exit(main())
