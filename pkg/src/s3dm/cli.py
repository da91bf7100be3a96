"""Command-line pipeline driver."""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .config import parse_config
from .pipeline import MissingArtifactError, Pipeline


def _parse_floats(text: str, n: int, what: str) -> list[float]:
    parts = [float(x) for x in text.split(",")]
    if len(parts) != n:
        raise argparse.ArgumentTypeError(f"{what} needs {n} comma-separated values")
    return parts


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--preset", default="paper", choices=["paper", "desk"])
    p.add_argument("--out", help="run directory (overrides config out_dir)")
    p.add_argument("--mesh", help="input mesh path (v/vt/f text format)")
    p.add_argument("--demo-asset", help="procedural input instead of a mesh file")
    p.add_argument("--grid-res", type=int, help="grid resolution override")
    p.add_argument("--eps-d", type=float, help="truncation threshold override")
    p.add_argument("--seed", type=int, help="master seed override")
    p.add_argument("--threads", type=int, default=0,
                   help="cap BLAS threads (0 leaves the default)")
    p.add_argument("--force", action="store_true", help="redo completed stages")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="s3dm",
        description="Learn a single textured shape's patch distribution and "
                    "generate, retarget, outpaint, or locally edit variations.")
    sub = ap.add_subparsers(dest="command", required=True)

    for name, help_text in [
        ("prepare", "normalize the input and build the distance/color grid"),
        ("train-ae", "fit the triplane autoencoder"),
        ("train-diff", "fit the latent denoiser"),
        ("sample", "generate random variations"),
        ("retarget", "generate at different sizes or aspect ratios"),
        ("outpaint", "extend the shape beyond its bounds"),
        ("duplicate", "copy an input patch into generated outputs"),
        ("reconstruct", "encode and decode the input without diffusion"),
        ("eval", "compute diversity and proxy-quality metrics"),
        ("export", "decode a saved latent to a textured mesh"),
        ("run-all", "prepare, train both stages, sample, reconstruct, eval"),
    ]:
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        if name in ("sample", "retarget", "outpaint", "duplicate", "run-all"):
            p.add_argument("--count", type=int, default=1)
            p.add_argument("--no-texture", action="store_true",
                           help="skip texture baking")
        if name == "retarget":
            p.add_argument("--scale", required=True,
                           help="per-axis factors, e.g. 1.5,1,1")
        if name == "outpaint":
            p.add_argument("--pad", required=True,
                           help="latent cells: one value or x0,x1,y0,y1,z0,z1")
        if name == "duplicate":
            p.add_argument("--src-box", required=True,
                           help="x0,y0,z0,x1,y1,z1 volume coords")
            p.add_argument("--dst-box", action="append", required=True,
                           help="destination box (repeatable)")
        if name == "eval":
            p.add_argument("--samples-subdir",
                           help="samples/<subdir> to score (default: random set)")
        if name == "export":
            p.add_argument("--latent", required=True, help="latent checkpoint path")
            p.add_argument("--name", default="export")
            p.add_argument("--no-texture", action="store_true")
    return ap


def _overrides(args) -> dict:
    over = {}
    if args.out:
        over["out_dir"] = args.out
    if args.mesh:
        over["mesh_path"] = args.mesh
    if getattr(args, "demo_asset", None):
        over["demo_asset"] = args.demo_asset
    if args.grid_res is not None:
        over["grid_resolution"] = args.grid_res
    if args.eps_d is not None:
        over["eps_d"] = args.eps_d
    if args.seed is not None:
        over["seed"] = args.seed
    return over


def _limit_threads(n: int) -> None:
    try:
        import threadpoolctl
        threadpoolctl.threadpool_limits(n)
    except ImportError:
        logging.getLogger(__name__).warning(
            "threadpoolctl not installed; --threads ignored")


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(asctime)s %(name)s %(message)s")
    args = build_parser().parse_args(argv)
    if os.environ.get("S3DM_DETERMINISTIC") == "1":
        _limit_threads(1)
    elif args.threads:
        _limit_threads(args.threads)

    try:
        config = parse_config(args.config, args.preset, _overrides(args))
        pipe = Pipeline(config)
        cmd = args.command
        if cmd == "prepare":
            pipe.prepare(args.force)
        elif cmd == "train-ae":
            pipe.train_ae(args.force)
        elif cmd == "train-diff":
            pipe.train_diff(args.force)
        elif cmd == "sample":
            pipe.sample(args.count, seed=args.seed, bake=not args.no_texture,
                        force=args.force)
        elif cmd == "retarget":
            scales = _parse_floats(args.scale, 3, "--scale")
            pipe.retarget(scales, args.count, seed=args.seed,
                          bake=not args.no_texture, force=args.force)
        elif cmd == "outpaint":
            pads = [int(x) for x in args.pad.split(",")]
            pad = pads[0] if len(pads) == 1 else pads
            pipe.outpaint(pad, args.count, seed=args.seed,
                          bake=not args.no_texture, force=args.force)
        elif cmd == "duplicate":
            src = _parse_floats(args.src_box, 6, "--src-box")
            dsts = [_parse_floats(b, 6, "--dst-box") for b in args.dst_box]
            src_box = (src[:3], src[3:])
            dst_boxes = [(d[:3], d[3:]) for d in dsts]
            pipe.duplicate(src_box, dst_boxes, args.count, seed=args.seed,
                           bake=not args.no_texture, force=args.force)
        elif cmd == "reconstruct":
            pipe.reconstruct(force=args.force)
        elif cmd == "eval":
            report = pipe.evaluate(args.samples_subdir, force=args.force)
            print(f"g_diversity={report['g_diversity']:.4f} "
                  f"mean_patch_frechet={report['mean_patch_frechet_vs_input']:.6f}")
        elif cmd == "export":
            path = pipe.export(args.latent, args.name, bake=not args.no_texture)
            print(path)
        elif cmd == "run-all":
            pipe.prepare(args.force)
            pipe.train_ae(args.force)
            pipe.train_diff(args.force)
            pipe.sample(args.count, seed=args.seed, bake=not args.no_texture,
                        force=args.force)
            pipe.reconstruct(force=args.force)
            if args.count >= 2:
                pipe.evaluate(force=args.force)
    except MissingArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
