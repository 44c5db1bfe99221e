"""Command-line entry point: bake | train | render | eval | gradcheck | info.

Every command is a pure function of its inputs, flags and seed: reruns with
identical arguments produce byte-identical outputs.  Logs go to stderr;
machine-readable results (PSNR lines, CSV paths) go to stdout.  Exit codes:
0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

USAGE_EXIT = 2
RUNTIME_EXIT = 1


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="relight")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bake", help="render training slices for an asset scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--views", type=int, default=64)
    p.add_argument("--res", type=int, default=128)
    p.add_argument("--spp", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--val-views", type=int, default=8)
    p.add_argument("--camera-radius", type=float, default=None,
                   help="default: 2.4x the asset bounding radius")
    p.add_argument("--max-depth", type=int, default=4)
    p.add_argument("--hemisphere", action="store_true")
    p.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("train", help="fit a neural asset to baked slices")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log", default=None, help="CSV training log path")
    p.add_argument("--checkpoint-dir", default=None)

    p = sub.add_parser("render", help="path-trace a scene (may reference assets)")
    p.add_argument("--scene", required=True)
    p.add_argument("--res", type=int, default=256)
    p.add_argument("--spp", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--max-depth", type=int, default=4)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--tonemap", action="store_true")

    p = sub.add_parser("eval", help="PSNR between two PFM images")
    p.add_argument("--ref", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--alpha-mask", default=None)
    p.add_argument("--peak", type=float, default=1.0)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("info", help="print asset header metadata")
    p.add_argument("asset")
    return parser


def cmd_bake(args) -> int:
    from .datagen import BakeConfig, bake, scene_framing
    from .sceneio import load_scene

    scene, _ = load_scene(args.scene)
    radius = args.camera_radius
    if radius is None:
        _, bound = scene_framing(scene)
        radius = 2.4 * bound
    config = BakeConfig(view_count=args.views, resolution=args.res, spp=args.spp,
                        camera_radius=radius, hemisphere_only=args.hemisphere,
                        max_depth=args.max_depth, seed=args.seed,
                        val_views=args.val_views, threads=args.threads)
    paths = bake(scene, config, args.out)
    _log(f"baked {len(paths)} slices into {args.out}")
    return 0


def cmd_train(args) -> int:
    from . import neural
    from .trainer import TrainConfig, asset_metadata, load_dataset, train

    with open(args.config) as f:
        raw = json.load(f)
    config = TrainConfig(**raw)
    train_b, val_b, kind, (lo, hi) = load_dataset(args.data)
    asset = neural.init_asset(
        kind, lo, hi, resolution=config.resolution, channels=config.channels,
        hidden_layers=config.hidden_layers, hidden_width=config.hidden_width,
        seed=config.seed, dual_output=config.dual_output, use_h=config.use_h)
    _log(f"training {kind} asset: {asset.param_count()} parameters, "
         f"{len(train_b)} slices")

    def progress(row):
        _log("epoch %d loss %.6f val %.2f lr %.2e blur %.2f" % row)

    history, checkpoints = train(train_b, val_b, asset, config,
                                 log_path=args.log, progress=progress)
    best = max(checkpoints, key=lambda c: (-np.inf if np.isnan(c.val_psnr)
                                           else c.val_psnr))
    final = best.asset()
    final.metadata = asset_metadata(config, history)
    neural.save_asset(final, args.out)
    if args.checkpoint_dir:
        os.makedirs(args.checkpoint_dir, exist_ok=True)
        for c in checkpoints:
            with open(os.path.join(args.checkpoint_dir,
                                   f"epoch_{c.epoch:04d}.rna1"), "wb") as f:
                f.write(c.blob)
    print(f"final_val_psnr: {history[-1][2]:.4f}")
    return 0


def cmd_render(args) -> int:
    from .formats import write_pfm
    from .integrator import RenderConfig, render
    from .sceneio import camera_from_spec, load_scene

    scene, camera_spec = load_scene(args.scene)
    camera = camera_from_spec(camera_spec)
    config = RenderConfig(resolution=args.res, spp=args.spp, seed=args.seed,
                          max_depth=args.max_depth, threads=args.threads,
                          tonemap=args.tonemap)
    image = render(scene, config, camera)
    write_pfm(image, args.out)
    _log(f"wrote {args.out}")
    return 0


def cmd_eval(args) -> int:
    from .formats import read_pfm
    from .trainer import psnr

    ref = read_pfm(args.ref).rgb
    test = read_pfm(args.test).rgb
    mask = None
    if args.alpha_mask:
        mask = read_pfm(args.alpha_mask) > 0.5
    value = psnr(ref, test, peak=args.peak, mask=mask)
    print(f"PSNR: {value:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    report, ok = run_suite(seed=args.seed)
    for name, (err, tol, passed) in sorted(report.items()):
        print(f"{'PASS' if passed else 'FAIL'} {name}: "
              f"max rel err {err:.3e} (tol {tol:.0e})")
    return 0 if ok else 1


def cmd_info(args) -> int:
    from .neural import load_asset

    asset = load_asset(args.asset)
    size = os.path.getsize(args.asset)
    print(f"kind: {asset.kind}")
    print(f"grid: {asset.grid.resolution}x{asset.grid.resolution}"
          f"x{asset.grid.channels} (3 planes)")
    print(f"mlp_layers: {asset.mlp.layer_sizes()}")
    print(f"dual_output: {asset.dual_output}")
    print(f"use_h: {asset.use_h}")
    print(f"bounds_lo: {list(asset.grid.bounds_lo)}")
    print(f"bounds_hi: {list(asset.grid.bounds_hi)}")
    print(f"parameters: {asset.param_count()}")
    print(f"file_bytes: {size}")
    if asset.metadata:
        print(f"metadata: {json.dumps(asset.metadata, sort_keys=True)}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return USAGE_EXIT if e.code not in (0, None) else 0
    handlers = {"bake": cmd_bake, "train": cmd_train, "render": cmd_render,
                "eval": cmd_eval, "gradcheck": cmd_gradcheck, "info": cmd_info}
    try:
        return handlers[args.command](args)
    except FileNotFoundError as e:
        _log(f"error: missing file: {e}")
        return USAGE_EXIT
    except Exception as e:       # runtime failures surface their cause
        _log(f"error: {type(e).__name__}: {e}")
        return RUNTIME_EXIT


if __name__ == "__main__":
    sys.exit(main())
