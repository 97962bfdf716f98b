"""Command-line interface.

Subcommands::

    fit             posed images -> fitted scene PLY
    attack          scene + detector weights -> recolored scene PLY + NDJSON log
    render          scene + view grid -> PNGs
    evaluate        scene + detector + grid -> AP report (JSON/CSV)
    palette         scene + grid -> dominant background colors (hex lines)
    train-detector  scene + grid -> detector weights

Exit codes: 0 success, 2 configuration/usage error, 3 runtime failure.
The attack config JSON may come from ``--config`` or the
``SPLATCAMO_ATTACK_CONFIG`` environment variable.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .attack import AttackConfig, AttackLog, PrintableColorSet, build_palette, run_attack
from .camera import Intrinsics
from .dataset import (build_detection_dataset, load_posed_images,
                      save_detection_dataset)
from .detector import DetectorModel, TrainConfig, load_detector, save_detector, train_toy_detector
from .errors import (InvalidParameterError, MissingTraceError, ParseError,
                     SchemaError, TrainingFailedError)
from .evaluate import EvalReport, ViewGrid, bbox_from_mask, evaluate, generate_view_grid
from .detector import GroundTruth
from .imgio import save_png
from .ply import load_scene, save_scene
from .reconstruct import FitConfig, fit_scene, random_init_scene
from .render import DEFAULT_MASK_THRESHOLD, render
from .attack import collect_background_pixels
from .toyscene import (TOY_FOV_DEG, TOY_IMAGE_SIZE, make_toy_scene, toy_view_grid)

_CONFIG_ENV_VAR = "SPLATCAMO_ATTACK_CONFIG"


def _parse_floats(text: str, flag: str):
    try:
        return tuple(float(v) for v in text.split(",") if v.strip() != "")
    except ValueError as e:
        raise InvalidParameterError(f"{flag} expects comma-separated numbers, got {text!r}") from e


def _add_grid_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--grid", default="toy",
                   help="view grid: 'toy' (2 distances x 3 pitches x 10deg ring), "
                        "'single-view' (one camera), or 'custom' with the flags below")
    p.add_argument("--distances", default="5,8", help="custom grid distances (comma-separated)")
    p.add_argument("--pitches", default="25,40,55", help="custom grid pitch angles in degrees")
    p.add_argument("--azimuth-step", type=float, default=10.0, help="azimuth step in degrees")
    p.add_argument("--azimuth-offset", type=float, default=0.0,
                   help="rotate the azimuth ring (e.g. half a step for a held-out grid)")
    p.add_argument("--image-size", type=int, default=TOY_IMAGE_SIZE,
                   help="square render resolution in pixels")
    p.add_argument("--fov", type=float, default=TOY_FOV_DEG, help="horizontal field of view, degrees")
    p.add_argument("--target-center", default="0,0,0.35", help="orbit center x,y,z")


def _grid_from_args(args) -> ViewGrid:
    if args.grid == "toy":
        return toy_view_grid(azimuth_offset=args.azimuth_offset, size=args.image_size)
    intr = Intrinsics.from_fov(args.image_size, args.image_size, args.fov)
    center = _parse_floats(args.target_center, "--target-center")
    if len(center) != 3:
        raise InvalidParameterError("--target-center needs exactly three numbers")
    if args.grid == "single-view":
        return ViewGrid(distances=(_parse_floats(args.distances, "--distances") or (5.0,))[:1],
                        pitches=(_parse_floats(args.pitches, "--pitches") or (40.0,))[:1],
                        azimuth_step=360.0, intrinsics=intr, target_center=center,
                        azimuth_offset=args.azimuth_offset)
    if args.grid == "custom":
        return ViewGrid(distances=_parse_floats(args.distances, "--distances"),
                        pitches=_parse_floats(args.pitches, "--pitches"),
                        azimuth_step=args.azimuth_step, intrinsics=intr,
                        target_center=center, azimuth_offset=args.azimuth_offset)
    raise InvalidParameterError(f"unknown grid {args.grid!r}; use toy, single-view, or custom")


def _load_attack_config(args) -> AttackConfig:
    path = getattr(args, "config", None) or os.environ.get(_CONFIG_ENV_VAR)
    cfg = AttackConfig.from_file(path) if path else AttackConfig()
    overrides = {}
    if getattr(args, "iters", None) is not None:
        overrides["inner_iters_per_view"] = args.iters
    if getattr(args, "epochs", None) is not None:
        overrides["outer_epochs"] = args.epochs
    if getattr(args, "seed", None) is not None:
        overrides["rng_seed"] = args.seed
    if overrides:
        d = cfg.to_dict()
        renamed = {"inner_iters_per_view": "inner_iters_per_view",
                   "outer_epochs": "outer_epochs", "rng_seed": "rng_seed"}
        for k, v in overrides.items():
            d[renamed[k]] = v
        cfg = AttackConfig.from_dict(d)
    return cfg


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splatcamo",
        description="Gaussian-splat scenes: fit, render, evaluate, and optimize "
                    "adversarial object camouflage against a toy detector.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a scene to a posed-image directory")
    p.add_argument("--images", required=True, help="directory with manifest.json + PNGs")
    p.add_argument("--init", help="initial scene PLY (geometry kept fixed)")
    p.add_argument("--random-init", type=int, metavar="N",
                   help="start from N random gaussians instead of --init")
    p.add_argument("--bounds", default="-2,-2,0,2,2,1",
                   help="random-init box x0,y0,z0,x1,y1,z1")
    p.add_argument("--out", required=True, help="output scene PLY")
    p.add_argument("--iterations", type=int, default=200)
    p.add_argument("--lr-sh", type=float, default=0.05)
    p.add_argument("--lr-opacity", type=float, default=0.05)
    p.add_argument("--lr-scale", type=float, default=0.005)
    p.add_argument("--w-opacity", type=float, default=0.01)
    p.add_argument("--w-flat", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("attack", help="optimize object camouflage against a detector")
    p.add_argument("--scene", required=True, help="input scene PLY")
    p.add_argument("--weights", required=True, help="detector weight file")
    p.add_argument("--out", required=True, help="output (recolored) scene PLY")
    p.add_argument("--log", required=True, help="output NDJSON attack log")
    p.add_argument("--config", help=f"attack config JSON (or ${_CONFIG_ENV_VAR})")
    p.add_argument("--iters", type=int, help="override inner iterations per view")
    p.add_argument("--epochs", type=int, help="override outer epochs")
    p.add_argument("--seed", type=int, help="override rng seed")
    p.add_argument("--save-config", help="write the resolved config JSON here and exit")
    _add_grid_flags(p)

    p = sub.add_parser("render", help="render a scene over a view grid to PNGs")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True, help="output directory")
    _add_grid_flags(p)

    p = sub.add_parser("evaluate", help="AP@0.5 of a detector over a view grid")
    p.add_argument("--scene", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--mode", choices=("clean", "camouflaged"), default="clean")
    p.add_argument("--weather", choices=("sunny", "cloudy", "both"), default=None)
    p.add_argument("--out-json", help="write the full report(s) here")
    p.add_argument("--out-csv", help="write the per-cell table here")
    p.add_argument("--dump-views", help="directory for per-view PNG dumps")
    _add_grid_flags(p)

    p = sub.add_parser("palette", help="dominant background colors of a scene")
    p.add_argument("--scene", required=True)
    p.add_argument("-k", type=int, default=4, help="number of colors")
    p.add_argument("--out", help="write hex lines here (also printed)")
    p.add_argument("--seed", type=int, default=0)
    _add_grid_flags(p)

    p = sub.add_parser("train-detector", help="train the bundled toy detector")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--scene", help="scene PLY to render training data from")
    group.add_argument("--toy", action="store_true",
                       help="use the canonical generated toy scene (with its decoy class)")
    p.add_argument("--out", required=True, help="output weight file")
    p.add_argument("--dataset-dir", help="also dump the rendered labeled dataset here")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-steps", type=int, default=1200)
    p.add_argument("--target-ap", type=float, default=0.9)
    _add_grid_flags(p)
    return parser


# ---------------------------------------------------------------------------
# Subcommand bodies


def _cmd_fit(args) -> int:
    posed = load_posed_images(args.images)
    if args.random_init is not None:
        b = _parse_floats(args.bounds, "--bounds")
        if len(b) != 6:
            raise InvalidParameterError("--bounds needs six numbers x0,y0,z0,x1,y1,z1")
        init = random_init_scene(args.random_init, b[:3], b[3:], rng_seed=args.seed)
    elif args.init:
        init = load_scene(args.init)
    else:
        raise InvalidParameterError("fit needs --init or --random-init")
    cfg = FitConfig(iterations=args.iterations, lr_sh=args.lr_sh,
                    lr_opacity=args.lr_opacity, lr_scale=args.lr_scale,
                    w_opacity=args.w_opacity, w_flat=args.w_flat, rng_seed=args.seed)
    scene, loss = fit_scene(posed, init, cfg)
    save_scene(scene, args.out)
    print(f"fitted {len(scene)} gaussians over {len(posed)} images; "
          f"final loss {loss:.6f}; wrote {args.out}")
    return 0


def _cmd_attack(args) -> int:
    cfg = _load_attack_config(args)
    if args.save_config:
        cfg.save(args.save_config)
        print(f"wrote resolved config to {args.save_config}")
        return 0
    scene = load_scene(args.scene)
    detector = load_detector(args.weights)
    cameras = generate_view_grid(_grid_from_args(args))
    gts = []
    for cam in cameras:
        out = render(scene, cam)
        box = bbox_from_mask(out.object_alpha >= cfg.mask_threshold)
        gts.append(None if box is None else GroundTruth(bbox=box, class_id=0))
    adversarial, log = run_attack(scene, cameras, detector, gts, cfg)
    save_scene(adversarial, args.out)
    log.save(args.log)
    n_success = len(log.events("view_success"))
    n_skip = len(log.events("view_skip"))
    print(f"attacked {len(cameras)} views "
          f"({n_success} successes, {n_skip} skip events); "
          f"wrote {args.out} and {args.log}")
    return 0


def _cmd_render(args) -> int:
    scene = load_scene(args.scene)
    grid = _grid_from_args(args)
    cameras = generate_view_grid(grid)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, cam in enumerate(cameras):
        save_png(render(scene, cam).rgb, out_dir / f"view_{i:04d}.png")
    print(f"rendered {len(cameras)} views to {out_dir}")
    return 0


def _cmd_evaluate(args) -> int:
    scene = load_scene(args.scene)
    detector = load_detector(args.weights)
    grid = _grid_from_args(args)
    weathers = [None] if args.weather is None else (
        ["sunny", "cloudy"] if args.weather == "both" else [args.weather])
    reports = {}
    for weather in weathers:
        dump = None
        if args.dump_views:
            dump = Path(args.dump_views) / (weather or "baseline")
        reports[weather or "baseline"] = evaluate(
            scene, detector, grid, mode=args.mode, weather=weather, out_dir=dump)
    for name, rep in reports.items():
        print(f"[{name}] mode={rep.mode} overall AP@0.5 = {rep.overall_ap:.4f} "
              f"detection rate = {rep.detection_rate:.4f}"
              + (" (no ground truth)" if rep.no_ground_truth else ""))
    if args.out_json:
        payload = {name: rep.to_dict() for name, rep in reports.items()}
        Path(args.out_json).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    if args.out_csv:
        if len(reports) == 1:
            next(iter(reports.values())).save_csv(args.out_csv)
        else:
            import csv as _csv
            with open(args.out_csv, "w", newline="") as fh:
                w = _csv.writer(fh)
                names = list(reports)
                w.writerow(["distance", "pitch"] + [f"ap_{n}" for n in names])
                cells = reports[names[0]].per_cell
                for ci, cell in enumerate(cells):
                    w.writerow([cell["distance"], cell["pitch"]]
                               + [f"{reports[n].per_cell[ci]['ap']:.6f}" for n in names])
    incomplete = any(rep.incomplete for rep in reports.values())
    return 3 if incomplete else 0


def _cmd_palette(args) -> int:
    scene = load_scene(args.scene)
    cameras = generate_view_grid(_grid_from_args(args))
    pixels = collect_background_pixels(scene, cameras)
    palette = build_palette(pixels, args.k, rng=args.seed)
    lines = ["#%02X%02X%02X" % tuple(int(round(255 * v)) for v in c) for c in palette.colors]
    for line, pop in zip(lines, palette.populations):
        print(f"{line}  (pixels: {pop})")
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n")
        print(f"wrote {args.out}")
    return 0


def _cmd_train_detector(args) -> int:
    extra = None
    if args.toy:
        scene, info = make_toy_scene()
        extra = {info["decoy_class_id"]: info["decoy_indices"]}
    else:
        scene = load_scene(args.scene)
    cameras = generate_view_grid(_grid_from_args(args))
    dataset = build_detection_dataset(scene, cameras, extra_class_indices=extra)
    if args.dataset_dir:
        save_detection_dataset(dataset, args.dataset_dir)
    cfg = TrainConfig(seed=args.seed, max_steps=args.max_steps, target_ap=args.target_ap)
    model, report = train_toy_detector(dataset, cfg=cfg)
    save_detector(model, args.out)
    print(json.dumps({"final_val_ap": report["final_val_ap"], "steps": report["steps"],
                      "train_seconds": round(report["train_seconds"], 2)}, sort_keys=True))
    print(f"wrote {args.out}")
    return 0


_COMMANDS = {
    "fit": _cmd_fit,
    "attack": _cmd_attack,
    "render": _cmd_render,
    "evaluate": _cmd_evaluate,
    "palette": _cmd_palette,
    "train-detector": _cmd_train_detector,
}


def cli(argv=None) -> int:
    """Run the CLI; returns the process exit code instead of raising."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse exits 2 on usage errors, 0 on --help
        return int(e.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except (InvalidParameterError, SchemaError, ParseError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except TrainingFailedError as e:
        print(f"error: {e}", file=sys.stderr)
        if e.report is not None:
            print(json.dumps(e.report, sort_keys=True), file=sys.stderr)
        return 3
    except (MissingTraceError, OSError, RuntimeError, np.linalg.LinAlgError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
