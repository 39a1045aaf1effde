"""Command-line entry point: ``semheight <command> [flags]``.

Every command resolves an ExperimentConfig from the built-in desk defaults,
an optional ``--config`` JSON file and flag overrides, in that order, and
writes plain-format outputs (CSV, PGM, JSON, text) under ``--out``.
"""

import argparse
import json
import math
import os
import sys

import numpy as np

from . import experiments as ex
from .fusion import DecayModel, run_sequence
from .grid import (argmax_labels, export_heights_csv, export_heights_pgm, export_labels_txt,
                   export_posteriors_csv, load_field, save_field)
from .mapseg import parse_layers, plan_tiles, receptive_field, run_map_eval
from .metrics import mean_iou
from .render import NoiseModel, export_depth_pgm, export_labels_pgm, export_trajectory_csv
from .labellers import OracleMapLabeller


def _floats(text):
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")
    if not vals or any(v < 0 or not math.isfinite(v) for v in vals):
        raise argparse.ArgumentTypeError(f"expected non-negative numbers, got {text!r}")
    return vals


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _nonneg_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return v


def _layers(text):
    try:
        return parse_layers(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc))


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config (default: built-in desk config)")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("--seed", type=int, default=None,
                        help="master seed; meaning depends on the command (default: from config)")
    common.add_argument("--jobs", type=_positive_int, default=1,
                        help="parallel runs for compare/sweep-noise (default: 1)")
    common.add_argument("--frames", type=_nonneg_int, default=None,
                        help="frames per run (default: config, 300)")
    common.add_argument("--map-size", type=_positive_int, default=None,
                        help="map vertices per side (default: config, 257)")
    common.add_argument("--sigma-pose", type=_floats, default=None,
                        help="pose noise sigma in m; comma list for sweep-noise (default: config)")
    common.add_argument("--sigma-depth", type=_floats, default=None,
                        help="depth noise sigma in m; comma list for sweep-noise (default: config)")
    common.add_argument("--alpha", type=float, default=None,
                        help="label decay rate in 1/m (default: 1.0)")
    common.add_argument("--cadence", type=_positive_int, default=None,
                        help="frames between checkpoints (default: config, 20)")
    common.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")

    parser = argparse.ArgumentParser(prog="semheight",
                                     description="Semantic height-map fusion simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scene", parents=[common], help="generate a scene and its ground truth")
    p.set_defaults(func=cmd_gen_scene)

    p = sub.add_parser("render", parents=[common], help="render a trajectory to depth/label images")
    p.add_argument("--scene-seed", type=int, default=None, help="default: first config scene seed")
    p.set_defaults(func=cmd_render)

    for name, func, text in (("run-view", cmd_run_view, "view-based labelling and fusion"),
                             ("run-map", cmd_run_map, "geometry fusion and map-based labelling")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--scene-seed", type=int, default=None, help="default: first config scene seed")
        p.add_argument("--wallclock", action="store_true", help="also write per-frame timings")
        p.set_defaults(func=func)

    for name, func, text in (("compare", cmd_compare, "both pipelines over scenes and seeds"),
                             ("sweep-noise", cmd_sweep, "both pipelines over the noise grid")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--wallclock", action="store_true",
                       help="fill wall-clock columns and write timing files (not reproducible)")
        p.add_argument("--calibrate", action="store_true",
                       help="recalibrate labeller base accuracies before running")
        p.add_argument("--no-plot", action="store_true", help="skip figure output")
        p.set_defaults(func=func)

    p = sub.add_parser("rf", parents=[common], help="receptive field and sliding-window plan")
    p.add_argument("--layers", required=True, type=_layers, help="conv layers, e.g. 3s1,3s2d2 or 5x3s1")
    p.add_argument("--window", type=_floats, default=None, help="window W[,H] to plan tiles for")
    p.set_defaults(func=cmd_rf)

    p = sub.add_parser("export", parents=[common], help="convert a saved field to plain formats")
    p.add_argument("--field", required=True, help="field .npz written by run-view or run-map")
    p.set_defaults(func=cmd_export)
    return parser


# ---------------------------------------------------------------- config


def resolve_config(args, parser):
    try:
        base = ex.ExperimentConfig.load(args.config) if args.config else ex.ExperimentConfig()
        d = json.loads(base.to_json())
        for flag, key in (("frames", "frames"), ("map_size", "map_size"), ("alpha", "alpha"),
                          ("cadence", "cadence")):
            if getattr(args, flag) is not None:
                d[key] = getattr(args, flag)
        sweep = args.command == "sweep-noise"
        for flag, key, grid in (("sigma_pose", "sigma_pose", "sigma_pose_grid"),
                                ("sigma_depth", "sigma_depth", "sigma_depth_grid")):
            vals = getattr(args, flag)
            if vals is None:
                continue
            if sweep:
                d[grid] = vals
            elif len(vals) != 1:
                parser.error(f"--{flag.replace('_', '-')} takes one value for {args.command}")
            else:
                d[key] = vals[0]
        config = ex.ExperimentConfig.from_dict(d)
    except (OSError, ValueError, TypeError) as exc:
        parser.error(f"invalid configuration: {exc}")
    if args.seed is not None and args.command in ("compare", "sweep-noise"):
        config = config.with_master_seed(args.seed)
    return config


def _scene_seed(args, config):
    return config.scene_seeds[0] if getattr(args, "scene_seed", None) is None else args.scene_seed


def _run_seed(args, config):
    return config.run_seeds[0] if args.seed is None else args.seed


def _out(args, name):
    os.makedirs(args.out, exist_ok=True)
    return os.path.join(args.out, name)


def _fmt(v):
    return ex._fmt(v)


# ---------------------------------------------------------------- commands


def cmd_gen_scene(args, config):
    seed = _scene_seed(args, config) if args.seed is None else args.seed
    spec, gt = ex.build_scene(config, seed)
    spec.save(_out(args, "scene.json"))
    export_heights_pgm(_out(args, "gt_heights.pgm"), gt.heights)
    export_labels_txt(_out(args, "gt_labels.txt"), gt.labels)
    print(f"scene seed {seed}: {len(spec.objects)} objects, grid {gt.labels.shape[1]}x{gt.labels.shape[0]}")


def cmd_render(args, config):
    spec, _ = ex.build_scene(config, _scene_seed(args, config))
    seed = _run_seed(args, config)
    frames = ex.render_frames(config, spec, seed)
    for f in frames:
        export_depth_pgm(_out(args, f"depth_{f.index:04d}.pgm"), f.depth)
        export_labels_pgm(_out(args, f"labels_{f.index:04d}.pgm"), f.labels)
    export_trajectory_csv(_out(args, "trajectory.csv"), [f.pose for f in frames])
    print(f"rendered {len(frames)} frames")


def _sequence(args, config, with_labeller):
    scene_seed = _scene_seed(args, config)
    run_seed = _run_seed(args, config)
    spec, gt = ex.build_scene(config, scene_seed)
    frames = ex.render_frames(config, spec, run_seed)
    if not frames:
        raise ValueError("run needs at least one frame (--frames >= 1)")
    noise = NoiseModel(config.sigma_pose, config.sigma_pose * config.rot_per_trans,
                       config.sigma_depth, rng_seed=run_seed)
    model = DecayModel(config.alpha, ex.NUM_CLASSES, config.distance)
    labeller = ex.view_labeller_for(config, run_seed) if with_labeller else None
    field = ex.new_field(config)
    snaps, log = run_sequence(field, frames, noise, labeller, config.cadence, model,
                              config.intrinsics())
    return gt, frames, field, snaps, log, run_seed, model


def cmd_run_view(args, config):
    gt, _, field, snaps, log, _, _ = _sequence(args, config, True)
    w, h = config.image_size
    with open(_out(args, "view_curve.csv"), "w") as fh:
        fh.write("frames,coverage,view_miou,view_pixevals\n")
        for s in snaps:
            fh.write(f"{s.frames},{_fmt(s.coverage)},"
                     f"{_fmt(mean_iou(s.labels, gt.labels, ex.NUM_CLASSES).mean)},{s.frames * w * h}\n")
    if args.wallclock:
        log.write_csv(_out(args, "timing.csv"))
    save_field(_out(args, "field.npz"), field)
    export_labels_txt(_out(args, "labels.txt"), argmax_labels(field))
    final = mean_iou(argmax_labels(field), gt.labels, ex.NUM_CLASSES).mean
    print(f"view-based mIoU after {len(log.rows)} frames: {final:.4f}")


def cmd_run_map(args, config):
    gt, frames, field, snaps, log, run_seed, model = _sequence(args, config, False)
    if config.sigma_pose > 0 or config.sigma_depth > 0:
        refs, _ = run_sequence(ex.new_field(config), frames, NoiseModel(), None, config.cadence,
                               model, config.intrinsics())
    else:
        refs = snaps
    plan = ex.map_plan(config)
    params = ex.labeller_params(config.map_labeller, run_seed)
    labellers = [OracleMapLabeller(gt.labels, np.where(r.observed, r.heights, np.nan), params)
                 for r in refs]
    results = []
    for snap, lab in zip(snaps, labellers):
        results.extend(run_map_eval([snap], lab, plan, config.coverage_threshold, args.jobs))
    passes = 0
    with open(_out(args, "map_curve.csv"), "w") as fh:
        fh.write("frames,coverage,skipped,map_miou,map_pixevals\n")
        for r in results:
            miou = float("nan")
            if not r.skipped:
                passes += 1
                miou = mean_iou(r.labels, gt.labels, ex.NUM_CLASSES).mean
            fh.write(f"{r.frames},{_fmt(r.coverage)},{int(r.skipped)},{_fmt(miou)},"
                     f"{passes * plan.pixel_evaluations()}\n")
    with open(_out(args, "tile_plan.json"), "w") as fh:
        fh.write(plan.to_json())
    if args.wallclock:
        log.write_csv(_out(args, "timing.csv"))
    save_field(_out(args, "field.npz"), field)
    done = [r for r in results if not r.skipped]
    if done:
        export_labels_txt(_out(args, "labels.txt"), done[-1].labels)
        final = mean_iou(done[-1].labels, gt.labels, ex.NUM_CLASSES).mean
        print(f"map-based mIoU after {done[-1].frames} frames: {final:.4f}")
    else:
        print(f"coverage never reached {config.coverage_threshold}; no map labelling done")


def _maybe_calibrate(args, config):
    if not args.calibrate:
        return config
    d = json.loads(config.to_json())
    d["view_labeller"]["base_accuracy"] = ex.calibrate_view_labeller(config)
    d["map_labeller"]["base_accuracy"] = ex.calibrate_map_labeller(config)
    config = ex.ExperimentConfig.from_dict(d)
    with open(_out(args, "calibrated_config.json"), "w") as fh:
        fh.write(config.to_json())
    return config


def cmd_compare(args, config):
    config = _maybe_calibrate(args, config)
    results = ex.run_comparison(config, args.jobs)
    ex.write_comparison_csv(_out(args, "comparison.csv"), results, wallclock=args.wallclock)
    rows = ex.mean_curves(results)
    ex.write_mean_csv(_out(args, "comparison_mean.csv"), rows)
    if args.wallclock:
        ex.write_time_curves_csv(_out(args, "curves_time.csv"), results)
        ex.write_timing_csv(_out(args, "timing.csv"), results)
    if not args.no_plot and rows:
        from .plotting import plot_comparison

        plot_comparison(rows, _out(args, "comparison.png"))
    final = [r for r in rows if r["scene"] == "all"]
    if final:
        f = final[-1]
        print(f"{len(results)} runs, {f['frames']} frames: view mIoU {f['view_miou']:.4f}, "
              f"map mIoU {f['map_miou']:.4f}")


def cmd_sweep(args, config):
    config = _maybe_calibrate(args, config)
    results = ex.run_noise_sweep(config, args.jobs)
    rows = ex.noise_table(results)
    ex.write_noise_csv(_out(args, "noise.csv"), rows)
    ex.write_noise_runs_csv(_out(args, "noise_runs.csv"), results)
    for name in ("view", "map"):
        ex.write_noise_matrix(_out(args, f"noise_{name}.dat"), rows, name,
                              config.sigma_pose_grid, config.sigma_depth_grid)
    if args.wallclock:
        ex.write_timing_csv(_out(args, "timing.csv"), results)
    if not args.no_plot and rows:
        from .plotting import plot_noise_heatmaps

        plot_noise_heatmaps(rows, config.sigma_pose_grid, config.sigma_depth_grid,
                            _out(args, "noise_heatmap.png"))
    print(f"{len(results)} runs over {len(rows) // 2} noise cells")


def cmd_rf(args, config):
    rx, ry = receptive_field(args.layers)
    print(rx if rx == ry else f"{rx} {ry}")
    if args.window is not None:
        win = [int(v) for v in args.window]
        if len(win) == 1:
            win = win * 2
        plan = plan_tiles((config.map_size, config.map_size), win[:2], (rx, ry))
        print(f"offsets {plan.offsets[0]} {plan.offsets[1]}, windows {plan.num_windows}")
        with open(_out(args, "tile_plan.json"), "w") as fh:
            fh.write(plan.to_json())


def cmd_export(args, config):
    field = load_field(args.field)
    export_heights_pgm(_out(args, "heights.pgm"), field.heights)
    export_heights_csv(_out(args, "heights.csv"), field.heights)
    export_posteriors_csv(_out(args, "posteriors.csv"), field)
    export_labels_txt(_out(args, "labels.txt"), argmax_labels(field))
    print(f"exported {field.width}x{field.height} field to {args.out}")


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    config = resolve_config(args, parser)
    if args.dry_run:
        resolved = json.loads(config.to_json())
        resolved["command"] = args.command
        resolved["out"] = args.out
        resolved["jobs"] = args.jobs
        print(json.dumps(resolved, indent=2, sort_keys=True))
        return 0
    try:
        args.func(args, config)
    except Exception as exc:  # report the cause, no traceback
        print(f"semheight {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
