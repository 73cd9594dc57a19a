"""Command-line entry points: synth-gen, run, eval, bench.

Exit codes: 0 success, 1 input error, 2 internal assertion failure.
"""

from __future__ import annotations

import argparse
import json
import shutil
import sys
from pathlib import Path

from . import metrics, pipeline, surface, synth
from .volume import GridSpec


def _add_capture_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--frames", type=int, default=None, help="number of frames to synthesize")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--width", type=int, default=None)
    p.add_argument("--height", type=int, default=None)
    p.add_argument("--focal", type=float, default=None)
    p.add_argument("--prior-points", type=int, default=None, dest="n_prior_points")
    p.add_argument("--prior-noise", type=float, default=None, dest="prior_depth_noise")
    p.add_argument("--orbit-radius", type=float, default=None)
    p.add_argument("--orbit-z-amplitude", type=float, default=None, dest="orbit_z_amplitude")
    p.add_argument("--orbit-z-cycles", type=int, default=None, dest="orbit_z_cycles")


def _config_from_args(args, **extra) -> pipeline.RunConfig:
    overrides = {}
    for name in (
        "frames", "seed", "width", "height", "focal", "n_prior_points",
        "prior_depth_noise", "orbit_radius", "orbit_z_amplitude", "orbit_z_cycles",
        "mode", "workers", "out", "scene", "data", "weights", "theta",
    ):
        value = getattr(args, name, None)
        if value is None:
            continue
        key = {
            "frames": "n_frames",
            "out": "out_dir",
            "scene": "scene_path",
            "data": "dataset_dir",
            "weights": "weights_path",
        }.get(name, name)
        overrides[key] = value
    overrides.update(extra)
    if getattr(args, "config", None):
        return pipeline.RunConfig.from_json(args.config, **overrides)
    return pipeline.RunConfig(**overrides)


def cmd_synth_gen(args) -> int:
    config = _config_from_args(args)
    if config.scene_path is None:
        raise ValueError("synth-gen needs --scene")
    scene = synth.load_scene(config.scene_path)
    dataset = pipeline.synthesize_dataset(config, scene)
    out = Path(args.out)
    pipeline.write_dataset(dataset, out)
    shutil.copy(config.scene_path, out / "scene.json")
    spec = GridSpec((0.0, 0.0, 0.0), config.voxel_sizes)
    gt_mesh = surface.marching_cubes(synth.gt_tsdf(scene, spec, spec.finest, config.truncation), spec)
    surface.save_ply(out / "gt_mesh.ply", gt_mesh)
    print(f"wrote {len(dataset)} frames, gt mesh with {len(gt_mesh.triangles)} triangles to {out}")
    return 0


def cmd_run(args) -> int:
    config = _config_from_args(args)
    if config.dataset_dir is None and config.scene_path is None:
        raise ValueError("run needs --data or --scene")
    if args.classical_source:
        config.classical_source = args.classical_source
    result = pipeline.run_pipeline(config)
    print(f"fragments: {len(result.fragments)}  frames: {result.timing.frames}")
    print(f"mesh: {len(result.mesh.vertices)} vertices, {len(result.mesh.triangles)} triangles")
    print(f"fps: {result.timing.fps:.2f}")
    if config.mode != "classical" and not result.containment_ok:
        print("coarse-to-fine containment violated", file=sys.stderr)
        return 2
    return 0


def cmd_eval(args) -> int:
    pred = surface.load_ply(args.pred)
    gt = surface.load_ply(args.gt_mesh)
    dataset = None
    if args.data:
        config = pipeline.RunConfig(dataset_dir=args.data)
        dataset = pipeline.load_dataset(config)
    report = pipeline.evaluate(pred, gt, dataset, tau=args.tau, seed=args.seed or 0)
    if args.out:
        metrics.save_report(args.out, report)
    printable = {k: v for k, v in report.items() if k != "per_view"}
    print(json.dumps(printable, indent=2, sort_keys=True))
    return 0


def cmd_bench(args) -> int:
    config = _config_from_args(args)
    if config.scene_path is None:
        raise ValueError("bench needs --scene")
    scales = [float(s) for s in args.scales.split(",")]
    report = pipeline.bench(config, scales)
    if args.out:
        metrics.save_report(args.out, report)
    for row in report["rows"]:
        print(f"scale {row['scale']:.3f}: {row['active_voxels']} voxels, gstf {row['gstf_ms']:.1f} ms")
    for pair in report["pairs"]:
        print(f"voxel ratio {pair['voxel_ratio']:.2f} -> gstf time ratio {pair['gstf_time_ratio']:.2f}"
              f" ({'ok' if pair['ok'] else 'OVER BUDGET'})")
    if not report["ratio_ok"]:
        print("gstf scaling budget exceeded", file=sys.stderr)
        return 2
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="monofusion",
                                     description="incremental monocular 3D reconstruction")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", help="render a synthetic dataset from a scene file")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="JSON config file")
    _add_capture_args(p)
    p.set_defaults(fn=cmd_synth_gen)

    p = sub.add_parser("run", help="run the reconstruction pipeline")
    p.add_argument("--data", default=None, help="dataset directory")
    p.add_argument("--scene", default=None, help="scene file (synthesize on the fly)")
    p.add_argument("--mode", default=None,
                   choices=["learned", "averaging-ablation", "classical-oracle"])
    p.add_argument("--classical-source", default=None, choices=["dense", "priors"],
                   dest="classical_source")
    p.add_argument("--out", default=None)
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--weights", default=None, help="SSTW weight file")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--theta", type=float, default=None)
    _add_capture_args(p)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("eval", help="evaluate a predicted mesh")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt-mesh", required=True, dest="gt_mesh")
    p.add_argument("--data", default=None, help="dataset dir for 2D depth metrics")
    p.add_argument("--tau", type=float, default=metrics.TAU_DEFAULT)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench", help="scaling study over scene sizes")
    p.add_argument("--scene", required=True)
    p.add_argument("--scales", required=True, help="comma-separated scene scales")
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--mode", default=None,
                   choices=["learned", "averaging-ablation", "classical-oracle"])
    p.add_argument("--workers", type=int, default=None)
    _add_capture_args(p)
    p.set_defaults(fn=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except AssertionError as exc:
        print(f"internal assertion failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
