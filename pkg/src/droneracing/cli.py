"""Command line interface: train, eval, sweep, gen-scene, render-depth."""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import harness, perception, world
from .config import apply_ablation, config_from_dict, load_config
from .curriculum import CurriculumStage, build_scene
from .perception import CameraModel
from .quat import from_yaw


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="droneracing",
        description="Obstacle-aware drone racing: simulation, training, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run curriculum PPO training from a config")
    p.add_argument("config", help="path to a YAML run config")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument(
        "--no-recurrent",
        action="store_true",
        help="replace the GRU core with a feed-forward layer",
    )
    p.add_argument(
        "--no-avoid-reward",
        action="store_true",
        help="drop the obstacle-avoidance reward term",
    )
    p.add_argument(
        "--one-step",
        action="store_true",
        help="skip the curriculum: train at final difficulty from the start",
    )
    p.add_argument("--run-dir", help="output directory (default: derived)")
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--track", help="track name or YAML (default: from checkpoint)")
    p.add_argument("--density", type=int, default=3, help="obstacles per section")
    p.add_argument(
        "--gate-range",
        type=float,
        default=1.0,
        help="gate displacement range in xy meters (z scales at 30 percent)",
    )
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--v-d", type=float, default=None, help="target speed")
    p.add_argument(
        "--stochastic", action="store_true", help="sample actions instead of the mean"
    )

    p = sub.add_parser("sweep", help="evaluate along a robustness axis")
    p.add_argument("checkpoint")
    p.add_argument("--axis", choices=("density", "gates"), required=True)
    p.add_argument("--track", help="track name or YAML (default: from checkpoint)")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--v-d", type=float, default=None)
    p.add_argument("--out", help="write reports as JSON here")

    p = sub.add_parser("gen-scene", help="generate an obstacle scene for a track")
    p.add_argument("track", help="track name or YAML path")
    p.add_argument("--density", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--gate-range", type=float, default=0.0)
    p.add_argument("--out", help="scene YAML output path")

    p = sub.add_parser("render-depth", help="render a depth image from a pose")
    p.add_argument("source", help="track name, track YAML, or scene YAML")
    p.add_argument(
        "--pose", nargs=4, type=float, required=True, metavar=("X", "Y", "Z", "YAW")
    )
    p.add_argument("--density", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="depth.pgm")
    p.add_argument("--noisy", action="store_true", help="write the noisy inverse-depth image")

    args = parser.parse_args(argv)
    return _dispatch(args)


def _dispatch(args):
    if args.command == "train":
        config = load_config(args.config)
        for flag, name in (
            (args.no_recurrent, "no_recurrent"),
            (args.no_avoid_reward, "no_avoid"),
            (args.one_step, "one_step"),
        ):
            if flag:
                config = apply_ablation(config, name)
        run_dir = harness.train(
            config, run_dir=args.run_dir, resume=args.resume, quiet=args.quiet
        )
        print(f"run directory: {run_dir}")
        return 0

    if args.command in ("eval", "sweep"):
        payload = harness.load_checkpoint(args.checkpoint)
        policy = harness.policy_from_checkpoint(payload)
        ckpt_config = config_from_dict(payload["config"])
        track = args.track or ckpt_config.track
        v_d = args.v_d if args.v_d is not None else ckpt_config.eval.v_d
        if args.command == "eval":
            report = harness.evaluate(
                policy,
                track,
                density=args.density,
                gate_xy=args.gate_range,
                gate_z=0.3 * args.gate_range,
                v_d=v_d,
                trials=args.trials,
                seed=args.seed,
                deterministic=not args.stochastic,
            )
            print(json.dumps(report.as_dict(), indent=2))
            return 0
        reports = harness.sweep(
            policy, track, args.axis, trials=args.trials, seed=args.seed, v_d=v_d
        )
        print(harness.sweep_table(reports, args.axis))
        if args.out:
            Path(args.out).write_text(
                json.dumps([r.as_dict() for r in reports], indent=2)
            )
            print(f"wrote {args.out}")
        return 0

    if args.command == "gen-scene":
        track = world.load_track(args.track)
        stage = CurriculumStage(
            0, 0.0, args.density, args.gate_range, 0.3 * args.gate_range, False
        )
        scene = build_scene(track, stage, args.seed)
        out = args.out or f"scene_{track.name}_d{args.density}_s{args.seed}.yaml"
        world.save_scene(scene, out)
        print(
            f"wrote {out}: {len(scene.obstacles)} obstacles, "
            f"hash {scene.scene_hash()}"
        )
        return 0

    if args.command == "render-depth":
        scene = _load_scene_source(args.source, args.density, args.seed)
        camera = CameraModel()
        x, y, z, yaw = args.pose
        depth = perception.render_depth(
            np.array([x, y, z]), from_yaw(yaw), scene, camera
        )
        if args.noisy:
            rng = np.random.default_rng(args.seed)
            img = perception.to_observation(depth, camera, rng)
            perception.write_pgm(img * camera.max_range, args.out, camera.max_range)
        else:
            perception.write_pgm(depth, args.out, camera.max_range)
        center = depth[camera.height // 2, camera.width // 2]
        print(
            f"wrote {args.out}; center depth {center:.3f} m, "
            f"min {depth.min():.3f} m, max {depth.max():.3f} m"
        )
        return 0

    raise AssertionError(f"unhandled command {args.command}")


def _load_scene_source(source, density, seed):
    path = Path(source)
    if path.suffix in (".yaml", ".yml") and path.exists():
        data = path.read_text()
        if "obstacles" in data:
            return world.load_scene(path)
    track = world.load_track(source)
    if density > 0:
        stage = CurriculumStage(0, 0.0, density, 0.0, 0.0, False)
        return build_scene(track, stage, seed)
    return world.Scene(track, [], seed=seed, density=0)


if __name__ == "__main__":
    sys.exit(main())
