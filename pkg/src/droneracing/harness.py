"""Training driver, checkpointing, evaluation, and parameter sweeps.

A training run owns one directory holding the resolved config, a
metrics JSONL stream (one record per rollout, no wall-clock fields, so
identical runs produce identical files), and checkpoints that carry
everything needed to resume exactly: model and optimizer state, the
curriculum position, and all RNG streams, captured at a rollout
boundary.
"""

import json
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .config import config_hash, config_to_dict, save_config
from .curriculum import Curriculum, CurriculumStage, build_scene, default_stages
from .dynamics import QuadParams
from .env import RacingEnv
from .perception import CameraModel
from .policy import ActorCritic, PolicyConfig
from .trainer import collect, lr_schedule, obs_to_tensors, ppo_update
from .world import load_track

CHECKPOINT_MAGIC = "droneracing.checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, config, policy, optimizer=None, trainer_state=None):
    payload = {
        "magic": CHECKPOINT_MAGIC,
        "version": CHECKPOINT_VERSION,
        "config": config_to_dict(config),
        "config_hash": config_hash(config),
        "policy_config": policy.config.to_dict(),
        "model_state": policy.state_dict(),
        "optimizer_state": optimizer.state_dict() if optimizer else None,
        "trainer_state": trainer_state,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    return path


def load_checkpoint(path):
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("magic") != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint of this package")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {payload.get('version')}"
        )
    return payload


def policy_from_checkpoint(payload):
    policy = ActorCritic(PolicyConfig.from_dict(payload["policy_config"]))
    policy.load_state_dict(payload["model_state"])
    policy.eval()
    return policy


def _curriculum_stages(section):
    if section.stages:
        stages = [CurriculumStage(**s) for s in section.stages]
    else:
        stages = default_stages()
    if not section.enabled:
        # Single-stage training at the final difficulty.
        last = stages[-1]
        stages = [
            CurriculumStage(
                last.level,
                section.v_d_target,
                last.density,
                last.gate_xy,
                last.gate_z,
                last.vd_enabled,
            )
        ]
    return stages


def _build_policy_config(config, quad):
    return PolicyConfig(
        use_depth=config.use_depth,
        recurrent=config.recurrent,
        thrust_max=quad.thrust_axis_max,
        omega_max=quad.omega_max,
    )


def train(config, run_dir=None, resume=None, quiet=False):
    """Run curriculum PPO training per the config; returns the run dir.

    resume takes a checkpoint path saved by this function and continues
    the run exactly as if it had never stopped; the checkpoint's config
    hash must match the given config.
    """
    config.validate()
    track = load_track(config.track)
    quad = QuadParams()
    camera = CameraModel()

    run_dir = Path(run_dir or Path(config.out_dir) / _default_run_name(config))
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "checkpoints").mkdir(exist_ok=True)
    save_config(config, run_dir / "config.yaml")
    metrics_path = run_dir / "metrics.jsonl"

    stages = _curriculum_stages(config.curriculum)
    curriculum = Curriculum(
        track,
        n_envs=config.n_envs,
        n_scenes=config.n_scenes,
        seed=config.seed,
        stages=stages,
        v_d_target=config.curriculum.v_d_target,
        v_d_increment=config.curriculum.v_d_increment,
        threshold=config.curriculum.threshold,
        window=config.curriculum.window,
    )

    torch.manual_seed(config.seed)
    policy = ActorCritic(_build_policy_config(config, quad))
    optimizer = torch.optim.Adam(
        policy.parameters(), lr=config.ppo.lr_start, eps=1e-5
    )
    sample_gen = torch.Generator().manual_seed(config.seed + 1)

    env = RacingEnv(
        _initial_scenes(config, track),
        quad=quad,
        camera=camera,
        reward=config.reward,
        v_d=curriculum.stage.v_d,
        vd_enabled=curriculum.stage.vd_enabled,
        use_depth=config.use_depth,
        auto_reset=True,
        dt=config.env.dt,
        substeps=config.env.substeps,
        max_steps=config.env.max_steps,
        jitter=config.env.jitter,
        seed=config.seed + 2,
    )

    batch = config.n_envs * config.ppo.rollout_steps
    total_rollouts = max(1, -(-config.total_steps // batch))
    start_rollout = 0
    env_steps = 0
    metrics_mode = "w"

    if resume is not None:
        payload = load_checkpoint(resume)
        if payload["config_hash"] != config_hash(config):
            raise CheckpointError(
                "checkpoint was produced by a different config; refusing to resume"
            )
        policy.load_state_dict(payload["model_state"])
        optimizer.load_state_dict(payload["optimizer_state"])
        ts = payload["trainer_state"]
        if ts is None:
            raise CheckpointError("checkpoint has no trainer state; cannot resume")
        start_rollout = ts["rollout"]
        env_steps = ts["env_steps"]
        curriculum.load_state_dict(ts["curriculum"])
        env.rng.bit_generator.state = ts["env_rng"]
        sample_gen.set_state(torch.as_tensor(ts["sample_gen"], dtype=torch.uint8))
        metrics_mode = "a"

    metrics_file = open(metrics_path, metrics_mode)
    try:
        for rollout in range(start_rollout, total_rollouts):
            assignment = curriculum.refresh_scenes()
            stage = curriculum.stage
            env.set_scenes(assignment.scenes_per_env())
            env.set_stage(stage.v_d, stage.vd_enabled)
            obs = env.reset()
            hidden = policy.initial_hidden(config.n_envs)

            buffer, records, term_sums, obs, hidden, bootstrap = collect(
                env, policy, obs, hidden, config.ppo.rollout_steps, sample_gen
            )
            curriculum.record_episodes(records)
            event = curriculum.maybe_advance()
            buffer.compute_gae(bootstrap, config.ppo.gamma, config.ppo.gae_lambda)
            lr = lr_schedule(
                env_steps / config.total_steps, config.ppo.lr_start, config.ppo.lr_end
            )
            stats = ppo_update(
                policy, optimizer, buffer, config.ppo, lr, sample_gen
            )
            env_steps += batch

            line = _metrics_line(
                rollout, env_steps, stage, curriculum, assignment, records,
                term_sums, stats, lr, batch, event,
            )
            eval_report = None
            if (
                config.eval.every_rollouts > 0
                and (rollout + 1) % config.eval.every_rollouts == 0
            ):
                eval_report = evaluate(
                    policy,
                    track,
                    density=config.eval.density,
                    gate_xy=config.eval.gate_xy,
                    gate_z=config.eval.gate_z,
                    v_d=config.eval.v_d,
                    trials=config.eval.trials,
                    seed=config.seed + 3,
                    use_depth=config.use_depth,
                    quad=quad,
                    camera=camera,
                    max_steps=config.env.max_steps,
                )
                line["eval"] = {
                    "success_rate": eval_report.success_rate,
                    "mean_lap_time": eval_report.mean_lap_time,
                }
            metrics_file.write(json.dumps(line) + "\n")
            metrics_file.flush()
            if not quiet:
                _print_progress(line)

            last = rollout + 1 == total_rollouts
            stop = (
                eval_report is not None
                and config.eval.stop_sr > 0
                and eval_report.success_rate >= config.eval.stop_sr
            )
            if (
                last
                or stop
                or (
                    config.checkpoint_every > 0
                    and (rollout + 1) % config.checkpoint_every == 0
                )
            ):
                trainer_state = {
                    "rollout": rollout + 1,
                    "env_steps": env_steps,
                    "curriculum": curriculum.state_dict(),
                    "env_rng": env.rng.bit_generator.state,
                    "sample_gen": sample_gen.get_state().numpy(),
                }
                save_checkpoint(
                    run_dir / "checkpoints" / f"rollout_{rollout + 1:06d}.pt",
                    config, policy, optimizer, trainer_state,
                )
                save_checkpoint(
                    run_dir / "checkpoints" / "final.pt",
                    config, policy, optimizer, trainer_state,
                )
            if stop:
                break
    finally:
        metrics_file.close()
    return run_dir


def _initial_scenes(config, track):
    # Placeholder scenes so the env can be constructed; the train loop
    # swaps real curriculum scenes in before the first step.
    scene = build_scene(
        track,
        CurriculumStage(1, 3.0, 0, 0.0, 0.0, True),
        seed=config.seed,
    )
    return [scene] * config.n_envs


def _default_run_name(config):
    return f"{Path(config.track).stem}_s{config.seed}_{config_hash(config)}"


def _metrics_line(
    rollout, env_steps, stage, curriculum, assignment, records, term_sums,
    stats, lr, batch, event,
):
    episodes = len(records)
    successes = sum(r["success"] for r in records)
    lap_times = [r["lap_time"] for r in records if r["lap_time"] is not None]
    reasons = Counter(r["reason"] for r in records)
    line = {
        "rollout": rollout + 1,
        "env_steps": env_steps,
        "level": stage.level,
        "v_d": stage.v_d,
        "vd_enabled": stage.vd_enabled,
        "density": stage.density,
        "window_sr": curriculum.success_rate,
        "episodes": episodes,
        "successes": successes,
        "done_reasons": dict(sorted(reasons.items())),
        "mean_lap_time": float(np.mean(lap_times)) if lap_times else None,
        "reward_terms": {k: v / batch for k, v in sorted(term_sums.items())},
        "lr": lr,
        "scene_hashes": sorted({s.scene_hash() for s in assignment.scenes}),
        "scene_group_sizes": assignment.group_sizes().tolist(),
        "curriculum_event": event,
        **{k: float(v) for k, v in stats.items()},
    }
    return line


def _print_progress(line):
    sr = line["window_sr"]
    print(
        f"rollout {line['rollout']:4d}  steps {line['env_steps']:>10d}  "
        f"level {line['level']}  v_d {line['v_d']:.1f}  "
        f"episodes {line['episodes']:4d}  "
        f"window_sr {sr if sr is None else round(sr, 3)}  "
        f"reward {line['reward_terms'].get('total', 0.0):+.4f}",
        flush=True,
    )


# -- evaluation ---------------------------------------------------------


@dataclass
class EvalReport:
    track: str
    trials: int
    density: int
    gate_xy: float
    gate_z: float
    v_d: float
    seed: int
    success_rate: float
    mean_lap_time: float
    lap_times: list
    done_reasons: dict
    mean_gates_passed: float

    def as_dict(self):
        return asdict(self)


def evaluate(
    policy,
    track,
    *,
    density=3,
    gate_xy=1.0,
    gate_z=0.3,
    v_d=10.0,
    trials=10,
    seed=0,
    use_depth=None,
    quad=None,
    camera=None,
    max_steps=1024,
    deterministic=True,
):
    """Fly independent trials and report success rate and lap time.

    Each trial gets its own seeded scene at the requested difficulty.
    Success means completing the lap; lap time is the simulated time
    from the standing start to the final gate passage, averaged over
    successful trials only (None without successes).
    """
    if isinstance(track, (str, Path)):
        track = load_track(track)
    quad = quad or QuadParams()
    camera = camera or CameraModel()
    use_depth = policy.config.use_depth if use_depth is None else use_depth
    stage = CurriculumStage(0, v_d, density, gate_xy, gate_z, False)
    root = np.random.SeedSequence(entropy=seed)
    seeds = [int(s.generate_state(1)[0]) for s in root.spawn(trials)]
    scenes = [build_scene(track, stage, s) for s in seeds]
    env = RacingEnv(
        scenes,
        quad=quad,
        camera=camera,
        v_d=v_d,
        vd_enabled=False,
        use_depth=use_depth,
        auto_reset=False,
        max_steps=max_steps,
        seed=seed,
    )
    obs = env.reset()
    hidden = policy.initial_hidden(trials)
    records = {}
    done = np.zeros(trials, dtype=bool)
    policy.eval()
    for _ in range(max_steps):
        state_t, depth_t = obs_to_tensors(obs)
        out = policy.act(state_t, depth_t, hidden, deterministic=deterministic)
        hidden = out["hidden"]
        action = out["action"].numpy().astype(float)
        # Finished envs are frozen; send them a harmless command.
        action[done] = 0.0
        obs, _, done, _, info = env.step(action)
        for rec in info["episodes"]:
            records[rec["env"]] = rec
        if done.all():
            break
    lap_times = sorted(
        r["lap_time"] for r in records.values() if r["lap_time"] is not None
    )
    reasons = Counter(r["reason"] for r in records.values())
    gates = [r["gates_passed"] for r in records.values()]
    return EvalReport(
        track=track.name,
        trials=trials,
        density=density,
        gate_xy=gate_xy,
        gate_z=gate_z,
        v_d=v_d,
        seed=seed,
        success_rate=len(lap_times) / trials,
        mean_lap_time=float(np.mean(lap_times)) if lap_times else None,
        lap_times=[float(t) for t in lap_times],
        done_reasons=dict(sorted(reasons.items())),
        mean_gates_passed=float(np.mean(gates)) if gates else 0.0,
    )


DENSITY_SWEEP = (2, 3, 4, 5)
GATE_RANGE_SWEEP = (0.3, 0.5, 0.7, 1.0)


def sweep(policy, track, axis, *, trials=10, seed=0, v_d=10.0, **kwargs):
    """Evaluate along one robustness axis.

    axis "density" varies obstacles per section at full gate
    randomization; axis "gates" varies the gate displacement range (z
    scaled at 30 percent of xy, matching the training ratio) at the
    default density.
    """
    reports = []
    if axis == "density":
        for density in DENSITY_SWEEP:
            reports.append(
                evaluate(
                    policy, track, density=density, gate_xy=1.0, gate_z=0.3,
                    v_d=v_d, trials=trials, seed=seed, **kwargs,
                )
            )
    elif axis == "gates":
        for r in GATE_RANGE_SWEEP:
            reports.append(
                evaluate(
                    policy, track, density=3, gate_xy=r, gate_z=0.3 * r,
                    v_d=v_d, trials=trials, seed=seed, **kwargs,
                )
            )
    else:
        raise ValueError("axis must be 'density' or 'gates'")
    return reports


def sweep_table(reports, axis):
    label = "density" if axis == "density" else "gate_xy"
    lines = [f"{label:>8}  {'SR':>5}  {'LT':>7}  reasons"]
    for rep in reports:
        key = rep.density if axis == "density" else rep.gate_xy
        lt = f"{rep.mean_lap_time:.2f}s" if rep.mean_lap_time else "-"
        reasons = ", ".join(f"{k}:{v}" for k, v in rep.done_reasons.items())
        lines.append(f"{key:>8}  {rep.success_rate:>5.2f}  {lt:>7}  {reasons}")
    return "\n".join(lines)
