"""Run configuration: YAML loading, validation, hashing, ablations.

A run config fully determines a training run (given the package
version): platform limits, reward weights, curriculum stages, PPO
hyperparameters, and seeds.  Its canonical hash ties checkpoints to the
exact configuration that produced them.
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace

import yaml

from .env import RewardParams
from .trainer import PPOConfig


@dataclass
class EnvSection:
    max_steps: int = 1024
    dt: float = 1.0 / 120.0
    substeps: int = 4
    jitter: float = 0.5


@dataclass
class CurriculumSection:
    # With enabled false, training runs a single stage at the final
    # difficulty (the last stage with v_d already at v_d_target).
    enabled: bool = True
    stages: list = field(default_factory=list)  # empty -> standard three stages
    v_d_target: float = 10.0
    v_d_increment: float = 1.0
    threshold: float = 0.8
    window: int = 100


@dataclass
class EvalSection:
    trials: int = 10
    every_rollouts: int = 0  # 0 disables periodic evaluation
    density: int = 3
    gate_xy: float = 1.0
    gate_z: float = 0.3
    v_d: float = 10.0
    stop_sr: float = 0.0  # stop early once periodic eval reaches this SR


@dataclass
class RunConfig:
    track: str = "s_shaped"
    seed: int = 0
    total_steps: int = 100_000_000
    n_envs: int = 100
    n_scenes: int = 10
    out_dir: str = "runs"
    run_name: str = ""
    use_depth: bool = True
    recurrent: bool = True
    checkpoint_every: int = 50  # rollouts; 0 saves only the final one
    env: EnvSection = field(default_factory=EnvSection)
    reward: RewardParams = field(default_factory=RewardParams)
    curriculum: CurriculumSection = field(default_factory=CurriculumSection)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    eval: EvalSection = field(default_factory=EvalSection)

    def validate(self):
        if self.n_envs < 1 or self.n_scenes < 1:
            raise ValueError("n_envs and n_scenes must be positive")
        if self.n_scenes > self.n_envs:
            raise ValueError("cannot have more scenes than envs")
        self.ppo.validate(self.n_envs)
        return self


def _from_dict(cls, data, path="config"):
    if not isinstance(data, dict):
        raise ValueError(f"{path}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ValueError(f"{path}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = known[name]
        if is_dataclass(f.type) or (
            isinstance(f.default_factory, type) and is_dataclass(f.default_factory)
        ):
            sub_cls = f.default_factory
            kwargs[name] = _from_dict(sub_cls, value, f"{path}.{name}")
        else:
            kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(data):
    return _from_dict(RunConfig, data or {}).validate()


def load_config(path):
    with open(path) as f:
        data = yaml.safe_load(f)
    try:
        return config_from_dict(data)
    except (ValueError, TypeError) as exc:
        raise ValueError(f"{path}: {exc}") from exc


def config_to_dict(config):
    return asdict(config)


def save_config(config, path):
    with open(path, "w") as f:
        yaml.safe_dump(config_to_dict(config), f, sort_keys=False)


def config_hash(config):
    """Stable digest of the full configuration."""
    blob = json.dumps(config_to_dict(config), sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


ABLATIONS = ("no_recurrent", "no_avoid", "one_step")


def apply_ablation(config, name):
    """Return a copy of the config with exactly one factor changed."""
    if name == "no_recurrent":
        return replace(config, recurrent=False)
    if name == "no_avoid":
        return replace(config, reward=replace(config.reward, avoid=0.0))
    if name == "one_step":
        return replace(config, curriculum=replace(config.curriculum, enabled=False))
    raise ValueError(f"unknown ablation {name!r}; choose from {ABLATIONS}")
