"""Training curriculum and multi-scene assignment.

Difficulty rises in discrete stages (target speed, obstacle density,
gate randomization, speed-penalty gating).  A stage advances when the
success rate over a sliding episode window clears a threshold; on the
final stage the target speed keeps ramping in fixed increments until it
reaches the configured top speed.  Scenes are regenerated from fresh
seeds every refresh and spread over the envs round robin, so each
policy update sees several layouts at once.
"""

from collections import deque
from dataclasses import dataclass

import numpy as np

from .world import ShapeSpec, generate_obstacles, randomize_track


@dataclass(frozen=True)
class CurriculumStage:
    """One difficulty setting of the training distribution."""

    level: int
    v_d: float
    density: int
    gate_xy: float
    gate_z: float
    vd_enabled: bool


def default_stages(v_d_start=4.0):
    """The standard three stages: learn the track, add obstacles, go fast.

    The last stage starts at v_d_start; the curriculum ramps it further.
    """
    return [
        CurriculumStage(1, 3.0, 0, 0.0, 0.0, True),
        CurriculumStage(2, 3.0, 2, 0.0, 0.0, True),
        CurriculumStage(3, v_d_start, 3, 1.0, 0.3, False),
    ]


def build_scene(track, stage, seed, shape_spec=None):
    """Materialize one scene at the stage difficulty, deterministically.

    Gate displacement and obstacle sampling use separate streams derived
    from the seed, so the same seed always gives the same scene.
    """
    scene_track = track
    if stage.gate_xy > 0.0 or stage.gate_z > 0.0:
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=seed, spawn_key=(1,))
        )
        scene_track = randomize_track(track, stage.gate_xy, stage.gate_z, rng)
    return generate_obstacles(
        scene_track, stage.density, shape_spec or ShapeSpec(), seed=seed
    )


@dataclass
class SceneAssignment:
    """Scenes for one rollout plus the env -> scene mapping."""

    scenes: list
    env_scene: np.ndarray

    def scenes_per_env(self):
        return [self.scenes[j] for j in self.env_scene]

    def group_sizes(self):
        return np.bincount(self.env_scene, minlength=len(self.scenes))


def assign_scenes(track, stage, n_envs, n_scenes, seeds, shape_spec=None):
    """Build n_scenes scenes from the given seeds and deal them out
    round robin over the envs."""
    if len(seeds) != n_scenes:
        raise ValueError("need one seed per scene")
    scenes = [build_scene(track, stage, int(s), shape_spec) for s in seeds]
    env_scene = np.arange(n_envs) % n_scenes
    return SceneAssignment(scenes=scenes, env_scene=env_scene)


class Curriculum:
    """Stage scheduler with success-rate gating and scene refresh."""

    def __init__(
        self,
        track,
        *,
        n_envs,
        n_scenes,
        seed=0,
        stages=None,
        v_d_target=10.0,
        v_d_increment=1.0,
        threshold=0.8,
        window=100,
        shape_spec=None,
    ):
        self.track = track
        self.n_envs = int(n_envs)
        self.n_scenes = int(n_scenes)
        self.seed = int(seed)
        self.stages = list(stages) if stages is not None else default_stages()
        self.v_d_target = float(v_d_target)
        self.v_d_increment = float(v_d_increment)
        self.threshold = float(threshold)
        self.window = int(window)
        self.shape_spec = shape_spec or ShapeSpec()
        self.stage_index = 0
        self.v_d_current = self.stages[0].v_d
        self.results = deque(maxlen=self.window)
        self.refresh_count = 0
        self.completed = False

    @property
    def stage(self):
        base = self.stages[self.stage_index]
        if base.v_d != self.v_d_current:
            base = CurriculumStage(
                base.level,
                self.v_d_current,
                base.density,
                base.gate_xy,
                base.gate_z,
                base.vd_enabled,
            )
        return base

    @property
    def success_rate(self):
        if not self.results:
            return None
        return float(np.mean(self.results))

    def record_episode(self, success):
        self.results.append(bool(success))

    def record_episodes(self, records):
        for rec in records:
            self.record_episode(rec["success"])

    def maybe_advance(self):
        """Advance difficulty when the success window clears the threshold.

        Returns a description of the transition, or None.  On the final
        stage the target speed ramps until v_d_target, after which the
        curriculum reports completion.
        """
        if len(self.results) < self.window or self.completed:
            return None
        if np.mean(self.results) < self.threshold:
            return None
        last = self.stage_index == len(self.stages) - 1
        if not last:
            self.stage_index += 1
            self.v_d_current = self.stages[self.stage_index].v_d
            self.results.clear()
            return f"stage {self.stage_index + 1} (level {self.stage.level})"
        if self.v_d_current + 1e-9 < self.v_d_target:
            self.v_d_current = min(
                self.v_d_current + self.v_d_increment, self.v_d_target
            )
            self.results.clear()
            return f"v_d {self.v_d_current:g}"
        self.completed = True
        return "completed"

    def _scene_seeds(self):
        root = np.random.SeedSequence(
            entropy=self.seed, spawn_key=(self.refresh_count,)
        )
        return [int(s.generate_state(1)[0]) for s in root.spawn(self.n_scenes)]

    def refresh_scenes(self):
        """New scenes for the next rollout at the current difficulty."""
        seeds = self._scene_seeds()
        self.refresh_count += 1
        return assign_scenes(
            self.track,
            self.stage,
            self.n_envs,
            self.n_scenes,
            seeds,
            self.shape_spec,
        )

    # -- checkpoint support --------------------------------------------

    def state_dict(self):
        return {
            "stage_index": self.stage_index,
            "v_d_current": self.v_d_current,
            "results": list(self.results),
            "refresh_count": self.refresh_count,
            "completed": self.completed,
        }

    def load_state_dict(self, state):
        self.stage_index = int(state["stage_index"])
        self.v_d_current = float(state["v_d_current"])
        self.results = deque(state["results"], maxlen=self.window)
        self.refresh_count = int(state["refresh_count"])
        self.completed = bool(state["completed"])
