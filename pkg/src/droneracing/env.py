"""Vectorized drone racing environment.

Each of the n parallel drones flies in its own scene (scenes may be
shared between envs; shared scenes are queried in one batch).  Physics
runs at a fine step with an action held over several substeps, so the
policy acts at the control rate.  Episodes end on collision, lap
completion, timeout, or numerical divergence.
"""

import enum
from dataclasses import dataclass, fields

import numpy as np

from . import dynamics, perception, quat
from .dynamics import QuadParams, QuadState
from .perception import CameraModel
from .world import gate_crossings

STATE_DIM = 17


class DoneReason(enum.IntEnum):
    RUNNING = 0
    CRASH = 1
    LAP_COMPLETE = 2
    TIMEOUT = 3
    DIVERGENCE = 4


@dataclass
class RewardParams:
    """Weights of the racing reward terms.

    Penalty weights are negative.  avoid_offset keeps the proximity
    penalty finite at contact.  With overspeed_only, the speed penalty
    activates only above the target speed; otherwise it is two sided.
    """

    prog: float = 0.9
    theta: float = 0.05
    cmd: float = -0.005
    cmd_delta: float = -0.0025
    overspeed: float = -0.05
    avoid: float = -0.01
    gate_pass: float = 5.0
    crash: float = -4.0
    avoid_offset: float = 0.1
    overspeed_only: bool = True


@dataclass
class RewardBreakdown:
    """Per-term reward values; total is their sum in field order."""

    prog: np.ndarray
    theta: np.ndarray
    cmd: np.ndarray
    vd: np.ndarray
    avoid: np.ndarray
    pass_: np.ndarray
    crash: np.ndarray
    total: np.ndarray

    def as_dict(self):
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["pass"] = out.pop("pass_")
        return out


def wrap_angle(a):
    """Wrap angles to (-pi, pi]."""
    return np.pi - np.mod(np.pi - a, 2.0 * np.pi)


def compute_reward(
    d_prev,
    d_curr,
    yaw,
    yaw_to_gate,
    speed,
    v_d,
    d_col,
    action,
    prev_action,
    passed,
    crashed,
    params,
    vd_enabled=True,
):
    """Evaluate all reward terms for a batch of transitions.

    d_prev and d_curr are distances to the gate targeted at the start of
    the step, so progress telescopes between gate passages.  passed and
    crashed are this step's event flags.
    """
    prog = params.prog * (d_prev - d_curr)
    misalign = np.abs(wrap_angle(yaw - yaw_to_gate))
    theta = params.theta * np.exp(-misalign)
    cmd = params.cmd * np.linalg.norm(action, axis=-1) + params.cmd_delta * (
        np.linalg.norm(action - prev_action, axis=-1)
    )
    if vd_enabled:
        over = speed - v_d
        if params.overspeed_only:
            over = np.maximum(over, 0.0)
        else:
            over = np.abs(over)
        vd = params.overspeed * over
    else:
        vd = np.zeros_like(speed)
    avoid = params.avoid / (d_col + params.avoid_offset)
    pass_r = params.gate_pass * passed.astype(float)
    crash_r = params.crash * crashed.astype(float)
    total = prog + theta + cmd + vd + avoid + pass_r + crash_r
    return RewardBreakdown(prog, theta, cmd, vd, avoid, pass_r, crash_r, total)


class RacingEnv:
    """Batch of racing episodes with shared-scene query batching.

    Actions are physical commands: mass-normalized collective thrust and
    body rates, clipped to the platform limits.  Observations are a 17-d
    state vector (gate-relative positions for the next two gates, body
    velocity, target speed, attitude quaternion, body rates) plus an
    optional noisy inverse-depth image.
    """

    def __init__(
        self,
        scenes,
        *,
        quad=None,
        camera=None,
        reward=None,
        v_d=3.0,
        vd_enabled=True,
        use_depth=True,
        auto_reset=True,
        dt=1.0 / 120.0,
        substeps=4,
        max_steps=1024,
        jitter=0.5,
        seed=0,
    ):
        if not isinstance(scenes, (list, tuple)):
            scenes = [scenes]
        self.quad = quad or QuadParams()
        self.camera = camera or CameraModel()
        self.reward_params = reward or RewardParams()
        self.v_d = float(v_d)
        self.vd_enabled = bool(vd_enabled)
        self.use_depth = bool(use_depth)
        self.auto_reset = bool(auto_reset)
        self.dt = float(dt)
        self.substeps = int(substeps)
        self.max_steps = int(max_steps)
        self.jitter = float(jitter)
        self.rng = np.random.default_rng(seed)

        self.n_envs = len(scenes)
        n = self.n_envs
        self.state = QuadState.hover((n,))
        self.next_gate = np.zeros(n, dtype=int)
        self.gates_passed = np.zeros(n, dtype=int)
        self.prev_action = np.zeros((n, 4))
        self.prev_dist = np.zeros(n)
        self.step_count = np.zeros(n, dtype=int)
        self.done = np.ones(n, dtype=bool)
        self.done_reason = np.full(n, DoneReason.RUNNING, dtype=int)
        self.set_scenes(scenes)

    # -- configuration ------------------------------------------------

    @property
    def control_dt(self):
        return self.dt * self.substeps

    @property
    def n_gates(self):
        return self._n_gates

    def set_scenes(self, scenes):
        """Swap scenes in; all envs must be reset before stepping again."""
        if len(scenes) != getattr(self, "n_envs", len(scenes)):
            raise ValueError("scene count must match env count")
        counts = {len(s.track.gates) for s in scenes}
        if len(counts) != 1:
            raise ValueError("all scenes must have the same gate count")
        self._n_gates = counts.pop()
        self.scenes = list(scenes)
        groups = {}
        for i, scene in enumerate(self.scenes):
            groups.setdefault(id(scene), (scene, []))[1].append(i)
        self._groups = [
            (scene, np.array(idx, dtype=int))
            for scene, idx in sorted(groups.values(), key=lambda g: g[1][0])
        ]
        self.done[:] = True

    def set_stage(self, v_d, vd_enabled):
        self.v_d = float(v_d)
        self.vd_enabled = bool(vd_enabled)

    # -- lifecycle ----------------------------------------------------

    def reset(self, indices=None):
        """Reset the chosen envs (all by default) and return observations.

        Start pose: a uniformly chosen start point with per-axis uniform
        jitter, at rest, yawed to face the first target gate exactly.
        Poses landing inside an obstacle are resampled.
        """
        if indices is None:
            indices = np.arange(self.n_envs)
        indices = np.asarray(indices, dtype=int)
        for scene, members in self._groups:
            idx = members[np.isin(members, indices)]
            if len(idx) == 0:
                continue
            self._reset_group(scene, idx)
        return self._observe()

    def _reset_group(self, scene, idx):
        track = scene.track
        n = len(idx)
        gate_idx = self.rng.integers(0, track.n_gates, size=n)
        pos = np.empty((n, 3))
        pending = np.arange(n)
        for _ in range(100):
            base = track.start_points[gate_idx[pending]]
            offset = self.rng.uniform(-self.jitter, self.jitter, size=(len(pending), 3))
            candidate = base + offset
            ok = scene.collision_distance(candidate, self.quad.collision_radius) > 0.0
            pos[pending[ok]] = candidate[ok]
            pending = pending[~ok]
            if len(pending) == 0:
                break
        else:
            raise RuntimeError("could not find a free start pose")
        targets = track.gate_centers()[gate_idx]
        d = targets - pos
        yaw = np.arctan2(d[:, 1], d[:, 0])
        self.state.p[idx] = pos
        self.state.v[idx] = 0.0
        self.state.q[idx] = quat.from_yaw(yaw)
        self.state.omega[idx] = 0.0
        self.next_gate[idx] = gate_idx
        self.gates_passed[idx] = 0
        self.prev_action[idx] = 0.0
        self.prev_dist[idx] = np.linalg.norm(d, axis=-1)
        self.step_count[idx] = 0
        self.done[idx] = False
        self.done_reason[idx] = DoneReason.RUNNING

    # -- stepping -----------------------------------------------------

    def step(self, actions):
        """Advance every live env one control step.

        Returns (obs, reward_total, done, done_reason, info); info holds
        the reward breakdown, collision distances, speeds, progress
        counters, and records of episodes that ended this step.

        With auto_reset on, envs that finish are reset before the
        returned observation is built (done flags still report the
        termination).  With auto_reset off, finished envs freeze in
        place with zero reward until reset; stepping when every env is
        already finished is an error.
        """
        actions = np.asarray(actions, dtype=float)
        if actions.shape != (self.n_envs, 4):
            raise ValueError(f"expected actions of shape ({self.n_envs}, 4)")
        if not np.isfinite(actions).all():
            raise ValueError("non-finite action")
        active = ~self.done
        if not active.any():
            raise RuntimeError("stepping finished episodes; reset the env first")

        thrust_cmd = np.clip(actions[:, 0], 0.0, self.quad.thrust_axis_max)
        omega_cmd = np.clip(actions[:, 1:], -self.quad.omega_max, self.quad.omega_max)
        actions = np.concatenate([thrust_cmd[:, None], omega_cmd], axis=1)

        gate_at_start = self.next_gate.copy()
        d_prev = self.prev_dist.copy()
        passed = np.zeros(self.n_envs, dtype=bool)
        crashed = np.zeros(self.n_envs, dtype=bool)
        d_col = np.full(self.n_envs, np.inf)

        hold = ~active
        for _ in range(self.substeps):
            p_before = self.state.p.copy()
            frozen = None
            if hold.any():
                # Park held envs (finished, or diverged earlier this step)
                # on a harmless placeholder state so the integrator never
                # sees non-finite values, then restore them.
                frozen = self.state.copy()
                rest = QuadState.hover((int(hold.sum()),))
                self.state.p[hold] = rest.p
                self.state.v[hold] = rest.v
                self.state.q[hold] = rest.q
                self.state.omega[hold] = rest.omega
            self.state = dynamics.step(
                self.state, thrust_cmd, omega_cmd, self.dt, self.quad
            )
            if frozen is not None:
                self.state.p[hold] = frozen.p[hold]
                self.state.v[hold] = frozen.v[hold]
                self.state.q[hold] = frozen.q[hold]
                self.state.omega[hold] = frozen.omega[hold]
            # Rows that just overflowed stop integrating and skip the
            # geometry queries; detection happens after the loop.
            hold |= ~self.state.is_finite()
            for scene, idx in self._groups:
                idx = idx[active[idx] & ~hold[idx]]
                if len(idx) == 0:
                    continue
                centers, normals, laterals, apertures = scene.gate_arrays()
                gi = self.next_gate[idx]
                crossed = gate_crossings(
                    p_before[idx],
                    self.state.p[idx],
                    centers[gi],
                    normals[gi],
                    laterals[gi],
                    apertures[gi],
                )
                if crossed.any():
                    hit = idx[crossed]
                    self.gates_passed[hit] += 1
                    self.next_gate[hit] = (self.next_gate[hit] + 1) % self._n_gates
                    passed[hit] = True
                d_col[idx] = scene.collision_distance(
                    self.state.p[idx], self.quad.collision_radius
                )
            crashed |= active & (d_col <= 0.0)
        diverged = active & ~self.state.is_finite()
        if diverged.any():
            # The exploded state carries no information; replace it with a
            # finite placeholder so downstream math (and later observations
            # of the frozen episode) stays clean.  The episode still ends
            # with DIVERGENCE below.
            rest = QuadState.hover((int(diverged.sum()),))
            self.state.p[diverged] = rest.p
            self.state.v[diverged] = rest.v
            self.state.q[diverged] = rest.q
            self.state.omega[diverged] = rest.omega
        self.step_count[active] += 1

        # Progress is measured against the gate targeted when the step
        # began; the anchor moves to the new gate only afterwards.
        d_curr = np.empty(self.n_envs)
        yaw_to_gate = np.empty(self.n_envs)
        for scene, idx in self._groups:
            centers, _, _, _ = scene.gate_arrays()
            rel_old = centers[gate_at_start[idx]] - self.state.p[idx]
            d_curr[idx] = np.linalg.norm(rel_old, axis=-1)
            rel_new = centers[self.next_gate[idx]] - self.state.p[idx]
            yaw_to_gate[idx] = np.arctan2(rel_new[:, 1], rel_new[:, 0])

        speed = np.linalg.norm(self.state.v, axis=-1)
        yaw = quat.yaw_of(self.state.q)
        lap_done = self.gates_passed >= self._n_gates
        breakdown = compute_reward(
            d_prev,
            d_curr,
            yaw,
            yaw_to_gate,
            speed,
            self.v_d,
            d_col,
            actions,
            self.prev_action,
            passed,
            crashed & ~diverged,
            self.reward_params,
            self.vd_enabled,
        )
        # Envs that were already finished contribute nothing; diverged envs
        # end with zero reward too (their state, and thus any distance-based
        # term, is no longer meaningful).
        silent = ~active | diverged
        if silent.any():
            for f in fields(breakdown):
                getattr(breakdown, f.name)[silent] = 0.0

        reason = np.full(self.n_envs, DoneReason.RUNNING, dtype=int)
        reason[active & (self.step_count >= self.max_steps)] = DoneReason.TIMEOUT
        reason[active & lap_done] = DoneReason.LAP_COMPLETE
        reason[crashed] = DoneReason.CRASH
        reason[diverged] = DoneReason.DIVERGENCE
        new_done = reason != DoneReason.RUNNING
        self.done |= new_done
        self.done_reason[new_done] = reason[new_done]

        self.prev_action[active] = actions[active]
        self.prev_dist[active] = d_curr[active]
        if passed.any():
            for scene, idx in self._groups:
                sel = idx[passed[idx]]
                if len(sel):
                    centers, _, _, _ = scene.gate_arrays()
                    rel = centers[self.next_gate[sel]] - self.state.p[sel]
                    self.prev_dist[sel] = np.linalg.norm(rel, axis=-1)

        records = []
        for i in np.flatnonzero(new_done):
            records.append(
                {
                    "env": int(i),
                    "reason": DoneReason(reason[i]).name.lower(),
                    "steps": int(self.step_count[i]),
                    "gates_passed": int(self.gates_passed[i]),
                    "success": bool(reason[i] == DoneReason.LAP_COMPLETE),
                    "lap_time": float(self.step_count[i] * self.control_dt)
                    if reason[i] == DoneReason.LAP_COMPLETE
                    else None,
                }
            )

        info = {
            "breakdown": breakdown,
            "d_col": d_col,
            "speed": speed,
            "gates_passed": self.gates_passed.copy(),
            "next_gate": self.next_gate.copy(),
            "episodes": records,
        }
        done = self.done.copy()
        reason = self.done_reason.copy()
        if self.auto_reset and new_done.any():
            self.reset(np.flatnonzero(new_done))
        obs = self._observe()
        return obs, breakdown.total, done, reason, info

    # -- observations -------------------------------------------------

    def _observe(self):
        n = self.n_envs
        state_vec = np.empty((n, STATE_DIM), dtype=np.float32)
        depth = (
            np.empty((n, self.camera.height, self.camera.width), dtype=np.float32)
            if self.use_depth
            else None
        )
        q = self.state.q
        for scene, idx in self._groups:
            centers, _, _, _ = scene.gate_arrays()
            g1 = self.next_gate[idx]
            g2 = (g1 + 1) % self._n_gates
            rel1 = quat.rotate_inverse(q[idx], centers[g1] - self.state.p[idx])
            rel2 = quat.rotate_inverse(q[idx], centers[g2] - self.state.p[idx])
            v_body = quat.rotate_inverse(q[idx], self.state.v[idx])
            state_vec[idx, 0:3] = rel1
            state_vec[idx, 3:6] = rel2
            state_vec[idx, 6:9] = v_body
            state_vec[idx, 9] = self.v_d
            state_vec[idx, 10:14] = q[idx]
            state_vec[idx, 14:17] = self.state.omega[idx]
            if self.use_depth:
                raw = perception.render_depth_batch(
                    self.state.p[idx], q[idx], scene, self.camera
                )
                depth[idx] = perception.to_observation(raw, self.camera, self.rng)
        obs = {"state": state_vec}
        if self.use_depth:
            obs["depth"] = depth
        return obs
