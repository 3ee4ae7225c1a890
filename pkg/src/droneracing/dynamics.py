"""Quadrotor rigid-body dynamics with aerodynamic drag.

State is position, velocity (world frame), attitude quaternion, and body
angular velocity.  The control interface is collective thrust (mass
normalized, m/s^2) plus desired body rates; a proportional rate loop
converts the rate command into a body torque, clamped to what the rotors
can produce.  Continuous dynamics are integrated with classic RK4 on a
fixed step.  All operations broadcast over leading batch dimensions.
"""

from dataclasses import dataclass, field

import numpy as np

from . import quat

GRAVITY = np.array([0.0, 0.0, -9.81])


@dataclass
class QuadParams:
    """Physical and control parameters of the simulated quadrotor."""

    mass: float = 0.58
    # Diagonal inertia, kg m^2.
    inertia: np.ndarray = field(
        default_factory=lambda: np.array([1.01e-3, 1.53e-3, 2.03e-3])
    )
    arm_length: float = 0.075
    thrust_max: float = 14.0
    # Linear and quadratic drag on body-frame velocity, plus rotational damping.
    drag_linear: np.ndarray = field(default_factory=lambda: np.array([0.3, 0.3, 0.3]))
    drag_quadratic: np.ndarray = field(default_factory=lambda: np.zeros(3))
    drag_rotational: float = 1e-4
    # Proportional gain of the body-rate loop, 1/s.
    rate_gain: float = 20.0
    # Command limits exposed to the policy.
    omega_max: float = 6.0
    collision_radius: float = 0.1

    def __post_init__(self):
        self.inertia = np.asarray(self.inertia, dtype=float)
        self.drag_linear = np.asarray(self.drag_linear, dtype=float)
        self.drag_quadratic = np.asarray(self.drag_quadratic, dtype=float)

    @property
    def thrust_axis_max(self):
        """Largest mass-normalized thrust command, m/s^2."""
        return self.thrust_max / self.mass

    @property
    def torque_max(self):
        """Torque the rotor set can realize about each body axis.

        Rolling or pitching uses a differential thrust pair one arm apart;
        yaw authority is modeled as a quarter of the same budget.
        """
        lever = 0.5 * self.thrust_max * self.arm_length
        return np.array([lever, lever, 0.5 * lever])


@dataclass
class QuadState:
    """Batched rigid-body state; arrays share leading dimensions."""

    p: np.ndarray
    v: np.ndarray
    q: np.ndarray
    omega: np.ndarray

    @classmethod
    def hover(cls, batch_shape=()):
        shape = tuple(batch_shape)
        return cls(
            p=np.zeros(shape + (3,)),
            v=np.zeros(shape + (3,)),
            q=np.broadcast_to(quat.IDENTITY, shape + (4,)).copy(),
            omega=np.zeros(shape + (3,)),
        )

    def copy(self):
        return QuadState(self.p.copy(), self.v.copy(), self.q.copy(), self.omega.copy())

    def is_finite(self):
        """Per-element batch mask, True where every state entry is finite."""
        return (
            np.isfinite(self.p).all(axis=-1)
            & np.isfinite(self.v).all(axis=-1)
            & np.isfinite(self.q).all(axis=-1)
            & np.isfinite(self.omega).all(axis=-1)
        )

    def _combine(self, others, weights, dt):
        """self + dt * sum(w_i * k_i) for derivative tuples k_i."""
        p, v, q, w = self.p, self.v, self.q, self.omega
        for other, weight in zip(others, weights):
            s = dt * weight
            p = p + s * other.p
            v = v + s * other.v
            q = q + s * other.q
            w = w + s * other.omega
        return QuadState(p, v, q, w)


def drag_wrench(state, params):
    """Aerodynamic force (body frame) and torque opposing motion."""
    # Normalize before rotating: integrator stages evaluate this on
    # quaternions slightly off the unit sphere, and the rotation formula
    # is only exact for unit quaternions.
    v_body = quat.rotate_inverse(quat.normalize(state.q), state.v)
    force = (
        -params.drag_linear * v_body
        - params.drag_quadratic * np.abs(v_body) * v_body
    )
    torque = -params.drag_rotational * state.omega
    return force, torque


def derivative(state, thrust, torque, params):
    """Time derivative of the state under a body wrench.

    thrust is the total rotor force along body z in newtons, torque the
    body torque in newton meters.
    """
    thrust = np.asarray(thrust, dtype=float)
    if not (
        np.isfinite(thrust).all()
        and np.isfinite(torque).all()
        and state.is_finite().all()
    ):
        raise ValueError("non-finite input to dynamics derivative")
    return _derivative_raw(state, thrust, torque, params)


def _derivative_raw(state, thrust, torque, params):
    drag_force, drag_torque = drag_wrench(state, params)
    force_body = drag_force.copy()
    force_body[..., 2] += thrust
    accel = quat.rotate(quat.normalize(state.q), force_body) / params.mass + GRAVITY
    omega = state.omega
    gyro = np.cross(omega, params.inertia * omega)
    omega_dot = (-gyro + torque + drag_torque) / params.inertia
    return QuadState(
        p=state.v,
        v=accel,
        q=quat.derivative(state.q, omega),
        omega=omega_dot,
    )


def rate_controller(state, thrust_cmd, omega_cmd, params):
    """Convert a thrust/body-rate command into an achievable body wrench.

    thrust_cmd is mass normalized (m/s^2); the proportional loop tracks
    omega_cmd and the resulting torque is clamped per axis.
    """
    thrust_cmd = np.asarray(thrust_cmd, dtype=float)
    thrust = np.clip(thrust_cmd * params.mass, 0.0, params.thrust_max)
    torque = params.inertia * (params.rate_gain * (omega_cmd - state.omega))
    torque = np.clip(torque, -params.torque_max, params.torque_max)
    return thrust, torque


def step(state, thrust_cmd, omega_cmd, dt, params):
    """Advance the state by one RK4 step under a held command.

    The rate loop is evaluated once on the entry state and the resulting
    wrench is held constant across the step.  The quaternion is
    renormalized afterwards.  A non-finite result is returned as is;
    callers detect divergence with ``QuadState.is_finite``.
    """
    thrust, torque = rate_controller(state, thrust_cmd, omega_cmd, params)
    # Stages may overflow while a trajectory diverges; that is reported
    # through the returned state, not as an exception or warning.  The
    # first stage still validates that the inputs themselves are finite.
    with np.errstate(over="ignore", invalid="ignore"):
        k1 = derivative(state, thrust, torque, params)
        k2 = _derivative_raw(state._combine([k1], [0.5], dt), thrust, torque, params)
        k3 = _derivative_raw(state._combine([k2], [0.5], dt), thrust, torque, params)
        k4 = _derivative_raw(state._combine([k3], [1.0], dt), thrust, torque, params)
        out = state._combine([k1, k2, k3, k4], [1 / 6, 1 / 3, 1 / 3, 1 / 6], dt)
        out.q = quat.normalize(out.q)
    return out
