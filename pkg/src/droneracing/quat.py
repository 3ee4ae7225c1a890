"""Quaternion helpers for rigid-body attitude.

Quaternions are scalar-first ``[w, x, y, z]`` and represent the rotation
from the body frame to the world frame.  Every function broadcasts over
arbitrary leading batch dimensions; the quaternion axis is always the
last one.
"""

import numpy as np

IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])


def normalize(q):
    """Return q scaled to unit norm."""
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def multiply(a, b):
    """Hamilton product a * b."""
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def conjugate(q):
    out = q.copy()
    out[..., 1:] = -out[..., 1:]
    return out


def rotate(q, v):
    """Rotate body-frame vectors into the world frame.

    Uses the expanded sandwich product, valid for unit quaternions.
    """
    u = q[..., 1:]
    w = q[..., 0:1]
    t = 2.0 * np.cross(u, v)
    return v + w * t + np.cross(u, t)


def rotate_inverse(q, v):
    """Rotate world-frame vectors into the body frame."""
    u = -q[..., 1:]
    w = q[..., 0:1]
    t = 2.0 * np.cross(u, v)
    return v + w * t + np.cross(u, t)


def to_matrix(q):
    """Rotation matrix with columns equal to the body axes in world frame."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    row0 = np.stack(
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1
    )
    row1 = np.stack(
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1
    )
    row2 = np.stack(
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1
    )
    return np.stack([row0, row1, row2], axis=-2)


def from_yaw(yaw):
    """Quaternion for a pure rotation about the world z axis."""
    yaw = np.asarray(yaw, dtype=float)
    half = 0.5 * yaw
    zero = np.zeros_like(half)
    return np.stack([np.cos(half), zero, zero, np.sin(half)], axis=-1)


def from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    angle = np.asarray(angle, dtype=float)
    half = 0.5 * angle
    return np.concatenate(
        [np.cos(half)[..., None], np.sin(half)[..., None] * axis], axis=-1
    )


def yaw_of(q):
    """Heading of the body x axis projected onto the world x-y plane."""
    fwd = rotate(q, np.broadcast_to(np.array([1.0, 0.0, 0.0]), q[..., 1:].shape))
    return np.arctan2(fwd[..., 1], fwd[..., 0])


def derivative(q, omega):
    """Kinematic quaternion rate for body angular velocity omega."""
    omega_q = np.concatenate([np.zeros_like(omega[..., :1]), omega], axis=-1)
    return 0.5 * multiply(q, omega_q)
