"""Quaternion helpers checked against scipy.spatial.transform.Rotation.

scipy stores quaternions scalar-last; the package is scalar-first, so
the oracle converts explicitly at every boundary.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from droneracing import quat


def to_scipy(q):
    q = np.asarray(q)
    return Rotation.from_quat(np.concatenate([q[..., 1:], q[..., :1]], axis=-1))


def random_units(rng, n):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def test_identity_is_unit_and_neutral(rng):
    assert np.allclose(quat.IDENTITY, [1.0, 0.0, 0.0, 0.0])
    v = rng.normal(size=(5, 3))
    assert np.allclose(quat.rotate(np.broadcast_to(quat.IDENTITY, (5, 4)), v), v)


def test_normalize_unit_norm_and_direction(rng):
    q = rng.normal(size=(20, 4)) * 7.0
    n = quat.normalize(q)
    assert np.allclose(np.linalg.norm(n, axis=-1), 1.0)
    # Same direction: cross-ratio of components stays fixed.
    assert np.allclose(n * np.linalg.norm(q, axis=-1, keepdims=True), q)


def test_multiply_matches_rotation_composition(rng):
    a = random_units(rng, 50)
    b = random_units(rng, 50)
    ours = to_scipy(quat.multiply(a, b)).as_matrix()
    ref = (to_scipy(a) * to_scipy(b)).as_matrix()
    assert np.allclose(ours, ref, atol=1e-12)


def test_multiply_identity_and_conjugate_inverse(rng):
    q = random_units(rng, 30)
    eye = np.broadcast_to(quat.IDENTITY, q.shape)
    assert np.allclose(quat.multiply(q, eye), q)
    assert np.allclose(quat.multiply(eye, q), q)
    prod = quat.multiply(q, quat.conjugate(q))
    assert np.allclose(prod, eye, atol=1e-12)


def test_rotate_matches_scipy_apply(rng):
    q = random_units(rng, 40)
    v = rng.normal(size=(40, 3))
    assert np.allclose(quat.rotate(q, v), to_scipy(q).apply(v), atol=1e-12)


def test_rotate_inverse_matches_scipy_inverse(rng):
    q = random_units(rng, 40)
    v = rng.normal(size=(40, 3))
    ref = to_scipy(q).inv().apply(v)
    assert np.allclose(quat.rotate_inverse(q, v), ref, atol=1e-12)
    # Round trip.
    assert np.allclose(quat.rotate_inverse(q, quat.rotate(q, v)), v, atol=1e-12)


def test_to_matrix_matches_scipy(rng):
    q = random_units(rng, 40)
    assert np.allclose(quat.to_matrix(q), to_scipy(q).as_matrix(), atol=1e-12)


def test_to_matrix_columns_are_body_axes(rng):
    q = random_units(rng, 10)
    R = quat.to_matrix(q)
    for axis, e in enumerate(np.eye(3)):
        world = quat.rotate(q, np.broadcast_to(e, (10, 3)))
        assert np.allclose(R[..., :, axis], world, atol=1e-12)


def test_from_yaw_matches_scipy_euler():
    yaws = np.linspace(-2 * np.pi, 2 * np.pi, 17)
    ours = quat.from_yaw(yaws)
    ref = Rotation.from_euler("z", yaws).as_matrix()
    assert np.allclose(quat.to_matrix(ours), ref, atol=1e-12)


def test_from_axis_angle_matches_scipy(rng):
    axes = rng.normal(size=(30, 3))
    angles = rng.uniform(-np.pi, np.pi, size=30)
    ours = quat.from_axis_angle(axes, angles)
    unit = axes / np.linalg.norm(axes, axis=-1, keepdims=True)
    ref = Rotation.from_rotvec(unit * angles[:, None]).as_matrix()
    assert np.allclose(quat.to_matrix(ours), ref, atol=1e-12)


def test_yaw_of_recovers_pure_yaw():
    yaws = np.linspace(-np.pi + 1e-9, np.pi, 15)
    assert np.allclose(quat.yaw_of(quat.from_yaw(yaws)), yaws, atol=1e-12)


def test_yaw_of_is_heading_of_body_x(rng):
    q = random_units(rng, 25)
    fwd = quat.rotate(q, np.broadcast_to([1.0, 0.0, 0.0], (25, 3)))
    expected = np.arctan2(fwd[:, 1], fwd[:, 0])
    assert np.allclose(quat.yaw_of(q), expected)


def test_yaw_of_ignores_roll():
    # Roll about body x leaves the heading of body x untouched.
    yaw = 0.7
    roll = quat.from_axis_angle(np.array([1.0, 0.0, 0.0]), 1.1)
    q = quat.multiply(quat.from_yaw(np.array(yaw)), roll)
    assert np.isclose(quat.yaw_of(q), yaw, atol=1e-12)


def test_derivative_matches_small_rotation_update(rng):
    """q + q_dot * dt must agree with composing a small body rotation."""
    q = random_units(rng, 20)
    omega = rng.normal(size=(20, 3))
    dt = 1e-6
    qdot = quat.derivative(q, omega)
    stepped = quat.normalize(q + qdot * dt)
    delta = quat.from_axis_angle(omega, np.linalg.norm(omega, axis=-1) * dt)
    exact = quat.multiply(q, delta)
    assert np.allclose(stepped, exact, atol=1e-11)


def test_derivative_preserves_norm_to_first_order(rng):
    q = random_units(rng, 20)
    omega = rng.normal(size=(20, 3))
    qdot = quat.derivative(q, omega)
    # d/dt (q . q) = 2 q . q_dot = 0 for the kinematic equation.
    assert np.allclose(np.sum(q * qdot, axis=-1), 0.0, atol=1e-12)


def test_broadcasting_matches_elementwise_loop(rng):
    q = random_units(rng, 6).reshape(2, 3, 4)
    v = rng.normal(size=(2, 3, 3))
    batched = quat.rotate(q, v)
    for i in range(2):
        for j in range(3):
            assert np.allclose(batched[i, j], quat.rotate(q[i, j], v[i, j]))


@settings(max_examples=50, deadline=None)
@given(st.integers(min_value=0, max_value=2**32 - 1))
def test_rotate_preserves_length(seed):
    rng = np.random.default_rng(seed)
    q = random_units(rng, 8)
    v = rng.normal(size=(8, 3))
    assert np.allclose(
        np.linalg.norm(quat.rotate(q, v), axis=-1),
        np.linalg.norm(v, axis=-1),
        atol=1e-10,
    )


@settings(max_examples=50, deadline=None)
@given(st.integers(min_value=0, max_value=2**32 - 1))
def test_rotate_agrees_with_matrix_product(seed):
    rng = np.random.default_rng(seed)
    q = random_units(rng, 8)
    v = rng.normal(size=(8, 3))
    via_matrix = np.einsum("nij,nj->ni", quat.to_matrix(q), v)
    assert np.allclose(quat.rotate(q, v), via_matrix, atol=1e-12)
