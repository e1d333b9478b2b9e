import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dlo.errors import NearPiRotation
from dlo.lie import (
    PlanarPose,
    Pose,
    compose,
    euler_to_matrix,
    exp_map,
    hat,
    log_map,
    matrix_from_quaternion,
    planar_embed,
    planar_project,
    quaternion_from_matrix,
    twist_hat,
    vee,
    wrap_angle,
)

from conftest import series_exp


def random_pose(rng, max_angle: float = 3.0) -> Pose:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return exp_map(np.concatenate([rng.uniform(-10, 10, 3), axis * rng.uniform(0, max_angle)]))


def assert_valid_rotation(R):
    assert np.allclose(R.T @ R, np.eye(3), atol=1e-9)
    assert abs(np.linalg.det(R) - 1.0) < 1e-9


vec3 = st.lists(st.floats(-1, 1, allow_nan=False), min_size=3, max_size=3)


def test_exp_of_zero_is_identity():
    assert exp_map(np.zeros(6)).is_close(Pose.identity(), atol=0)


def test_exp_pure_translation():
    T = exp_map([1, 2, 3, 0, 0, 0])
    assert np.array_equal(T.R, np.eye(3))
    assert np.allclose(T.t, [1, 2, 3])


@settings(max_examples=200)
@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=3, max_size=3), vec3)
def test_exp_matches_series_oracle(rho, w):
    w = np.asarray(w)
    if np.linalg.norm(w) > 1:
        w = w / np.linalg.norm(w)
    xi = np.concatenate([rho, w])
    assert np.abs(exp_map(xi).matrix - series_exp(xi)).max() < 1e-10


@given(st.lists(st.floats(-20, 20, allow_nan=False), min_size=6, max_size=6))
def test_exp_output_is_a_rotation(xi):
    assert_valid_rotation(exp_map(xi).R)


def test_exp_first_order_consistency():
    rng = np.random.Generator(np.random.PCG64(1))
    for _ in range(100):
        xi = rng.uniform(-1, 1, 6)
        xi *= 1e-4 / np.linalg.norm(xi)
        assert np.abs(exp_map(xi).matrix - (np.eye(4) + twist_hat(xi))).max() < 1e-7


def test_small_angle_branch_is_continuous():
    w = np.array([3e-9, -1e-9, 2e-9])
    a = exp_map(np.concatenate([[1, 2, 3], w]))
    b = exp_map(np.concatenate([[1, 2, 3], w * 10]))
    assert np.abs(a.matrix - series_exp(np.concatenate([[1, 2, 3], w]))).max() < 1e-14
    assert np.abs(a.matrix - b.matrix).max() < 1e-7


def test_log_examples():
    assert np.array_equal(log_map(Pose.identity()), np.zeros(6))
    assert np.allclose(log_map(Pose(np.eye(3), [4, -5, 6])), [4, -5, 6, 0, 0, 0], atol=1e-15)


def test_log_exp_round_trip_1000_poses():
    rng = np.random.Generator(np.random.PCG64(2))
    for _ in range(1000):
        T = random_pose(rng, max_angle=3.0)
        back = exp_map(log_map(T))
        assert np.linalg.norm(back.R - T.R) < 1e-9
        assert np.abs(back.t - T.t).max() < 1e-9


def test_log_near_pi_raises():
    R = exp_map([0, 0, 0, 0, 0, math.pi - 1e-7]).R
    with pytest.raises(NearPiRotation):
        log_map(Pose(R, np.zeros(3)))


def test_compose_examples():
    rng = np.random.Generator(np.random.PCG64(3))
    T = random_pose(rng)
    assert compose(T, Pose.identity()).is_close(T, atol=1e-15)
    assert compose(T, T.inverse()).is_close(Pose.identity(), atol=1e-9)


def test_compose_associative():
    rng = np.random.Generator(np.random.PCG64(4))
    for _ in range(200):
        A, B, C = (random_pose(rng) for _ in range(3))
        assert compose(compose(A, B), C).is_close(compose(A, compose(B, C)), atol=1e-9)


def test_compose_reorthonormalises_drift():
    R = euler_to_matrix(0.1, 0.2, 0.3)
    drifted = Pose.__new__(Pose)
    object.__setattr__(drifted, "R", R * (1 + 1e-8))
    object.__setattr__(drifted, "t", np.zeros(3))
    assert_valid_rotation(compose(drifted, Pose.identity()).R)


def test_planar_examples():
    assert planar_embed(PlanarPose(0, 0, 0)).is_close(Pose.identity(), atol=0)
    assert planar_project(Pose.identity()) == PlanarPose(0.0, 0.0, 0.0)
    T = planar_embed(PlanarPose(1.0, 2.0, math.pi / 2))
    assert np.allclose(T.R @ [1, 0, 0], [0, 1, 0], atol=1e-15)
    assert np.array_equal(T.t, [1.0, 2.0, 0.0])


@given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3), st.floats(-math.pi, math.pi, exclude_max=True))
def test_planar_round_trip_exact(x, y, yaw):
    assert planar_project(planar_embed(PlanarPose(x, y, yaw))) == PlanarPose(x, y, yaw)


@given(st.floats(-100, 100))
def test_wrap_angle_range(a):
    w = wrap_angle(a)
    assert -math.pi <= w < math.pi
    assert abs(math.remainder(w - a, 2 * math.pi)) < 1e-9


def test_hat_vee_inverse():
    w = np.array([0.3, -1.2, 2.5])
    assert np.array_equal(vee(hat(w)), w)
    assert np.allclose(hat(w) @ [1, 2, 3], np.cross(w, [1, 2, 3]))


def test_quaternion_round_trip():
    rng = np.random.Generator(np.random.PCG64(5))
    for _ in range(200):
        R = random_pose(rng).R
        q = quaternion_from_matrix(R)
        assert q[3] >= 0
        assert np.allclose(matrix_from_quaternion(q), R, atol=1e-12)


def test_pose_apply_and_inverse():
    rng = np.random.Generator(np.random.PCG64(6))
    T = random_pose(rng)
    p = rng.normal(size=(10, 3))
    assert np.allclose(T.inverse().apply(T.apply(p)), p, atol=1e-12)
    assert np.allclose(T.apply(p[0]), T.R @ p[0] + T.t)


@pytest.mark.parametrize("angle", [1e-9, 1e-8, 3e-6, 1e-3, 0.0999, 0.1001, 0.5])
def test_small_rotations_keep_first_order_translation(angle):
    xi = np.array([0.0, 0.0, 1.0, 0.0, angle, 0.0])
    assert np.abs(exp_map(xi).matrix - series_exp(xi)).max() < 1e-15 + 1e-12 * angle
    assert np.abs(log_map(exp_map(xi)) - xi).max() <= 1e-15
