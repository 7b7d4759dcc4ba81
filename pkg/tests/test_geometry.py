import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trafficcam.errors import NotARotation, PointBehindCamera, RayParallelToPlane
from trafficcam.geometry import (
    CameraParams,
    Intrinsics,
    Rotation,
    axis_angle_to_matrix,
    axis_angle_to_matrix_batch,
    back_project_ray,
    back_project_to_plane,
    check_rotation,
    intersect_plane,
    intrinsic_matrix,
    look_at,
    matrix_to_axis_angle,
    project,
)

SIZE = (320, 240)


def rot_x(t):
    c, s = math.cos(t), math.sin(t)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def rot_z(t):
    c, s = math.cos(t), math.sin(t)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def random_rotvec(rng, max_angle=math.pi):
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    return d * rng.uniform(0, max_angle)


def road_camera(f=350.0, height=6.0, pitch_deg=20.0):
    c = np.array([0.0, 0.0, height])
    p = math.radians(pitch_deg)
    R = look_at(c, c + np.array([0.0, math.cos(p), -math.sin(p)]))
    return CameraParams.from_rt(f, R, -R @ c)


def test_intrinsic_matrix_centred_principal_point():
    K = intrinsic_matrix(350.0, SIZE)
    np.testing.assert_array_equal(K, [[350, 0, 160], [0, 350, 120], [0, 0, 1]])
    assert Intrinsics(350, 320, 240).principal_point == (160, 120)
    with pytest.raises(ValueError):
        Intrinsics(0, 320, 240)


def test_rodrigues_zero_is_identity():
    np.testing.assert_array_equal(axis_angle_to_matrix([0, 0, 0]), np.eye(3))
    np.testing.assert_array_equal(matrix_to_axis_angle(np.eye(3)), np.zeros(3))


@pytest.mark.parametrize("angle", [0.3, math.pi / 2, 2.0, math.pi - 1e-9])
def test_rodrigues_matches_elementary_rotations(angle):
    np.testing.assert_allclose(axis_angle_to_matrix([angle, 0, 0]), rot_x(angle), atol=1e-14)
    np.testing.assert_allclose(axis_angle_to_matrix([0, 0, angle]), rot_z(angle), atol=1e-14)


def test_half_turn_about_z():
    R = axis_angle_to_matrix([0, 0, math.pi])
    np.testing.assert_allclose(R, np.diag([-1.0, -1.0, 1.0]), atol=1e-15)
    rv = matrix_to_axis_angle(R)
    assert abs(np.linalg.norm(rv) - math.pi) < 1e-12
    np.testing.assert_allclose(np.abs(rv / math.pi), [0, 0, 1], atol=1e-12)


def test_rotation_axis_is_fixed_point():
    rng = np.random.default_rng(3)
    for _ in range(200):
        rv = random_rotvec(rng)
        R = axis_angle_to_matrix(rv)
        d = rv / np.linalg.norm(rv)
        np.testing.assert_allclose(R @ d, d, atol=1e-12)


def test_round_trip_against_opencv():
    cv2 = pytest.importorskip("cv2")
    rng = np.random.default_rng(11)
    for _ in range(200):
        rv = random_rotvec(rng, math.pi * 0.999)
        R_cv, _ = cv2.Rodrigues(rv.reshape(3, 1))
        np.testing.assert_allclose(axis_angle_to_matrix(rv), R_cv, atol=1e-12)
        rv_cv, _ = cv2.Rodrigues(R_cv)
        np.testing.assert_allclose(matrix_to_axis_angle(R_cv), rv_cv.ravel(), atol=1e-9)


def test_batch_rodrigues_matches_scalar():
    rng = np.random.default_rng(5)
    rvs = np.array([random_rotvec(rng) for _ in range(50)] + [np.zeros(3)])
    batch = axis_angle_to_matrix_batch(rvs)
    for rv, R in zip(rvs, batch):
        np.testing.assert_allclose(R, axis_angle_to_matrix(rv), atol=1e-15)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1, 1, allow_nan=False), min_size=3, max_size=3), st.floats(1e-9, math.pi - 1e-6))
def test_round_trip_property(axis, angle):
    d = np.asarray(axis)
    if np.linalg.norm(d) < 1e-3:
        return
    rv = d / np.linalg.norm(d) * angle
    back = matrix_to_axis_angle(axis_angle_to_matrix(rv))
    np.testing.assert_allclose(back, rv, atol=1e-8)


def test_non_rotations_are_rejected():
    with pytest.raises(NotARotation):
        check_rotation(np.diag([1.0, 1.0, -1.0]))  # reflection
    with pytest.raises(NotARotation):
        check_rotation(np.eye(3) * 1.01)
    with pytest.raises(NotARotation):
        Rotation.from_matrix(np.ones((2, 2)))


def test_camera_vector_round_trip():
    p = road_camera()
    q = CameraParams.from_vector(p.to_vector())
    np.testing.assert_allclose(q.R, p.R, atol=1e-14)
    np.testing.assert_allclose(q.T, p.T)
    assert q.f == p.f
    np.testing.assert_allclose(p.center, [0, 0, 6.0], atol=1e-12)


def test_project_known_points():
    p = CameraParams(350.0, Rotation.identity(), np.zeros(3))
    np.testing.assert_allclose(project([0, 0, 1], p, SIZE), [160, 120])
    np.testing.assert_allclose(project([1, 2, 10], p, SIZE), [160 + 35, 120 + 70])
    with pytest.raises(PointBehindCamera):
        project([0, 0, -1], p, SIZE)
    with pytest.raises(PointBehindCamera):
        project([1, 0, 0], p, SIZE)


def test_projection_matrix_agrees_with_project():
    p = road_camera()
    X = np.array([1.5, 20.0, 0.3])
    h = p.projection_matrix(SIZE) @ np.r_[X, 1.0]
    np.testing.assert_allclose(h[:2] / h[2], project(X, p, SIZE), atol=1e-10)


def test_back_projection_inverts_projection_on_ground():
    p = road_camera()
    rng = np.random.default_rng(0)
    for _ in range(100):
        X = np.array([rng.uniform(-8, 8), rng.uniform(10, 60), 0.0])
        np.testing.assert_allclose(back_project_to_plane(project(X, p, SIZE), p, SIZE), X, atol=1e-9)


def test_back_projection_to_raised_plane():
    p = road_camera()
    X = np.array([2.0, 25.0, 1.2])
    np.testing.assert_allclose(back_project_to_plane(project(X, p, SIZE), p, SIZE, plane_z=1.2), X, atol=1e-9)


def test_ray_points_project_to_pixel():
    p = road_camera()
    o, d = back_project_ray((100.0, 200.0), p, SIZE)
    assert abs(np.linalg.norm(d) - 1.0) < 1e-12
    for t in (1.0, 7.5, 40.0):
        np.testing.assert_allclose(project(o + t * d, p, SIZE), [100.0, 200.0], atol=1e-9)


def test_pixel_above_horizon_has_no_ground_point():
    p = road_camera(pitch_deg=10.0)
    with pytest.raises(PointBehindCamera):
        back_project_to_plane((160.0, 0.0), p, SIZE)


def test_ray_parallel_to_plane():
    with pytest.raises(RayParallelToPlane):
        intersect_plane((np.array([0, 0, 5.0]), np.array([0, 1.0, 0])), 0.0)
    # a horizontal camera axis sees the horizon at the principal row
    p = road_camera(pitch_deg=0.0)
    with pytest.raises(RayParallelToPlane):
        back_project_to_plane((160.0, 120.0), p, SIZE)


def test_look_at_axes():
    R = look_at([0, 0, 5], [0, 10, 5])
    np.testing.assert_allclose(R, [[1, 0, 0], [0, 0, -1], [0, 1, 0]], atol=1e-15)
    with pytest.raises(ValueError):
        look_at([0, 0, 5], [0, 0, 0])
