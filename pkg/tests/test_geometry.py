import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uwbalign.geometry import (
    AffineTransform7,
    Pose,
    apply_affine,
    euler_xyz,
    euler_xyz_rate_matrix,
    euler_xyz_to_matrix,
    is_rotation,
    log_rotation,
    project_to_so3,
    random_rotation,
    rodrigues,
    rotation_angle,
    rotation_geodesic_error,
    skew,
    vee,
    wrap_angle,
)

finite = st.floats(-10.0, 10.0, allow_nan=False)
vec3 = st.lists(finite, min_size=3, max_size=3).map(np.array)
# rotation vectors strictly inside the principal branch
rotvec = st.lists(st.floats(-1.7, 1.7), min_size=3, max_size=3).map(np.array).filter(
    lambda v: np.linalg.norm(v) < np.pi - 1e-3
)


def quat_to_matrix(q):
    # independent oracle: unit quaternion (w, x, y, z) to rotation matrix
    w, x, y, z = q / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


@given(vec3, vec3)
def test_skew_is_cross_product(a, b):
    np.testing.assert_allclose(skew(a) @ b, np.cross(a, b), atol=1e-12)
    np.testing.assert_allclose(vee(skew(a)), a)


@given(rotvec)
def test_rodrigues_matches_quaternion_oracle(v):
    th = np.linalg.norm(v)
    if th < 1e-12:
        q = np.array([1.0, 0.0, 0.0, 0.0])
    else:
        q = np.concatenate([[np.cos(th / 2)], np.sin(th / 2) * v / th])
    np.testing.assert_allclose(rodrigues(v), quat_to_matrix(q), atol=1e-12)


@given(rotvec)
def test_rodrigues_is_rotation(v):
    assert is_rotation(rodrigues(v))


@given(rotvec)
def test_log_inverts_exp(v):
    np.testing.assert_allclose(log_rotation(rodrigues(v)), v, atol=1e-9)


def test_log_near_pi_and_at_pi():
    axis = np.array([1.0, 2.0, -2.0]) / 3.0
    for th in (np.pi - 1e-4, np.pi - 1e-7):
        v = log_rotation(rodrigues(th * axis))
        np.testing.assert_allclose(v, th * axis, atol=1e-6)
    v = log_rotation(rodrigues(np.pi * axis))
    assert np.isclose(np.linalg.norm(v), np.pi)
    np.testing.assert_allclose(rodrigues(v), rodrigues(np.pi * axis), atol=1e-12)
    # canonical sign at exactly pi: first nonzero component positive
    assert v[0] > 0


def test_log_identity_and_previous():
    np.testing.assert_array_equal(log_rotation(np.eye(3)), np.zeros(3))
    prev = np.array([0.1, 0.2, 0.3])
    R = rodrigues([1e-5, 0.0, 0.0])
    np.testing.assert_array_equal(log_rotation(R, previous=prev), prev)
    # above the threshold the previous value is ignored
    R = rodrigues([0.5, 0.0, 0.0])
    np.testing.assert_allclose(log_rotation(R, previous=prev), [0.5, 0, 0], atol=1e-12)
    # without previous, tiny angles are still exact
    np.testing.assert_allclose(log_rotation(rodrigues([1e-5, 0, 0])), [1e-5, 0, 0], atol=1e-15)


@given(rotvec, rotvec)
def test_geodesic_error_symmetric_and_matches_arccos(v1, v2):
    R1, R2 = rodrigues(v1), rodrigues(v2)
    e = rotation_geodesic_error(R1, R2)
    assert 0.0 <= e <= np.pi
    assert np.isclose(e, rotation_geodesic_error(R2, R1), atol=1e-12)
    c = np.clip((np.trace(R1.T @ R2) - 1) / 2, -1, 1)
    assert abs(e - np.arccos(c)) < 1e-6


def test_geodesic_error_examples():
    assert rotation_geodesic_error(np.eye(3), np.eye(3)) == 0.0
    assert np.isclose(rotation_geodesic_error(np.eye(3), rodrigues([0, 0, 0.3])), 0.3)
    assert np.isclose(rotation_angle(rodrigues([0, np.pi, 0])), np.pi)


def test_project_to_so3():
    rng = np.random.default_rng(0)
    for _ in range(20):
        R = random_rotation(rng)
        np.testing.assert_allclose(project_to_so3(R), R, atol=1e-12)
        M = R + 0.05 * rng.normal(size=(3, 3))
        P = project_to_so3(M)
        assert is_rotation(P)
    # reflections are turned into proper rotations
    assert np.linalg.det(project_to_so3(np.diag([1.0, 1.0, -1.0]))) > 0


@given(st.lists(st.floats(-1.5, 1.5), min_size=3, max_size=3))
def test_euler_round_trip(angles):
    R = euler_xyz_to_matrix(angles)
    np.testing.assert_allclose(euler_xyz(R), angles, atol=1e-9)


def test_euler_rate_matrix_finite_differences():
    rng = np.random.default_rng(1)
    for _ in range(50):
        ang = rng.uniform(-1.2, 1.2, 3)
        d = rng.normal(size=3)
        h = 1e-6
        Rp, Rm = euler_xyz_to_matrix(ang + h * d), euler_xyz_to_matrix(ang - h * d)
        w = log_rotation(Rm.T @ Rp) / (2 * h)
        np.testing.assert_allclose(w, euler_xyz_rate_matrix(ang) @ d, atol=1e-7)


def test_wrap_angle():
    np.testing.assert_allclose(wrap_angle([0.0, np.pi, -np.pi, 3 * np.pi, 7.0]), [0.0, np.pi, np.pi, np.pi, 7.0 - 2 * np.pi])


@settings(max_examples=50)
@given(st.floats(0.2, 5.0), rotvec, vec3, vec3, vec3)
def test_affine_similarity_properties(s, v, t, p, q):
    A = AffineTransform7(s, rodrigues(v), t)
    assert np.isclose(np.linalg.norm(A.apply(p) - A.apply(q)), s * np.linalg.norm(p - q), rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(A.inverse().apply(A.apply(p)), p, atol=1e-8)
    np.testing.assert_allclose(apply_affine(A, p), A.matrix()[:3, :3] @ p + t, atol=1e-9)


def test_affine_compose_and_theta():
    rng = np.random.default_rng(2)
    A = AffineTransform7(1.5, random_rotation(rng), [1, 2, 3])
    B = AffineTransform7(0.7, random_rotation(rng), [-1, 0, 2])
    p = rng.normal(size=(5, 3))
    np.testing.assert_allclose(A.compose(B).apply(p), A.apply(B.apply(p)), atol=1e-12)
    np.testing.assert_allclose(A.compose(B).matrix(), A.matrix() @ B.matrix(), atol=1e-12)
    C = AffineTransform7.from_theta(A.theta())
    np.testing.assert_allclose(C.matrix(), A.matrix(), atol=1e-12)
    with pytest.raises(ValueError):
        AffineTransform7(0.0)
    assert AffineTransform7().is_valid()


def test_pose_compose_inverse():
    rng = np.random.default_rng(3)
    T = Pose(random_rotation(rng), rng.normal(size=3))
    I = T.compose(T.inverse())
    np.testing.assert_allclose(I.R, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(I.p, 0, atol=1e-12)
    np.testing.assert_allclose(T.matrix() @ T.inverse().matrix(), np.eye(4), atol=1e-12)
