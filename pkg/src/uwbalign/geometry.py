"""Rotation and similarity-transform algebra.

Rotations are plain ``(3, 3)`` float arrays and rotation vectors plain
``(3,)`` arrays (axis times angle).  The two small value types,
:class:`AffineTransform7` and :class:`Pose`, are frozen dataclasses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Below this angle the rotation-vector axis is not re-estimated when a previous
# value is supplied (the axis of a near-identity rotation is meaningless).
SMALL_ANGLE = 1e-3

_ORTHO_TOL = 1e-9


def skew(a) -> np.ndarray:
    """Return the matrix ``[a]x`` such that ``skew(a) @ b == np.cross(a, b)``."""
    x, y, z = np.asarray(a, dtype=float)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(W) -> np.ndarray:
    """Inverse of :func:`skew` for the antisymmetric part of ``W``."""
    W = np.asarray(W, dtype=float)
    return 0.5 * np.array([W[2, 1] - W[1, 2], W[0, 2] - W[2, 0], W[1, 0] - W[0, 1]])


def rodrigues(v) -> np.ndarray:
    """Rotation matrix of the rotation vector ``v`` (axis * angle)."""
    v = np.asarray(v, dtype=float)
    theta = float(np.linalg.norm(v))
    if theta < 1e-9:
        return np.eye(3)
    axis = v / theta
    K = skew(axis)
    c, s = np.cos(theta), np.sin(theta)
    return c * np.eye(3) + s * K + (1.0 - c) * np.outer(axis, axis)


def rotation_angle(R) -> float:
    """Angle of ``R`` in ``[0, pi]``.

    Uses ``atan2`` of the antisymmetric and trace parts, which equals
    ``arccos((tr R - 1) / 2)`` but stays accurate near 0 and pi.
    """
    R = np.asarray(R, dtype=float)
    sin_t = np.linalg.norm(vee(R))
    cos_t = 0.5 * (np.trace(R) - 1.0)
    return float(np.arctan2(sin_t, cos_t))


def log_rotation(R, previous=None, threshold: float = SMALL_ANGLE) -> np.ndarray:
    """Rotation vector of ``R`` on the canonical branch ``|v| in [0, pi]``.

    If ``previous`` is given and the angle of ``R`` is below ``threshold``,
    ``previous`` is returned unchanged: the axis of a near-identity
    rotation is not worth re-estimating.  Without ``previous`` the exact
    logarithm is returned for every angle.
    """
    R = np.asarray(R, dtype=float)
    theta = rotation_angle(R)
    if previous is not None and theta < threshold:
        return np.array(previous, dtype=float)
    w = vee(R)  # sin(theta) * axis
    if theta < 1e-6:
        # theta / sin(theta) = 1 + theta^2 / 6 + ...
        return w * (1.0 + theta * theta / 6.0)
    if theta < np.pi - 1e-3:
        return w * (theta / np.sin(theta))
    # Near pi the antisymmetric part vanishes; read the axis from
    # (R + R^T)/2 - cos(theta) I = (1 - cos(theta)) axis axis^T.
    S = 0.5 * (R + R.T) - np.cos(theta) * np.eye(3)
    j = int(np.argmax(np.diag(S)))
    axis = S[:, j] / np.sqrt(S[j, j])
    axis /= np.linalg.norm(axis)
    d = float(axis @ w)
    if abs(d) > 1e-14:
        if d < 0:
            axis = -axis
    else:
        # exactly pi: +axis and -axis are the same rotation; pick a canonical sign
        nz = np.flatnonzero(np.abs(axis) > 1e-12)
        if nz.size and axis[nz[0]] < 0:
            axis = -axis
    return theta * axis


def rotation_geodesic_error(R1, R2) -> float:
    """Angle of ``R1^T R2`` in radians, in ``[0, pi]``."""
    return rotation_angle(np.asarray(R1, dtype=float).T @ np.asarray(R2, dtype=float))


def project_to_so3(M) -> np.ndarray:
    """Nearest rotation (Frobenius norm) to ``M`` via the orthogonal polar factor."""
    U, _, Vt = np.linalg.svd(np.asarray(M, dtype=float))
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(U @ Vt)) or 1.0
    return U @ D @ Vt


def is_rotation(R, tol: float = _ORTHO_TOL) -> bool:
    R = np.asarray(R, dtype=float)
    return (
        R.shape == (3, 3)
        and np.allclose(R.T @ R, np.eye(3), atol=tol)
        and abs(np.linalg.det(R) - 1.0) <= tol
    )


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random axis with angle uniform on ``[0, pi]``."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return rodrigues(axis * rng.uniform(0.0, np.pi))


def euler_xyz(R) -> np.ndarray:
    """Intrinsic x-y-z (roll, pitch, yaw) angles with ``R = Rx(a) Ry(b) Rz(c)``."""
    R = np.asarray(R, dtype=float)
    a = np.arctan2(-R[1, 2], R[2, 2])
    b = np.arctan2(R[0, 2], np.hypot(R[1, 2], R[2, 2]))
    c = np.arctan2(-R[0, 1], R[0, 0])
    return np.array([a, b, c])


def euler_xyz_to_matrix(angles) -> np.ndarray:
    a, b, c = angles
    ca, sa, cb, sb, cc, sc = np.cos(a), np.sin(a), np.cos(b), np.sin(b), np.cos(c), np.sin(c)
    Rx = np.array([[1, 0, 0], [0, ca, -sa], [0, sa, ca]])
    Ry = np.array([[cb, 0, sb], [0, 1, 0], [-sb, 0, cb]])
    Rz = np.array([[cc, -sc, 0], [sc, cc, 0], [0, 0, 1]])
    return Rx @ Ry @ Rz


def euler_xyz_rate_matrix(angles) -> np.ndarray:
    """Matrix ``E`` with ``omega = E @ d(angles)/dt`` for the body rate of ``R = Rx Ry Rz``.

    ``omega`` is the right-perturbation rate, ``R^T dR/dt = [omega]x``.
    Singular at pitch ``+-pi/2``.
    """
    a, b, c = angles
    cb, sb, cc, sc = np.cos(b), np.sin(b), np.cos(c), np.sin(c)
    return np.array([[cb * cc, sc, 0.0], [-cb * sc, cc, 0.0], [sb, 0.0, 1.0]])


def wrap_angle(x):
    """Wrap angles to ``(-pi, pi]``."""
    y = np.mod(np.asarray(x, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    return np.where(y == -np.pi, np.pi, y)


@dataclass(frozen=True)
class AffineTransform7:
    """Similarity transform ``p -> t + s R p`` (scale, rotation, translation)."""

    s: float = 1.0
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "s", float(self.s))
        object.__setattr__(self, "R", np.array(self.R, dtype=float).reshape(3, 3))
        object.__setattr__(self, "t", np.array(self.t, dtype=float).reshape(3))
        if not self.s > 0:
            raise ValueError(f"scale must be positive, got {self.s}")

    @classmethod
    def from_theta(cls, theta) -> AffineTransform7:
        """Build from the parameter vector ``[tx, ty, tz, vx, vy, vz, s]``."""
        theta = np.asarray(theta, dtype=float)
        return cls(theta[6], rodrigues(theta[3:6]), theta[:3])

    def theta(self, previous_v=None) -> np.ndarray:
        v = log_rotation(self.R, previous=previous_v)
        return np.concatenate([self.t, v, [self.s]])

    def matrix(self) -> np.ndarray:
        A = np.eye(4)
        A[:3, :3] = self.s * self.R
        A[:3, 3] = self.t
        return A

    def apply(self, points) -> np.ndarray:
        """Transform a point ``(3,)`` or a stack of points ``(n, 3)``."""
        points = np.asarray(points, dtype=float)
        return self.t + self.s * points @ self.R.T

    def inverse(self) -> AffineTransform7:
        Rt = self.R.T
        return AffineTransform7(1.0 / self.s, Rt, -(Rt @ self.t) / self.s)

    def compose(self, other: AffineTransform7) -> AffineTransform7:
        """``self o other``: apply ``other`` first."""
        return AffineTransform7(self.s * other.s, self.R @ other.R, self.apply(other.t))

    def is_valid(self) -> bool:
        return self.s > 0 and is_rotation(self.R)


def apply_affine(A: AffineTransform7, o) -> np.ndarray:
    return A.apply(o)


@dataclass(frozen=True)
class Pose:
    """Rigid pose: orientation ``R`` (body to world) and position ``p``."""

    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    p: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "R", np.array(self.R, dtype=float).reshape(3, 3))
        object.__setattr__(self, "p", np.array(self.p, dtype=float).reshape(3))

    def inverse(self) -> Pose:
        return Pose(self.R.T, -self.R.T @ self.p)

    def compose(self, other: Pose) -> Pose:
        return Pose(self.R @ other.R, self.R @ other.p + self.p)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.p
        return T
