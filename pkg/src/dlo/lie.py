"""Rigid poses and the SE(3) exponential/logarithm.

Twists are 6-vectors ordered (translation rho, rotation omega).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import NearPiRotation

SMALL_ANGLE = 1e-8
NEAR_PI = 1e-6
_ORTHO_DRIFT = 1e-12


def hat(w) -> np.ndarray:
    wx, wy, wz = w
    return np.array([[0.0, -wz, wy], [wz, 0.0, -wx], [-wy, wx, 0.0]])


def vee(W: np.ndarray) -> np.ndarray:
    return np.array([W[2, 1], W[0, 2], W[1, 0]])


def twist_hat(xi) -> np.ndarray:
    """4x4 matrix xi^ of a twist."""
    xi = np.asarray(xi, dtype=np.float64)
    out = np.zeros((4, 4))
    out[:3, :3] = hat(xi[3:])
    out[:3, 3] = xi[:3]
    return out


def _orthonormalize(R: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(R)
    Q = U @ Vt
    if np.linalg.det(Q) < 0:
        U[:, -1] *= -1
        Q = U @ Vt
    return Q


@dataclass(frozen=True)
class Pose:
    """Rigid transform p -> R p + t."""

    R: np.ndarray
    t: np.ndarray
    # yaw this pose was embedded from, so planar_project can return it bit-exactly
    planar_yaw: float | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        R = np.array(self.R, dtype=np.float64).reshape(3, 3)
        t = np.array(self.t, dtype=np.float64).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M) -> "Pose":
        M = np.asarray(M, dtype=np.float64)
        return cls(M[:3, :3], M[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.t
        return M

    def inverse(self) -> "Pose":
        return Pose(self.R.T, -self.R.T @ self.t)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an (N, 3) array (or a single 3-vector)."""
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.t

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def rotation_angle(self) -> float:
        c = (np.trace(self.R) - 1.0) / 2.0
        s = np.linalg.norm(vee(self.R - self.R.T)) / 2.0
        return math.atan2(s, c)

    def is_close(self, other: "Pose", atol: float = 1e-9) -> bool:
        return bool(np.allclose(self.R, other.R, atol=atol, rtol=0) and np.allclose(self.t, other.t, atol=atol, rtol=0))


class PlanarPose(NamedTuple):
    x: float
    y: float
    yaw: float


def wrap_angle(a: float) -> float:
    """Wrap to [-pi, pi)."""
    w = (a + math.pi) % (2 * math.pi) - math.pi
    return w if w < math.pi else -math.pi


def _so3_coefficients(theta: float) -> tuple[float, float, float]:
    """sin(t)/t, (1 - cos t)/t^2 and (t - sin t)/t^3 without cancellation near zero."""
    if theta < SMALL_ANGLE:
        return 1.0, 0.5, 1.0 / 6.0
    half = 0.5 * theta
    a = math.sin(theta) / theta
    b = 0.5 * (math.sin(half) / half) ** 2
    if theta < 0.1:
        t2 = theta * theta
        c = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0 - t2**3 / 362880.0 + t2**4 / 39916800.0
    else:
        c = (theta - math.sin(theta)) / theta**3
    return a, b, c


def exp_so3(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    a, b, _ = _so3_coefficients(float(np.linalg.norm(w)))
    W = hat(w)
    return np.eye(3) + a * W + b * (W @ W)


def left_jacobian_so3(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    _, b, c = _so3_coefficients(float(np.linalg.norm(w)))
    W = hat(w)
    return np.eye(3) + b * W + c * (W @ W)


def exp_map(xi) -> Pose:
    """SE(3) exponential of a (rho, omega) twist in closed form."""
    xi = np.asarray(xi, dtype=np.float64).reshape(6)
    rho, w = xi[:3], xi[3:]
    return Pose(exp_so3(w), left_jacobian_so3(w) @ rho)


def log_map(T: Pose) -> np.ndarray:
    """Inverse of :func:`exp_map` for rotation angles below pi - 1e-6."""
    R = T.R
    theta = T.rotation_angle()
    if theta > math.pi - NEAR_PI:
        raise NearPiRotation(f"rotation angle {theta} is within {NEAR_PI} of pi")
    if theta < SMALL_ANGLE:
        w = 0.5 * vee(R - R.T)
    else:
        w = (theta / (2 * math.sin(theta))) * vee(R - R.T)
    if theta < 0.1:
        t2 = theta * theta
        coef = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0 + t2**3 / 1209600.0
    else:
        coef = (1.0 - theta * math.sin(theta) / (4.0 * math.sin(0.5 * theta) ** 2)) / theta**2
    W = hat(w)
    V_inv = np.eye(3) - 0.5 * W + coef * (W @ W)
    return np.concatenate([V_inv @ T.t, w])


def compose(A: Pose, B: Pose) -> Pose:
    R = A.R @ B.R
    if np.abs(R.T @ R - np.eye(3)).max() > _ORTHO_DRIFT:
        R = _orthonormalize(R)
    return Pose(R, A.R @ B.t + A.t)


def rot_z(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def euler_to_matrix(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """R = Rz(yaw) Ry(pitch) Rx(roll)."""
    cr, sr = math.cos(roll), math.sin(roll)
    cp, sp = math.cos(pitch), math.sin(pitch)
    Rx = np.array([[1.0, 0.0, 0.0], [0.0, cr, -sr], [0.0, sr, cr]])
    Ry = np.array([[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]])
    return rot_z(yaw) @ Ry @ Rx


def planar_embed(p: PlanarPose) -> Pose:
    x, y, yaw = p
    return Pose(rot_z(yaw), [x, y, 0.0], planar_yaw=float(yaw))


def planar_project(T: Pose) -> PlanarPose:
    """(x, y, yaw) of a pose; exact inverse of :func:`planar_embed` for wrapped yaws."""
    if T.planar_yaw is not None and -math.pi <= T.planar_yaw < math.pi:
        yaw = T.planar_yaw
    else:
        yaw = wrap_angle(math.atan2(T.R[1, 0], T.R[0, 0]))
    return PlanarPose(float(T.t[0]), float(T.t[1]), yaw)


def planar_twist(delta) -> np.ndarray:
    """Embed a planar increment (dx, dy, dyaw) into a 6-vector twist."""
    dx, dy, dyaw = delta
    return np.array([dx, dy, 0.0, 0.0, 0.0, dyaw])


def quaternion_from_matrix(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (qx, qy, qz, qw) with qw >= 0."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = [(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s, 0.25 * s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s, (R[2, 1] - R[1, 2]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s, (R[0, 2] - R[2, 0]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s, (R[1, 0] - R[0, 1]) / s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return -q if q[3] < 0 else q


def matrix_from_quaternion(q) -> np.ndarray:
    x, y, z, w = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )
