"""Rigid transforms and rotation helpers shared by every other module.

Rotations are stored as 3x3 matrices; quaternions (scalar first) only appear
at the I/O boundary and inside the rotation-group tables.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from artipose.errors import BadAxis, InvalidRotation

ROTATION_TOL = 1e-9
AXIS_TOL = 1e-6


def validate_rotation(R: np.ndarray, tol: float = ROTATION_TOL) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise InvalidRotation("rotation must be a finite 3x3 matrix", details={"shape": list(R.shape)})
    ortho_err = float(np.abs(R.T @ R - np.eye(3)).max())
    det = float(np.linalg.det(R))
    if ortho_err > tol or abs(det - 1.0) > tol:
        raise InvalidRotation(
            "matrix is not a proper rotation",
            details={"orthonormality_error": ortho_err, "det": det},
        )
    return R


def unit_axis(axis, tol: float = AXIS_TOL) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64).reshape(3)
    norm = float(np.linalg.norm(axis))
    if not np.isfinite(norm) or abs(norm - 1.0) > tol:
        raise BadAxis("joint axis must be unit length", details={"norm": norm})
    return axis / norm


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrices; accepts (3,) or (N, 3)."""
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def exp_so3(omega) -> np.ndarray:
    return Rotation.from_rotvec(np.asarray(omega, dtype=np.float64)).as_matrix()


def log_so3(R: np.ndarray) -> np.ndarray:
    return Rotation.from_matrix(R).as_rotvec()


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M: np.ndarray) -> RigidTransform:
        M = np.asarray(M, dtype=np.float64)
        return cls(M[:3, :3], M[:3, 3])

    @classmethod
    def from_quaternion(cls, q_wxyz, translation=(0.0, 0.0, 0.0)) -> RigidTransform:
        R = Rotation.from_quat(np.asarray(q_wxyz, dtype=np.float64), scalar_first=True).as_matrix()
        return cls(R, translation)

    @classmethod
    def pure_translation(cls, t) -> RigidTransform:
        return cls(np.eye(3), t)

    def as_matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def quaternion(self) -> np.ndarray:
        """Unit quaternion (w, x, y, z) with w >= 0."""
        q = Rotation.from_matrix(self.rotation).as_quat(scalar_first=True)
        return -q if q[0] < 0 else q

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.rotation, np.eye(3)) and not self.translation.any())


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """a after b: compose(a, b)(x) == a(b(x))."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(T: RigidTransform) -> RigidTransform:
    Rt = T.rotation.T
    return RigidTransform(Rt, -(Rt @ T.translation))


def rodrigues(axis, angle: float) -> np.ndarray:
    return Rotation.from_rotvec(np.asarray(axis, dtype=np.float64) * float(angle)).as_matrix()


def rotation_about_line(axis, pivot, angle: float) -> RigidTransform:
    u = unit_axis(axis)
    p = np.asarray(pivot, dtype=np.float64).reshape(3)
    R = rodrigues(u, angle)
    return RigidTransform(R, p - R @ p)


def translation_about_line(axis, s: float) -> RigidTransform:
    u = unit_axis(axis)
    return RigidTransform(np.eye(3), float(s) * u)


def geodesic_deg(Ra: np.ndarray, Rb: np.ndarray) -> float:
    cos = (np.trace(np.asarray(Ra).T @ np.asarray(Rb)) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))


def line_distance(u1, p1, u2, p2, parallel_tol: float = 1e-9) -> float:
    """Minimum distance between the lines p1 + s*u1 and p2 + s*u2."""
    u1 = np.asarray(u1, dtype=np.float64)
    u2 = np.asarray(u2, dtype=np.float64)
    u1 = u1 / np.linalg.norm(u1)
    u2 = u2 / np.linalg.norm(u2)
    w = np.asarray(p2, dtype=np.float64) - np.asarray(p1, dtype=np.float64)
    n = np.cross(u1, u2)
    n_norm = float(np.linalg.norm(n))
    if n_norm < parallel_tol:
        return float(np.linalg.norm(np.cross(w, u1)))
    return float(abs(w @ n) / n_norm)


def random_transform(rng: np.random.Generator, translation_scale: float = 1.0) -> RigidTransform:
    R = Rotation.random(random_state=rng).as_matrix()
    return RigidTransform(R, rng.uniform(-translation_scale, translation_scale, size=3))
