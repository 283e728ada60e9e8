"""Rigid-transform arithmetic on SE(3).

Poses are stored as a unit quaternion (w, x, y, z) plus a translation
3-vector.  Twists are 6-vectors split into a translational part ``rho``
and a rotational part ``phi`` (radians); the flattened order used
throughout the package is ``[rho, phi]``.

Everything is double precision.  The module-level helpers (``quat_*``,
``so3_*``, ``se3_*``) broadcast over arbitrary leading batch dimensions;
the ``SE3Pose`` / ``Twist`` dataclasses wrap the single-pose case and are
the unit of the public API.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Below this rotation angle (radians) the closed-form Rodrigues
# coefficients switch to their 2nd-order Taylor series.
SMALL_ANGLE = 1e-6

# log() refuses rotations at or beyond this angle: the principal branch
# is ambiguous there and a trajectory knot reaching it means divergence.
LOG_ANGLE_CUTOFF = np.pi - 1e-6


# ---------------------------------------------------------------------------
# batched quaternion / SO(3) primitives
# ---------------------------------------------------------------------------

def quat_normalize(q: np.ndarray) -> np.ndarray:
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product of (..., 4) quaternion arrays."""
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


def cross3(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cross product on (..., 3) arrays (np.cross has heavy axis plumbing)."""
    ax, ay, az = a[..., 0], a[..., 1], a[..., 2]
    bx, by, bz = b[..., 0], b[..., 1], b[..., 2]
    return np.stack([ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx], axis=-1)


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vectors (..., 3) by unit quaternions (..., 4)."""
    qv = q[..., 1:]
    w = q[..., :1]
    t = 2.0 * cross3(qv, v)
    return v + w * t + cross3(qv, t)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Unit quaternions (..., 4) to rotation matrices (..., 3, 3)."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    m = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    m[..., 0, 0] = 1.0 - 2.0 * (yy + zz)
    m[..., 0, 1] = 2.0 * (xy - wz)
    m[..., 0, 2] = 2.0 * (xz + wy)
    m[..., 1, 0] = 2.0 * (xy + wz)
    m[..., 1, 1] = 1.0 - 2.0 * (xx + zz)
    m[..., 1, 2] = 2.0 * (yz - wx)
    m[..., 2, 0] = 2.0 * (xz - wy)
    m[..., 2, 1] = 2.0 * (yz + wx)
    m[..., 2, 2] = 1.0 - 2.0 * (xx + yy)
    return m


def quat_from_matrix(m: np.ndarray) -> np.ndarray:
    """Rotation matrix (3, 3) to unit quaternion with w >= 0 (Shepperd)."""
    m = np.asarray(m, dtype=np.float64)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0.0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        )
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array(
            [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        )
    elif m[1, 1] >= m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array(
            [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        )
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array(
            [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        )
    if q[0] < 0.0:
        q = -q
    return quat_normalize(q)


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrices (..., 3, 3) of vectors (..., 3)."""
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    zero = np.zeros_like(x)
    return np.stack(
        [
            np.stack([zero, -z, y], axis=-1),
            np.stack([z, zero, -x], axis=-1),
            np.stack([-y, x, zero], axis=-1),
        ],
        axis=-2,
    )


def so3_exp_quat(phi: np.ndarray) -> np.ndarray:
    """Rotation vectors (..., 3) to unit quaternions."""
    angle = np.linalg.norm(phi, axis=-1, keepdims=True)
    half = 0.5 * angle
    small = angle < SMALL_ANGLE
    # sin(a/2)/a, with series 1/2 - a^2/48 near zero
    safe = np.where(small, 1.0, angle)
    k = np.where(small, 0.5 - angle * angle / 48.0, np.sin(half) / safe)
    w = np.cos(half)
    return np.concatenate([w, k * phi], axis=-1)


def so3_log_quat(q: np.ndarray) -> np.ndarray:
    """Principal-branch rotation vectors (..., 3) of unit quaternions.

    No cutoff check here; callers that need the near-pi guard do it
    themselves (see :func:`log`).
    """
    q = np.where(q[..., :1] < 0.0, -q, q)
    w = q[..., 0]
    v = q[..., 1:]
    s = np.linalg.norm(v, axis=-1)
    angle = 2.0 * np.arctan2(s, w)
    small = s < SMALL_ANGLE
    safe = np.where(small, 1.0, s)
    # angle/s, with series 2/w - 2 s^2 / (3 w^3) near zero
    k = np.where(small, 2.0 / w - 2.0 * s * s / (3.0 * w**3), angle / safe)
    return k[..., None] * v


def _v_coeffs(angle: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rodrigues V-matrix coefficients A=(1-cos a)/a^2, B=(a-sin a)/a^3."""
    small = angle < SMALL_ANGLE
    a2 = angle * angle
    safe2 = np.where(small, 1.0, a2)
    coef_a = np.where(small, 0.5 - a2 / 24.0, (1.0 - np.cos(angle)) / safe2)
    coef_b = np.where(small, 1.0 / 6.0 - a2 / 120.0, (angle - np.sin(angle)) / (safe2 * np.where(small, 1.0, angle)))
    return coef_a, coef_b


def _apply_v(phi: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """t = V(phi) rho without forming the matrix."""
    angle = np.linalg.norm(phi, axis=-1, keepdims=True)
    coef_a, coef_b = _v_coeffs(angle)
    c1 = cross3(phi, rho)
    c2 = cross3(phi, c1)
    return rho + coef_a * c1 + coef_b * c2


def _apply_v_inv(phi: np.ndarray, t: np.ndarray) -> np.ndarray:
    """rho = V(phi)^-1 t without forming the matrix."""
    angle = np.linalg.norm(phi, axis=-1, keepdims=True)
    small = angle < SMALL_ANGLE
    a2 = angle * angle
    safe2 = np.where(small, 1.0, a2)
    half = 0.5 * angle
    # (1 - a/(2 tan(a/2))) / a^2, with series 1/12 + a^2/720 near zero
    tan_half = np.tan(np.where(small, 1.0, half))
    coef = np.where(small, 1.0 / 12.0 + a2 / 720.0, (1.0 - half / tan_half) / safe2)
    c1 = cross3(phi, t)
    c2 = cross3(phi, c1)
    return t - 0.5 * c1 + coef * c2


# ---------------------------------------------------------------------------
# batched SE(3) on (quaternion, translation) pairs
# ---------------------------------------------------------------------------

def se3_compose_qt(qa, ta, qb, tb):
    return quat_normalize(quat_multiply(qa, qb)), quat_rotate(qa, tb) + ta


def se3_inverse_qt(q, t):
    qc = quat_conjugate(q)
    return qc, -quat_rotate(qc, t)


def se3_exp_qt(rho: np.ndarray, phi: np.ndarray):
    return so3_exp_quat(phi), _apply_v(phi, rho)


def se3_log_qt(q: np.ndarray, t: np.ndarray):
    phi = so3_log_quat(q)
    return _apply_v_inv(phi, t), phi


def rotation_angle(q: np.ndarray) -> np.ndarray:
    """Rotation angle in [0, pi] of unit quaternions (..., 4)."""
    w = np.abs(q[..., 0])
    s = np.linalg.norm(q[..., 1:], axis=-1)
    return 2.0 * np.arctan2(s, w)


# ---------------------------------------------------------------------------
# single-pose API
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Twist:
    """Tangent-space coordinates: translational rho, rotational phi."""

    rho: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rho", np.asarray(self.rho, dtype=np.float64).reshape(3))
        object.__setattr__(self, "phi", np.asarray(self.phi, dtype=np.float64).reshape(3))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.rho, self.phi])

    @staticmethod
    def from_vector(v: np.ndarray) -> "Twist":
        v = np.asarray(v, dtype=np.float64).reshape(6)
        return Twist(v[:3], v[3:])

    @staticmethod
    def zero() -> "Twist":
        return Twist(np.zeros(3), np.zeros(3))


@dataclass(frozen=True)
class SE3Pose:
    """Rigid transform: unit quaternion (w, x, y, z) and translation."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n < 1e-8:
            raise ValueError("pose quaternion is zero or non-finite")
        q = q / n
        if q[0] < 0.0:
            q = -q
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "SE3Pose":
        return SE3Pose()

    def matrix(self) -> np.ndarray:
        """Homogeneous 4x4 matrix."""
        m = np.eye(4)
        m[:3, :3] = quat_to_matrix(self.rotation)
        m[:3, 3] = self.translation
        return m

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)


def exp(xi: Twist) -> SE3Pose:
    """Exponential map: twist to pose (Rodrigues rotation, V-matrix translation)."""
    rho, phi = xi.rho, xi.phi
    if not (np.all(np.isfinite(rho)) and np.all(np.isfinite(phi))):
        raise ValueError("exp: twist has non-finite components")
    q, t = se3_exp_qt(rho, phi)
    return SE3Pose(q, t)


def log(pose: SE3Pose) -> Twist:
    """Principal-branch logarithm.

    Raises ValueError when the rotation angle is at or beyond
    pi - 1e-6: the branch is ambiguous there and reaching it during
    optimization means the trajectory diverged.
    """
    angle = rotation_angle(pose.rotation)
    if angle >= LOG_ANGLE_CUTOFF:
        raise ValueError(f"log: rotation angle {angle:.9f} too close to pi, branch ambiguous")
    rho, phi = se3_log_qt(pose.rotation, pose.translation)
    return Twist(rho, phi)


def compose(a: SE3Pose, b: SE3Pose) -> SE3Pose:
    """Group product a . b (apply b first, then a)."""
    q, t = se3_compose_qt(a.rotation, a.translation, b.rotation, b.translation)
    return SE3Pose(q, t)


def inverse(pose: SE3Pose) -> SE3Pose:
    q, t = se3_inverse_qt(pose.rotation, pose.translation)
    return SE3Pose(q, t)


def act_point(pose: SE3Pose, p: np.ndarray) -> np.ndarray:
    """R p + t."""
    p = np.asarray(p, dtype=np.float64)
    return quat_rotate(pose.rotation, p) + pose.translation


def quat_to_rot(q: np.ndarray) -> np.ndarray:
    """3x3 rotation matrix of a quaternion, renormalized internally."""
    q = np.asarray(q, dtype=np.float64).reshape(4)
    n = np.linalg.norm(q)
    if n < 1e-8:
        raise ValueError("quat_to_rot: zero quaternion")
    return quat_to_matrix(q / n)


def relative_twist(a: SE3Pose, b: SE3Pose) -> Twist:
    """log(a^-1 . b): the twist taking a to b."""
    return log(compose(inverse(a), b))


def distance(a: SE3Pose, b: SE3Pose) -> tuple[float, float]:
    """(rotation angle in radians, translation norm) between two poses."""
    rel_q = quat_multiply(quat_conjugate(a.rotation), b.rotation)
    return float(rotation_angle(rel_q)), float(np.linalg.norm(b.translation - a.translation))
