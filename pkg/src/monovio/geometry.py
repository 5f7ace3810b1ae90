"""Rotation, quaternion, and tangent-space utilities shared by all modules.

Conventions used throughout the package:
  - Quaternions are Hamilton, scalar-first, stored as numpy arrays [w, x, y, z].
  - R(q) maps body-frame vectors into the parent frame: v_parent = R(q) @ v_body.
  - Most functions broadcast over leading batch dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

QUAT_NORM_TOL = 1e-9
ROT_ORTHO_TOL = 1e-9


class GimbalLockError(ValueError):
    """Euler decomposition requested too close to pitch = +-90 deg."""


def quat_identity() -> np.ndarray:
    return np.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    if q.ndim == 1:
        n = np.sqrt(q @ q)
        if n < 1e-12:
            raise ValueError("cannot normalize near-zero quaternion")
        return q / n
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n < 1e-12):
        raise ValueError("cannot normalize near-zero quaternion")
    return q / n


def quat_canonical(q):
    """Resolve the double cover: flip sign so that w >= 0."""
    q = quat_normalize(q)
    sign = np.where(q[..., :1] < 0.0, -1.0, 1.0)
    return q * sign


def quat_conjugate(q):
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_inverse(q):
    # unit quaternion assumed; inverse == conjugate
    return quat_conjugate(quat_normalize(q))


def quat_mul(a, b):
    """Hamilton product a (x) b, renormalized."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim == 1 and b.ndim == 1:
        w1, x1, y1, z1 = a
        w2, x2, y2, z2 = b
        out = np.array(
            [
                w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
                w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
                w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
                w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
            ]
        )
        return quat_normalize(out)
    w1, x1, y1, z1 = (a[..., i] for i in range(4))
    w2, x2, y2, z2 = (b[..., i] for i in range(4))
    out = np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        axis=-1,
    )
    return quat_normalize(out)


def quat_rotate(q, v):
    """Rotate vector(s) v by quaternion(s) q without forming the matrix."""
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    qv = q[..., 1:]
    w = q[..., :1]
    t = 2.0 * np.cross(qv, v)
    return v + w * t + np.cross(qv, t)


def quat_to_rot(q):
    q = quat_normalize(q)
    if q.ndim == 1:
        w, x, y, z = q
        xx, yy, zz = x * x, y * y, z * z
        wx, wy, wz = w * x, w * y, w * z
        xy, xz, yz = x * y, x * z, y * z
        return np.array(
            [
                [1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy)],
                [2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx)],
                [2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy)],
            ]
        )
    w, x, y, z = (q[..., i] for i in range(4))
    xx, yy, zz = x * x, y * y, z * z
    wx, wy, wz = w * x, w * y, w * z
    xy, xz, yz = x * y, x * z, y * z
    rows = [
        [1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy)],
        [2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx)],
        [2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy)],
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def rot_to_quat(R):
    """Shepperd-style conversion; returns the canonical (w >= 0) quaternion."""
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3):
        raise ValueError("rot_to_quat expects a single 3x3 matrix")
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0.0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        )
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = np.array(
            [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
        )
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q = np.array(
            [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
        )
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q = np.array(
            [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
        )
    return quat_canonical(q)


def quat_exp(rotvec):
    """Axis-angle rotation vector -> unit quaternion (exact exponential map)."""
    rotvec = np.asarray(rotvec, dtype=float)
    if rotvec.ndim == 1:
        angle = np.sqrt(rotvec @ rotvec)
        half = 0.5 * angle
        # sin(x)/x Taylor fallback keeps the map smooth through zero
        k = 0.5 - angle * angle / 48.0 if angle < 1e-8 else np.sin(half) / angle
        return quat_normalize(np.array([np.cos(half), *(rotvec * k)]))
    angle = np.linalg.norm(rotvec, axis=-1, keepdims=True)
    half = 0.5 * angle
    small = angle < 1e-8
    with np.errstate(invalid="ignore", divide="ignore"):
        k = np.where(small, 0.5 - angle * angle / 48.0, np.sin(half) / np.where(small, 1.0, angle))
    w = np.cos(half)
    return quat_normalize(np.concatenate([w, rotvec * k], axis=-1))


def quat_log(q):
    """Unit quaternion -> rotation vector (inverse of quat_exp)."""
    q = quat_canonical(q)
    w = np.clip(q[..., 0], -1.0, 1.0)
    vn = np.linalg.norm(q[..., 1:], axis=-1)
    angle = 2.0 * np.arctan2(vn, w)
    scale = np.where(vn < 1e-12, 2.0, angle / np.where(vn < 1e-12, 1.0, vn))
    return q[..., 1:] * scale[..., None]


def quat_angle(q) -> float:
    """Absolute rotation angle of a quaternion, in radians."""
    q = np.asarray(q, dtype=float)
    return float(2.0 * np.arctan2(np.linalg.norm(q[..., 1:], axis=-1), np.abs(q[..., 0])))


def quat_angle_between(a, b) -> float:
    return quat_angle(quat_mul(quat_inverse(a), b))


def skew(v):
    v = np.asarray(v, dtype=float)
    if v.ndim == 1:
        x, y, z = v
        return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    zero = np.zeros_like(x)
    rows = [[zero, -z, y], [z, zero, -x], [-y, x, zero]]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def omega_matrix(w):
    """4x4 quaternion-rate matrix for scalar-first layout: q_dot = 0.5 * Omega(w) @ q."""
    w = np.asarray(w, dtype=float)
    out = np.zeros(w.shape[:-1] + (4, 4))
    out[..., 0, 1:] = -w
    out[..., 1:, 0] = w
    out[..., 1:, 1:] = -skew(w)
    return out


def small_angle_quat(dtheta):
    """First-order perturbation quaternion [1, dtheta/2], normalized."""
    dtheta = np.asarray(dtheta, dtype=float)
    one = np.ones(dtheta.shape[:-1] + (1,))
    return quat_normalize(np.concatenate([one, 0.5 * dtheta], axis=-1))


def tangent_basis(g_dir):
    """Two orthonormal vectors spanning the plane orthogonal to unit vector g_dir.

    b1 = normalize(g_dir x pivot) with pivot = (1,0,0), falling back to (0,0,1)
    when g_dir is nearly parallel to the x axis; b2 = g_dir x b1.
    """
    g = np.asarray(g_dir, dtype=float)
    n = np.linalg.norm(g, axis=-1)
    if np.any(np.abs(n - 1.0) > 1e-6):
        raise ValueError("tangent_basis expects a unit vector")
    pivot_x = np.zeros_like(g)
    pivot_x[..., 0] = 1.0
    pivot_z = np.zeros_like(g)
    pivot_z[..., 2] = 1.0
    use_z = (np.abs(g[..., 0]) > 1.0 - 1e-6)[..., None]
    pivot = np.where(use_z, pivot_z, pivot_x)
    b1 = np.cross(g, pivot)
    b1 = b1 / np.linalg.norm(b1, axis=-1, keepdims=True)
    b2 = np.cross(g, b1)
    return b1, b2


def rot_zyx(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """R = Rz(yaw) @ Ry(pitch) @ Rx(roll)."""
    cr, sr = np.cos(roll), np.sin(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    return np.array(
        [
            [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
            [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
            [-sp, cp * sr, cp * cr],
        ]
    )


def yaw_roll_pitch_decompose(q):
    """Decompose q as Rz(yaw) Ry(pitch) Rx(roll); returns (roll, pitch, yaw).

    Raises GimbalLockError within ~1e-4 rad of pitch = +-90 deg, where yaw and
    roll are no longer separable.
    """
    R = quat_to_rot(q)
    sp = -R[2, 0]
    if abs(sp) > 1.0 - 1e-8 or abs(abs(sp) - 1.0) < 1e-8:
        raise GimbalLockError("pitch too close to +-90 deg")
    pitch = np.arcsin(np.clip(sp, -1.0, 1.0))
    if np.cos(pitch) < 1e-4:
        raise GimbalLockError("pitch too close to +-90 deg")
    roll = np.arctan2(R[2, 1], R[2, 2])
    yaw = np.arctan2(R[1, 0], R[0, 0])
    return float(roll), float(pitch), float(yaw)


def wrap_angle(a):
    """Wrap angle(s) into (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    out = -((-a + np.pi) % (2.0 * np.pi) - np.pi)
    return float(out) if out.ndim == 0 else out


def sphere_backproject(obs):
    """Normalized-image-plane point (u, v) -> unit ray normalize((u, v, 1))."""
    obs = np.asarray(obs, dtype=float)
    ray = np.concatenate([obs, np.ones(obs.shape[:-1] + (1,))], axis=-1)
    return ray / np.linalg.norm(ray, axis=-1, keepdims=True)


@dataclass
class Pose:
    """Rigid transform: rotation quaternion (w,x,y,z) plus translation (m)."""

    q: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        self.q = quat_canonical(np.asarray(self.q, dtype=float))
        self.p = np.asarray(self.p, dtype=float)

    @staticmethod
    def identity() -> "Pose":
        return Pose(quat_identity(), np.zeros(3))

    def rotation(self) -> np.ndarray:
        return quat_to_rot(self.q)

    def transform(self, v) -> np.ndarray:
        """Map a point from this pose's child frame into the parent frame."""
        return quat_rotate(self.q, v) + self.p

    def inverse(self) -> "Pose":
        qi = quat_inverse(self.q)
        return Pose(qi, -quat_rotate(qi, self.p))

    def compose(self, other: "Pose") -> "Pose":
        return Pose(quat_mul(self.q, other.q), self.transform(other.p))
