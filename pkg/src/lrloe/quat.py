"""Unit-quaternion algebra.

Conventions used throughout the package:

- Quaternions are scalar-first arrays ``[w, x, y, z]``.
- All functions broadcast over leading axes, so a batch of quaternions is an
  array of shape ``(..., 4)`` and a batch of 3-vectors has shape ``(..., 3)``.
- ``exp_q``/``log_q`` use the half-angle form: ``exp_q(u) = (cos|u|, sin|u| u/|u|)``
  represents a rotation by ``2|u|``. Rotation vectors (axis times angle, in
  radians) go through ``rotvec_quat``/``quat_rotvec`` which apply the factor 2.
- ``q`` denotes the body-to-navigation rotation, ``to_rotation(q) @ v_b = v_n``.
"""

from __future__ import annotations

import numpy as np

IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])

# below this vector-part norm log_q switches to its series form
_SMALL = 1e-7


def normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def canonical(q: np.ndarray) -> np.ndarray:
    """Return ``q`` flipped onto the ``w >= 0`` hemisphere.

    On the ``w == 0`` equator the first non-zero vector component is made
    positive, so ``canonical(q) == canonical(-q)`` everywhere.
    """
    q = np.asarray(q, dtype=float)
    lead = np.where(q[..., 0] != 0.0, q[..., 0], np.where(q[..., 1] != 0.0, q[..., 1], np.where(q[..., 2] != 0.0, q[..., 2], q[..., 3])))
    return np.where(lead[..., None] < 0.0, -q, q)


def hamilton(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product ``a ⊙ b``, renormalised."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    out = np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )
    return normalize(out)


def conj(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def exp_q(u: np.ndarray) -> np.ndarray:
    """Quaternion exponential of a pure 3-vector, ``(cos|u|, sin|u| u/|u|)``."""
    u = np.asarray(u, dtype=float)
    n = np.linalg.norm(u, axis=-1, keepdims=True)
    # np.sinc(x) = sin(pi x)/(pi x), so this is sin(n)/n with the limit 1 at 0
    vec = np.sinc(n / np.pi) * u
    return normalize(np.concatenate([np.cos(n), vec], axis=-1))


def log_q(q: np.ndarray) -> np.ndarray:
    """Quaternion logarithm on the ``w >= 0`` branch.

    Inverse of :func:`exp_q` for ``|u| <= pi/2``; ``log_q(q) == log_q(-q)``.
    """
    q = canonical(q)
    w = q[..., :1]
    v = q[..., 1:]
    s = np.linalg.norm(v, axis=-1, keepdims=True)
    small = s < _SMALL
    s_safe = np.where(small, 1.0, s)
    w_safe = np.where(small & (w > 0.5), w, 1.0)
    # atan2(s, w)/s -> 1/w - s^2/(3 w^3) as s -> 0
    factor = np.where(
        small,
        (1.0 - s * s / (3.0 * w_safe * w_safe)) / w_safe,
        np.arctan2(s, w) / s_safe,
    )
    return factor * v


def rotvec_quat(phi: np.ndarray) -> np.ndarray:
    """Quaternion of a rotation vector (axis times angle in radians)."""
    return exp_q(0.5 * np.asarray(phi, dtype=float))


def quat_rotvec(q: np.ndarray) -> np.ndarray:
    """Rotation vector of ``q``; its norm is the rotation angle in ``[0, pi]``."""
    return 2.0 * log_q(q)


def angle(q: np.ndarray) -> np.ndarray:
    """Rotation angle of ``q`` in ``[0, pi]``."""
    q = canonical(q)
    s = np.linalg.norm(q[..., 1:], axis=-1)
    return 2.0 * np.arctan2(s, q[..., 0])


def geodesic(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Angle of the rotation taking ``b`` to ``a``.

    Uses the chord form ``4 atan2(|a - b|, |a + b|)`` (with ``b`` flipped onto
    ``a``'s hemisphere), which stays accurate for tiny angles where
    ``arccos`` of the dot product loses half the digits.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    sign = np.where(np.sum(a * b, axis=-1, keepdims=True) < 0.0, -1.0, 1.0)
    b = sign * b
    return 4.0 * np.arctan2(np.linalg.norm(a - b, axis=-1), np.linalg.norm(a + b, axis=-1))


def to_rotation(q: np.ndarray) -> np.ndarray:
    """Rotation matrix ``R{q}`` with shape ``(..., 3, 3)``."""
    q = normalize(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    xx, yy, zz = x * x, y * y, z * z
    wx, wy, wz = w * x, w * y, w * z
    xy, xz, yz = x * y, x * z, y * z
    rows = [
        [1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy)],
        [2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx)],
        [2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy)],
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``R{q} v`` for broadcastable batches."""
    return np.einsum("...ij,...j->...i", to_rotation(q), v)


def rotate_inv(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``R{q}^T v`` for broadcastable batches."""
    return np.einsum("...ji,...j->...i", to_rotation(q), v)


def to_euler_zyx(q: np.ndarray) -> np.ndarray:
    """Yaw, pitch, roll (radians) with ``R = Rz(yaw) Ry(pitch) Rx(roll)``.

    At gimbal lock (``|pitch| = pi/2``) roll is set to 0 and the whole
    rotation about the vertical is reported as yaw.
    """
    q = normalize(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    sp = np.clip(2.0 * (w * y - x * z), -1.0, 1.0)
    pitch = np.arcsin(sp)
    yaw = np.arctan2(2.0 * (w * z + x * y), 1.0 - 2.0 * (y * y + z * z))
    roll = np.arctan2(2.0 * (w * x + y * z), 1.0 - 2.0 * (x * x + y * y))
    locked = np.abs(sp) > 1.0 - 1e-12
    # at lock R[0,1] = -sin(yaw - s*roll) and R[1,1] = cos(yaw - s*roll)
    merged = np.arctan2(-2.0 * (x * y - w * z), 1.0 - 2.0 * (x * x + z * z))
    yaw = np.where(locked, merged, yaw)
    roll = np.where(locked, 0.0, roll)
    return np.stack([yaw, pitch, roll], axis=-1)


def from_euler_zyx(ypr: np.ndarray) -> np.ndarray:
    ypr = np.asarray(ypr, dtype=float)
    hy, hp, hr = 0.5 * ypr[..., 0], 0.5 * ypr[..., 1], 0.5 * ypr[..., 2]
    cy, sy = np.cos(hy), np.sin(hy)
    cp, sp = np.cos(hp), np.sin(hp)
    cr, sr = np.cos(hr), np.sin(hr)
    q = np.stack(
        [
            cr * cp * cy + sr * sp * sy,
            sr * cp * cy - cr * sp * sy,
            cr * sp * cy + sr * cp * sy,
            cr * cp * sy - sr * sp * cy,
        ],
        axis=-1,
    )
    return normalize(q)


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix ``[v]x`` with shape ``(..., 3, 3)``."""
    v = np.asarray(v, dtype=float)
    z = np.zeros(v.shape[:-1])
    x, y, w = v[..., 0], v[..., 1], v[..., 2]
    return np.stack(
        [
            np.stack([z, -w, y], axis=-1),
            np.stack([w, z, -x], axis=-1),
            np.stack([-y, x, z], axis=-1),
        ],
        axis=-2,
    )


def from_two_vectors(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Rotation vector of the shortest-arc rotation taking direction ``a`` to ``b``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    a = a / np.linalg.norm(a, axis=-1, keepdims=True)
    b = b / np.linalg.norm(b, axis=-1, keepdims=True)
    c = np.cross(a, b)
    s = np.linalg.norm(c, axis=-1, keepdims=True)
    ang = np.arctan2(s, np.sum(a * b, axis=-1, keepdims=True))
    return np.where(s > 1e-15, c / np.where(s > 0.0, s, 1.0), 0.0) * ang
