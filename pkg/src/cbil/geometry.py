"""Vector and quaternion helpers (numpy, batched over leading axes).

World frame: +y is vertical, the canonical body forward axis is +x and the
body lateral axis is +z. Quaternions are stored as (w, x, y, z).
"""
from __future__ import annotations

import numpy as np

UP = np.array([0.0, 1.0, 0.0])
FORWARD_AXIS = np.array([1.0, 0.0, 0.0])
LATERAL_AXIS = np.array([0.0, 0.0, 1.0])
# positive yaw turns +x toward +z, i.e. clockwise seen from above
YAW_AXIS = -UP


def normalize(v: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.maximum(n, eps)


def quat_from_axis_angle(axis: np.ndarray, angle) -> np.ndarray:
    angle = np.asarray(angle, dtype=np.float64)
    half = 0.5 * angle[..., None]
    axis = np.broadcast_to(np.asarray(axis, dtype=np.float64), angle.shape + (3,))
    return np.concatenate([np.cos(half), np.sin(half) * axis], axis=-1)


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = np.moveaxis(np.asarray(a), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conj(q: np.ndarray) -> np.ndarray:
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vectors ``v`` by unit quaternions ``q``."""
    q = np.asarray(q, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    w = q[..., :1]
    u = q[..., 1:]
    t = 2.0 * np.cross(u, v)
    return v + w * t + np.cross(u, t)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrices whose columns are the rotated body axes."""
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=np.float64), -1, 0)
    m = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return m.reshape(m.shape[:-1] + (3, 3))


def quat_normalize(q: np.ndarray) -> np.ndarray:
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def heading_quat(yaw, pitch=0.0) -> np.ndarray:
    """Rotation that yaws about the world vertical and then pitches about the body lateral axis."""
    qy = quat_from_axis_angle(YAW_AXIS, yaw)
    qp = quat_from_axis_angle(LATERAL_AXIS, np.broadcast_to(pitch, np.shape(yaw)))
    return quat_mul(qy, qp)


def to_body(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Express world vectors in the body frame of ``q``."""
    return quat_rotate(quat_conj(q), v)
