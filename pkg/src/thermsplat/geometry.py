"""Quaternion/rotation utilities shared by the scene and renderer.

Quaternions are stored (w, x, y, z). Batched helpers take (N, 4) arrays.
"""

from __future__ import annotations

import numpy as np


def normalize_quats(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for unit quaternions; (..., 4) -> (..., 3, 3)."""
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=np.float64), -1, 0)
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
        ],
        -2,
    )


def quat_to_matrix_jacobian(q: np.ndarray) -> np.ndarray:
    """Partials dR/dq for unit quaternions; (N, 4) -> (N, 4, 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    o = np.zeros_like(w)
    dw = np.stack([o, -z, y, z, o, -x, -y, x, o], -1)
    dx = np.stack([o, y, z, y, -2 * x, -w, z, w, -2 * x], -1)
    dy = np.stack([-2 * y, x, w, x, o, z, -w, z, -2 * y], -1)
    dz = np.stack([-2 * z, -w, x, w, -2 * z, y, x, y, o], -1)
    jac = 2.0 * np.stack([dw, dx, dy, dz], axis=1)
    return jac.reshape(q.shape[0], 4, 3, 3)


def backprop_through_normalization(q_raw: np.ndarray, grad_unit: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. an unnormalized quaternion given d/d(q/|q|)."""
    norm = np.linalg.norm(q_raw, axis=-1, keepdims=True)
    qn = q_raw / norm
    return (grad_unit - qn * np.sum(qn * grad_unit, axis=-1, keepdims=True)) / norm


def matrix_to_quat(rot: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) from a single 3x3 rotation matrix."""
    m = np.asarray(rot, dtype=np.float64)
    tr = np.trace(m)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s, (m[2, 1] - m[1, 2]) / s,
                      (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(m)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(m[i, i] - m[j, j] - m[k, k] + 1.0, 0.0)) * 2
        q = np.empty(4)
        q[0] = (m[k, j] - m[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (m[j, i] + m[i, j]) / s
        q[1 + k] = (m[k, i] + m[i, k]) / s
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def look_at_rotation(position: np.ndarray, target: np.ndarray,
                     up: np.ndarray = (0.0, 0.0, 1.0)) -> np.ndarray:
    """World-to-camera rotation with +z pointing from position to target."""
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    forward /= np.linalg.norm(forward)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(forward, up)
    nrm = np.linalg.norm(right)
    if nrm < 1e-12:  # forward parallel to up; pick another hint
        right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
        nrm = np.linalg.norm(right)
    right /= nrm
    down = np.cross(forward, right)
    return np.stack([right, down, forward], axis=0)
