"""Quaternion and head-geometry helpers shared by the renderer and the
synthetic spatializer. Quaternions are (w, x, y, z), unit norm."""

from __future__ import annotations

import numpy as np


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate fixed vector v [3] by quaternions q [N, 4] -> [N, 3]."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    vx, vy, vz = (float(c) for c in v)
    # t = 2 q_vec x v ; out = v + w t + q_vec x t
    tx = 2.0 * (y * vz - z * vy)
    ty = 2.0 * (z * vx - x * vz)
    tz = 2.0 * (x * vy - y * vx)
    ox = vx + w * tx + (y * tz - z * ty)
    oy = vy + w * ty + (z * tx - x * tz)
    oz = vz + w * tz + (x * ty - y * tx)
    return np.stack([ox, oy, oz], axis=1)


def yaw_quaternion(yaw: np.ndarray) -> np.ndarray:
    """Quaternion rotating about +z (up) by the given yaw angles [N] -> [N, 4]."""
    half = 0.5 * np.asarray(yaw, dtype=np.float64)
    q = np.zeros((half.shape[0], 4))
    q[:, 0] = np.cos(half)
    q[:, 3] = np.sin(half)
    return q


def ear_positions(rx_pos: np.ndarray, rx_quat: np.ndarray, offset_m: float) -> tuple[np.ndarray, np.ndarray]:
    """Left/right ear positions offset along the receiver's lateral (+y) axis."""
    lateral = quat_rotate(rx_quat, (0.0, 1.0, 0.0))
    return rx_pos + offset_m * lateral, rx_pos - offset_m * lateral


def geometric_delay_samples(rows: np.ndarray, sample_rate: int, ear_offset_m: float,
                            speed_of_sound: float) -> np.ndarray:
    """Per-ear propagation delay in samples from pose rows [T, 14] -> [2, T].

    Rows are tx position (3), tx quaternion (4), rx position (3), rx quaternion (4).
    """
    rows = np.asarray(rows, dtype=np.float64)
    tx = rows[:, 0:3]
    rx = rows[:, 7:10]
    rxq = rows[:, 10:14]
    left, right = ear_positions(rx, rxq, ear_offset_m)
    d_left = np.linalg.norm(tx - left, axis=1)
    d_right = np.linalg.norm(tx - right, axis=1)
    scale = sample_rate / speed_of_sound
    return np.stack([d_left * scale, d_right * scale], axis=0)
