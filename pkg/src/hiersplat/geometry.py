"""Rigid transforms, pinhole camera model, and the constant-velocity pose predictor.

Conventions:
  * Poses are stored camera-to-world; world-to-camera is derived on demand.
  * Quaternions are (x, y, z, w), matching the trajectory file column order.
  * Pixel coordinates are continuous with pixel (row i, col j) sampled at (j, i).
  * The optimizer works in a 6-vector tangent space (3 translation, 3 rotation)
    applied as a left perturbation of the world-to-camera transform; see
    :meth:`RigidPose.retract`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import BehindCamera


def _quat_normalize(q: np.ndarray) -> np.ndarray:
    return q / np.linalg.norm(q)


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product of two (x, y, z, w) quaternions."""
    ax, ay, az, aw = a
    bx, by, bz, bw = b
    return np.array(
        [
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
            aw * bw - ax * bx - ay * by - az * bz,
        ]
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([-q[0], -q[1], -q[2], q[3]])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    x, y, z, w = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrix to (x, y, z, w) quaternion, Shepperd's method."""
    m = R
    t = np.trace(m)
    if t > 0:
        s = math.sqrt(t + 1.0) * 2
        w = 0.25 * s
        x = (m[2, 1] - m[1, 2]) / s
        y = (m[0, 2] - m[2, 0]) / s
        z = (m[1, 0] - m[0, 1]) / s
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        w = (m[2, 1] - m[1, 2]) / s
        x = 0.25 * s
        y = (m[0, 1] + m[1, 0]) / s
        z = (m[0, 2] + m[2, 0]) / s
    elif m[1, 1] > m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        w = (m[0, 2] - m[2, 0]) / s
        x = (m[0, 1] + m[1, 0]) / s
        y = 0.25 * s
        z = (m[1, 2] + m[2, 1]) / s
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        w = (m[1, 0] - m[0, 1]) / s
        x = (m[0, 2] + m[2, 0]) / s
        y = (m[1, 2] + m[2, 1]) / s
        z = 0.25 * s
    return _quat_normalize(np.array([x, y, z, w]))


def rotvec_to_quat(w: np.ndarray) -> np.ndarray:
    """Axis-angle 3-vector to quaternion."""
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        # first-order expansion keeps retract smooth through zero
        q = np.array([0.5 * w[0], 0.5 * w[1], 0.5 * w[2], 1.0])
        return _quat_normalize(q)
    axis = w / theta
    s = math.sin(0.5 * theta)
    return np.array([axis[0] * s, axis[1] * s, axis[2] * s, math.cos(0.5 * theta)])


@dataclass(frozen=True)
class RigidPose:
    """Camera-to-world rigid transform: unit quaternion + translation (m)."""

    quat: np.ndarray  # (4,) x, y, z, w; unit norm
    trans: np.ndarray  # (3,)

    def __post_init__(self):
        object.__setattr__(self, "quat", _quat_normalize(np.asarray(self.quat, dtype=np.float64)))
        object.__setattr__(self, "trans", np.asarray(self.trans, dtype=np.float64).copy())

    @staticmethod
    def identity() -> "RigidPose":
        return RigidPose(np.array([0.0, 0.0, 0.0, 1.0]), np.zeros(3))

    @staticmethod
    def from_matrix(T: np.ndarray) -> "RigidPose":
        return RigidPose(matrix_to_quat(T[:3, :3]), T[:3, 3])

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.quat)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation_matrix()
        T[:3, 3] = self.trans
        return T

    def inverse(self) -> "RigidPose":
        qinv = quat_conjugate(self.quat)
        Rinv = quat_to_matrix(qinv)
        return RigidPose(qinv, -(Rinv @ self.trans))

    def world_to_camera(self) -> tuple[np.ndarray, np.ndarray]:
        """(R, t) with x_cam = R @ x_world + t."""
        R = self.rotation_matrix().T
        return R, -(R @ self.trans)

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Apply camera-to-world to (..., 3) points."""
        return points @ self.rotation_matrix().T + self.trans

    def retract(self, xi: np.ndarray) -> "RigidPose":
        """Apply a 6-vector tangent update (tx, ty, tz, wx, wy, wz).

        The update acts as a left perturbation of the world-to-camera
        transform: x_cam' = exp([w]x) @ x_cam + t. The Jacobian of a camera
        point with respect to xi at 0 is [I | -[x_cam]x], which is what the
        rasterizer backward pass produces.
        """
        xi = np.asarray(xi, dtype=np.float64)
        rho, omega = xi[:3], xi[3:]
        q_delta = rotvec_to_quat(omega)
        q_new = _quat_normalize(quat_multiply(self.quat, quat_conjugate(q_delta)))
        R_new = quat_to_matrix(q_new)
        t_new = self.trans - R_new @ rho
        return RigidPose(q_new, t_new)


def compose(a: RigidPose, b: RigidPose) -> RigidPose:
    """Transform composition: result maps like a.matrix() @ b.matrix()."""
    q = _quat_normalize(quat_multiply(a.quat, b.quat))
    t = a.rotation_matrix() @ b.trans + a.trans
    return RigidPose(q, t)


def constant_velocity_predict(prev: RigidPose, prev2: RigidPose) -> RigidPose:
    """Extrapolate by re-applying the last inter-frame relative motion."""
    return compose(prev, compose(prev2.inverse(), prev))


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def f_mean(self) -> float:
        return 0.5 * (self.fx + self.fy)

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }

    @staticmethod
    def from_dict(d: dict) -> "Intrinsics":
        return Intrinsics(d["fx"], d["fy"], d["cx"], d["cy"], int(d["width"]), int(d["height"]))


def project(point: np.ndarray, pose: RigidPose, K: Intrinsics) -> tuple[np.ndarray, float]:
    """World point -> (pixel (u, v), camera depth). Raises BehindCamera for z <= 0."""
    R, t = pose.world_to_camera()
    pc = R @ np.asarray(point, dtype=np.float64) + t
    if pc[2] <= 0:
        raise BehindCamera(f"point has camera depth {pc[2]:.6g}")
    u = K.fx * pc[0] / pc[2] + K.cx
    v = K.fy * pc[1] / pc[2] + K.cy
    return np.array([u, v]), float(pc[2])


def unproject(pixel: np.ndarray, depth: float, pose: RigidPose, K: Intrinsics) -> np.ndarray:
    """Pixel + camera depth back to a world point (inverse of :func:`project`)."""
    u, v = pixel
    pc = np.array([(u - K.cx) / K.fx * depth, (v - K.cy) / K.fy * depth, depth])
    return pose.transform(pc)


def unproject_grid(depth: np.ndarray, pose: RigidPose, K: Intrinsics) -> np.ndarray:
    """Unproject a full (H, W) depth image to (H, W, 3) world points."""
    H, W = depth.shape
    u = np.arange(W, dtype=np.float64)[None, :]
    v = np.arange(H, dtype=np.float64)[:, None]
    x = (u - K.cx) / K.fx * depth
    y = (v - K.cy) / K.fy * depth
    cam = np.stack([x, y, depth], axis=-1)
    return cam @ pose.rotation_matrix().T + pose.trans
