"""Rigid-body frames as position plus unit quaternion, and their kinematics.

Quaternions are stored (w, x, y, z).  The body-frame linear velocity
direction defaults to the long axis (1, 0, 0) and is configurable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

E0_DEFAULT = np.array([1.0, 0.0, 0.0])


@dataclass(frozen=True)
class Frame:
    """Pose in SE(3): world position and body-to-world unit quaternion."""

    position: np.ndarray
    quaternion: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3))
        q = np.asarray(self.quaternion, dtype=float).reshape(4)
        object.__setattr__(self, "quaternion", q)
        if abs(np.linalg.norm(q) - 1.0) > 1e-8:
            raise ValueError(f"quaternion norm {np.linalg.norm(q):.3e} is not 1 within 1e-8")

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.quaternion)

    @staticmethod
    def identity() -> "Frame":
        return Frame(np.zeros(3), np.array([1.0, 0.0, 0.0, 0.0]))


@dataclass(frozen=True)
class Twist:
    """Body-frame velocity: scalar forward speed and angular velocity vector."""

    u: float
    omega: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "u", float(self.u))
        object.__setattr__(self, "omega", np.asarray(self.omega, dtype=float).reshape(3))


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrix of a (w, x, y, z) quaternion (not necessarily unit)."""
    w, x, y, z = np.asarray(q, dtype=float)
    n = w * w + x * x + y * y + z * z
    if n == 0.0:
        raise ValueError("zero quaternion has no rotation matrix")
    s = 2.0 / n
    return np.array(
        [
            [1 - s * (y * y + z * z), s * (x * y - w * z), s * (x * z + w * y)],
            [s * (x * y + w * z), 1 - s * (x * x + z * z), s * (y * z - w * x)],
            [s * (x * z - w * y), s * (y * z + w * x), 1 - s * (x * x + y * y)],
        ]
    )


def quat_multiply(q1, q2) -> np.ndarray:
    w1, x1, y1, z1 = q1
    w2, x2, y2, z2 = q2
    return np.array(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ]
    )


def quat_conjugate(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    n = np.linalg.norm(axis)
    if n == 0.0:
        raise ValueError("axis must be nonzero")
    half = 0.5 * float(angle)
    return np.concatenate([[np.cos(half)], np.sin(half) * axis / n])


def quat_slerp(q1, q2, t: float) -> np.ndarray:
    """Spherical interpolation choosing the shorter great-circle arc."""
    q1 = np.asarray(q1, dtype=float)
    q2 = np.asarray(q2, dtype=float)
    dot = float(np.dot(q1, q2))
    if dot < 0.0:
        q2, dot = -q2, -dot
    dot = min(dot, 1.0)
    ang = np.arccos(dot)
    if ang < 1e-12:
        out = (1.0 - t) * q1 + t * q2
    else:
        out = (np.sin((1.0 - t) * ang) * q1 + np.sin(t * ang) * q2) / np.sin(ang)
    return out / np.linalg.norm(out)


def frame_from_axis_angle(position, axis, angle: float) -> Frame:
    """Frame at ``position`` rotated by ``angle`` about ``axis``."""
    return Frame(np.asarray(position, dtype=float), quat_from_axis_angle(axis, angle))


def transform_point(frame: Frame, q) -> np.ndarray:
    """World coordinates of a body-frame point: R q + x."""
    return frame.rotation @ np.asarray(q, dtype=float) + frame.position


def inverse_transform(frame: Frame, q) -> np.ndarray:
    """Body coordinates of a world point: R^T (q - x)."""
    return frame.rotation.T @ (np.asarray(q, dtype=float) - frame.position)


def rotate_vector(frame: Frame, d) -> np.ndarray:
    """Rotation-only action of the frame (for directions and gradients)."""
    return frame.rotation @ np.asarray(d, dtype=float)


def kinematics_rhs(frame: Frame, twist: Twist, e0=E0_DEFAULT) -> tuple[np.ndarray, np.ndarray]:
    """Time derivatives (position-rate, quaternion-rate) of the pose.

    The center moves along the rotated body axis ``e0`` at speed u; the
    quaternion integrates the body angular velocity as qdot = q*(0,omega)/2,
    which is equivalent to Rdot = R*hat(omega).
    """
    pos_rate = frame.rotation @ (np.asarray(e0, dtype=float) * twist.u)
    quat_rate = 0.5 * quat_multiply(frame.quaternion, np.concatenate([[0.0], twist.omega]))
    return pos_rate, quat_rate


def skew(omega) -> np.ndarray:
    """Skew-symmetric matrix mapping omega to its cross-product operator."""
    w1, w2, w3 = np.asarray(omega, dtype=float)
    return np.array([[0.0, -w3, w2], [w3, 0.0, -w1], [-w2, w1, 0.0]])
