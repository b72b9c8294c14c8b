"""Probe pose representation and the probe-centric discrete action set.

Quaternions are plain numpy arrays in (qx, qy, qz, qw) order. All public
functions renormalize their quaternion results, so unit norm holds to 1e-9
after every call. Angles at the API boundary are degrees, positions mm.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

QUAT_IDENTITY = np.array([0.0, 0.0, 0.0, 1.0])

# Probe axis convention: at zero tilt the probe z-axis points into the
# patient (world -z) and the probe y-axis spans the image lateral axis.
# This base orientation is a 180 deg rotation about world x.
BASE_ORIENTATION = np.array([1.0, 0.0, 0.0, 0.0])


class DegenerateProjectionError(ValueError):
    """A probe axis is (numerically) vertical: its horizontal projection
    is too short to normalize."""


class Action(enum.IntEnum):
    """The 10 discrete probe actions. Indices are stable across
    serialization; translations first, then rotations per axis."""

    TX_POS = 0
    TX_NEG = 1
    TY_POS = 2
    TY_NEG = 3
    RX_POS = 4
    RX_NEG = 5
    RY_POS = 6
    RY_NEG = 7
    RZ_POS = 8
    RZ_NEG = 9


TRANSLATIONS = (Action.TX_POS, Action.TX_NEG, Action.TY_POS, Action.TY_NEG)
ROTATIONS = (
    Action.RX_POS,
    Action.RX_NEG,
    Action.RY_POS,
    Action.RY_NEG,
    Action.RZ_POS,
    Action.RZ_NEG,
)


@dataclass(frozen=True)
class StepSizes:
    """Hierarchical action magnitudes, reduced one unit at a time on
    convergence until both reach zero."""

    d_mm: float = 5.0
    theta_deg: float = 5.0

    def decremented(self) -> "StepSizes":
        return StepSizes(max(0.0, self.d_mm - 1.0), max(0.0, self.theta_deg - 1.0))

    @property
    def exhausted(self) -> bool:
        return self.d_mm <= 0.0 and self.theta_deg <= 0.0


@dataclass(frozen=True)
class Pose:
    """World-frame probe pose: position in mm plus unit quaternion."""

    position: np.ndarray
    orientation: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=float)
        quat = normalize_quat(np.asarray(self.orientation, dtype=float))
        if pos.shape != (3,) or not np.all(np.isfinite(pos)):
            raise ValueError(f"position must be a finite 3-vector, got {pos!r}")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "orientation", quat)

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.orientation)


def normalize_quat(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape != (4,) or not np.all(np.isfinite(q)):
        raise ValueError(f"quaternion must be a finite 4-vector, got {q!r}")
    norm = math.sqrt(float(np.dot(q, q)))
    if norm == 0.0:
        raise ValueError("zero quaternion has no direction")
    return q / norm

def quat_multiply(q1: np.ndarray, q2: np.ndarray) -> np.ndarray:
    """Hamilton product q1 * q2 in (x, y, z, w) component order."""
    x1, y1, z1, w1 = q1
    x2, y2, z2, w2 = q2
    return np.array(
        [
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        ]
    )


def quat_from_axis_angle(axis: np.ndarray, angle_deg: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / math.sqrt(float(np.dot(axis, axis)))
    half = math.radians(angle_deg) / 2.0
    return np.array([*(math.sin(half) * axis), math.cos(half)])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    x, y, z, w = normalize_quat(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_angle(q1: np.ndarray, q2: np.ndarray) -> float:
    """Minimum rotation angle between two orientations, in degrees.

    Returns 2*arccos(|<q1, q2>|), which is sign-invariant (q and -q are
    the same rotation). The dot product is clamped to [-1, 1] to absorb
    floating-point drift.
    """
    q1 = normalize_quat(q1)
    q2 = normalize_quat(q2)
    dot = min(1.0, max(-1.0, abs(float(np.dot(q1, q2)))))
    return math.degrees(2.0 * math.acos(dot))


def pos_distance(p1: np.ndarray, p2: np.ndarray) -> float:
    """Euclidean distance in mm between two world positions."""
    p1 = np.asarray(p1, dtype=float)
    p2 = np.asarray(p2, dtype=float)
    return float(np.linalg.norm(p1 - p2))


def pose_improvement(
    d_prev: float,
    d_next: float,
    theta_prev: float,
    theta_next: float,
    steps: StepSizes,
) -> tuple[float, float]:
    """Step-normalized one-step improvement of the two distance-to-goal
    metrics, each clamped to [-1, 1]. Positive means closer to the goal."""
    if steps.d_mm <= 0.0 or steps.theta_deg <= 0.0:
        raise ValueError("step sizes are zero; the episode must terminate first")
    delta_d = (d_prev - d_next) / steps.d_mm
    delta_theta = (theta_prev - theta_next) / steps.theta_deg
    return min(1.0, max(-1.0, delta_d)), min(1.0, max(-1.0, delta_theta))


def tilt_angle(pose: Pose) -> float:
    """Angle in degrees between the probe z-axis and the world downward
    direction [0, 0, -1]; zero when the probe points straight down."""
    r33 = float(pose.rotation_matrix()[2, 2])
    return math.degrees(math.acos(min(1.0, max(-1.0, -r33))))


def horizontal_axes(pose: Pose, eps: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    """Unit projections of the probe x and y axes onto the world xy-plane.

    Raises DegenerateProjectionError when either probe axis is vertical
    within eps; under the 30 deg tilt restriction this cannot happen, but
    callers treat it as a no-op action.
    """
    rot = pose.rotation_matrix()
    out = []
    for axis in (rot[:, 0], rot[:, 1]):
        flat = np.array([axis[0], axis[1], 0.0])
        norm = float(np.linalg.norm(flat))
        if norm <= eps:
            raise DegenerateProjectionError(
                f"probe axis {axis} is vertical; horizontal projection degenerate"
            )
        out.append(flat / norm)
    return out[0], out[1]


_ROTATION_AXES = {
    Action.RX_POS: (np.array([1.0, 0.0, 0.0]), +1.0),
    Action.RX_NEG: (np.array([1.0, 0.0, 0.0]), -1.0),
    Action.RY_POS: (np.array([0.0, 1.0, 0.0]), +1.0),
    Action.RY_NEG: (np.array([0.0, 1.0, 0.0]), -1.0),
    Action.RZ_POS: (np.array([0.0, 0.0, 1.0]), +1.0),
    Action.RZ_NEG: (np.array([0.0, 0.0, 1.0]), -1.0),
}


def apply_action(pose: Pose, action: Action, steps: StepSizes) -> Pose:
    """Unconstrained candidate pose after one action.

    Translations move d_mm along the horizontal projection of the probe
    x or y axis and leave the orientation alone; rotations right-multiply
    a theta_deg rotation about the probe's own axis and leave the position
    alone. Surface tracking and the tilt limit are applied by the
    environment, not here.
    """
    action = Action(action)
    if action in TRANSLATIONS:
        x_flat, y_flat = horizontal_axes(pose)
        direction = {
            Action.TX_POS: x_flat,
            Action.TX_NEG: -x_flat,
            Action.TY_POS: y_flat,
            Action.TY_NEG: -y_flat,
        }[action]
        return Pose(pose.position + steps.d_mm * direction, pose.orientation)
    axis, sign = _ROTATION_AXES[action]
    rot = quat_from_axis_angle(axis, sign * steps.theta_deg)
    return Pose(pose.position, quat_multiply(pose.orientation, rot))


def opposite_action(action: Action) -> Action:
    """The action undoing `action` (same axis, opposite sign)."""
    idx = int(action)
    return Action(idx + 1 if idx % 2 == 0 else idx - 1)


def yawed_base_orientation(yaw_deg: float) -> np.ndarray:
    """Probe-down orientation rotated yaw_deg about the probe z-axis;
    the episode-start orientation family."""
    return quat_multiply(
        BASE_ORIENTATION, quat_from_axis_angle(np.array([0.0, 0.0, 1.0]), yaw_deg)
    )
