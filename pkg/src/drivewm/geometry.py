"""Planar geometry: angle wrapping, rigid transforms, oriented-box collision."""

import math

import numpy as np

from .errors import ValidationError


def wrap_angle(a):
    """Wrap an angle (scalar or array) to (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=float), 2.0 * math.pi)
    w = np.where(w > math.pi, w - 2.0 * math.pi, w)
    if np.ndim(a) == 0:
        return float(w)
    return w


def rotation_matrix(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s], [s, c]])


def to_frame(points: np.ndarray, origin_x: float, origin_y: float, origin_yaw: float) -> np.ndarray:
    """Express world points (..., 2) in the frame anchored at (origin, yaw)."""
    pts = np.asarray(points, dtype=float)
    shifted = pts - np.array([origin_x, origin_y])
    return shifted @ rotation_matrix(origin_yaw)  # A @ R == (R^T @ A^T)^T


def from_frame(points: np.ndarray, origin_x: float, origin_y: float, origin_yaw: float) -> np.ndarray:
    """Inverse of :func:`to_frame`."""
    pts = np.asarray(points, dtype=float)
    return pts @ rotation_matrix(origin_yaw).T + np.array([origin_x, origin_y])


class OrientedBox:
    """Rectangle given by center, heading and extents (length along heading)."""

    __slots__ = ("x", "y", "yaw", "length", "width")

    def __init__(self, x: float, y: float, yaw: float, length: float, width: float):
        if length <= 0 or width <= 0:
            raise ValidationError(f"box extents must be positive, got {length}x{width}")
        self.x, self.y, self.yaw = float(x), float(y), float(yaw)
        self.length, self.width = float(length), float(width)

    def corners(self) -> np.ndarray:
        """Corner coordinates, shape (4, 2), counter-clockwise."""
        hl, hw = 0.5 * self.length, 0.5 * self.width
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        return from_frame(local, self.x, self.y, self.yaw)

    @property
    def circumradius(self) -> float:
        return 0.5 * math.hypot(self.length, self.width)


def _project(corners: np.ndarray, axis: np.ndarray):
    d = corners @ axis
    return d.min(), d.max()


def boxes_overlap(a: OrientedBox, b: OrientedBox) -> bool:
    """Separating-axis overlap test for two oriented rectangles.

    Touching boundaries count as overlap. A circumradius pre-check skips
    the axis projections for clearly separated pairs.
    """
    if math.hypot(b.x - a.x, b.y - a.y) > a.circumradius + b.circumradius:
        return False
    ca, cb = a.corners(), b.corners()
    # Two unique edge normals per rectangle.
    axes = []
    for yaw in (a.yaw, b.yaw):
        c, s = math.cos(yaw), math.sin(yaw)
        axes.append(np.array([c, s]))
        axes.append(np.array([-s, c]))
    for axis in axes:
        lo_a, hi_a = _project(ca, axis)
        lo_b, hi_b = _project(cb, axis)
        if hi_a < lo_b or hi_b < lo_a:
            return False
    return True


def collision_check(ego_box: OrientedBox, other_boxes) -> bool:
    """True iff the ego box overlaps any box in ``other_boxes``."""
    return any(boxes_overlap(ego_box, other) for other in other_boxes)
