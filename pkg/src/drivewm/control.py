"""Ego vehicle control: kinematic bicycle model, PID speed/steer loops, route tracking."""

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ValidationError
from .geometry import wrap_angle


@dataclass
class ControlConfig:
    """Controller gains and physical limits (typical passenger-car values)."""

    wheelbase: float = 2.7
    accel_min: float = -4.0
    accel_max: float = 3.0
    steer_limit: float = 0.6
    kp_lon: float = 2.5
    ki_lon: float = 0.2
    kd_lon: float = 0.0
    integral_limit: float = 0.4
    kp_lat: float = 1.5
    kd_lat: float = 0.3
    lookahead_base: float = 3.0
    lookahead_gain: float = 0.5  # extra lookahead per m/s of speed


@dataclass
class EgoDynamicState:
    x: float
    y: float
    yaw: float
    v: float
    wheelbase: float = 2.7
    route_progress: float = 0.0


def bicycle_update(
    state: EgoDynamicState,
    accel: float,
    steer: float,
    dt: float = 0.1,
    accel_min: float = -4.0,
    accel_max: float = 3.0,
    steer_limit: float = 0.6,
) -> EgoDynamicState:
    """One Euler step of the kinematic bicycle model; speed never goes negative."""
    accel = min(max(accel, accel_min), accel_max)
    steer = min(max(steer, -steer_limit), steer_limit)
    x = state.x + state.v * math.cos(state.yaw) * dt
    y = state.y + state.v * math.sin(state.yaw) * dt
    yaw = wrap_angle(state.yaw + state.v * math.tan(steer) / state.wheelbase * dt)
    v = max(0.0, state.v + accel * dt)
    return replace(state, x=x, y=y, yaw=yaw, v=v)


class PIDController:
    """Scalar PID with anti-windup clamping on the integral term."""

    def __init__(self, kp: float, ki: float = 0.0, kd: float = 0.0, integral_limit: float | None = None):
        self.kp, self.ki, self.kd = kp, ki, kd
        self.integral_limit = integral_limit
        self.reset()

    def reset(self) -> None:
        self.integral = 0.0
        self.prev_error: float | None = None

    def update(self, error: float, dt: float) -> float:
        self.integral += error * dt
        if self.integral_limit is not None:
            self.integral = min(max(self.integral, -self.integral_limit), self.integral_limit)
        d = 0.0
        if self.prev_error is not None and dt > 0:
            d = (error - self.prev_error) / dt
        self.prev_error = error
        return self.kp * error + self.ki * self.integral + self.kd * d


class Route:
    """Polyline route resampled to equidistant waypoints with arclength queries."""

    def __init__(self, xy_points, spacing: float = 0.5):
        pts = np.asarray(xy_points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 1:
            raise ValidationError("route needs an (n, 2) point array")
        # Drop repeated points (a stationary log segment adds no geometry).
        keep = [0]
        for i in range(1, len(pts)):
            if np.hypot(*(pts[i] - pts[keep[-1]])) > 1e-9:
                keep.append(i)
        pts = pts[keep]
        if len(pts) < 2:
            raise ValidationError("route has zero length")
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        s = np.concatenate([[0.0], np.cumsum(seg)])
        self.length = float(s[-1])
        n = max(2, int(round(self.length / spacing)) + 1)
        si = np.linspace(0.0, self.length, n)
        self.waypoints = np.stack(
            [np.interp(si, s, pts[:, 0]), np.interp(si, s, pts[:, 1])], axis=1
        )
        self._s = si
        self.spacing = float(si[1] - si[0])

    def progress(self, x: float, y: float, prev: float = 0.0, window: float = 30.0) -> float:
        """Arclength of the projection of (x, y), never less than ``prev``.

        The search is restricted to a forward window past ``prev`` so the
        projection cannot jump ahead on self-approaching routes (U-turns).
        """
        lo = max(0, int((prev - 2.0) / self.spacing))
        hi = min(len(self.waypoints) - 1, int((prev + window) / self.spacing) + 1)
        best_s, best_d = prev, math.inf
        p = np.array([x, y])
        for i in range(lo, hi):
            a, b = self.waypoints[i], self.waypoints[i + 1]
            ab = b - a
            denom = float(ab @ ab)
            t = 0.0 if denom == 0 else min(1.0, max(0.0, float((p - a) @ ab) / denom))
            proj = a + t * ab
            d = float(np.hypot(*(p - proj)))
            if d < best_d:
                best_d = d
                best_s = self._s[i] + t * self.spacing
        return max(prev, min(best_s, self.length))

    def point_at(self, s: float) -> np.ndarray:
        s = min(max(s, 0.0), self.length)
        i = min(len(self.waypoints) - 2, int(s / self.spacing))
        t = (s - self._s[i]) / self.spacing
        return self.waypoints[i] * (1 - t) + self.waypoints[i + 1] * t

    def lookahead_point(self, progress: float, dist: float) -> np.ndarray:
        """Waypoint ``dist`` meters ahead; the terminal point past route end."""
        return self.point_at(progress + dist)


def pid_longitudinal(pid: PIDController, target_v: float, current_v: float, dt: float = 0.1) -> float:
    """Raw acceleration command toward a target speed (clipping happens later)."""
    return pid.update(target_v - current_v, dt)


def pid_lateral(
    pid: PIDController,
    route: Route,
    x: float,
    y: float,
    yaw: float,
    progress: float,
    lookahead: float,
    dt: float = 0.1,
) -> float:
    """Raw front-wheel angle command steering toward a lookahead waypoint."""
    if route.length <= 0:
        raise ValidationError("route has zero length")
    target = route.lookahead_point(progress, lookahead)
    heading_err = wrap_angle(math.atan2(target[1] - y, target[0] - x) - yaw)
    return pid.update(heading_err, dt)
