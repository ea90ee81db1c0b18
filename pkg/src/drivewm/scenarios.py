"""Synthetic interactive scenario generation.

Three templates stand in for recorded urban traffic:

* ``follow``    — a leader on the ego lane that brakes to a standstill and
                  moves off again; rear-end risk for inattentive policies.
* ``cut_in``    — an adjacent-lane vehicle merges closely in front of the
                  ego and slows down before leaving.
* ``left_turn`` — the ego turns left across an oncoming stream at an
                  unsignalized intersection and must take the gap behind it.

Background trajectories are spline-smoothed polyline follows with
bounded-acceleration speed profiles, so they are kinematically plausible:
per-frame speed jumps stay below 0.5 m/s and heading jumps below 0.2 rad.
The ego's logged track (route geometry and time budget) drives the same
route the way a patient human would, which keeps every scenario solvable
within its budget.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import make_interp_spline

from .errors import GenerationError, ValidationError
from .geometry import wrap_angle
from .tracks import DT, FRAME_MS, Scenario, TrackPoint, VehicleTrack

TEMPLATES = ("follow", "cut_in", "left_turn")

CAR_LENGTH = 4.6
CAR_WIDTH = 1.9
LANE_WIDTH = 3.5
MAX_SPEED = 12.0
GEN_ACCEL = 1.8        # accel limit inside generated profiles, m/s^2
GEN_DECEL = 2.5

_MAX_DENSITY = {"follow": 8, "cut_in": 8, "left_turn": 10}


@dataclass
class TemplateParams:
    template: str = "follow"
    traffic_density: int = 1
    speed_range: tuple[float, float] = (4.5, 7.5)
    seed: int = 0
    tightness: float = 1.0  # >1 widens the conflict window (harder traffic)

    def validate(self) -> None:
        if self.template not in TEMPLATES:
            raise ValidationError(f"unknown template '{self.template}'")
        if self.traffic_density < 0:
            raise ValidationError("traffic density must be >= 0")
        lo, hi = self.speed_range
        if not (0.0 <= lo <= hi <= MAX_SPEED):
            raise ValidationError(f"speed range must lie within [0, {MAX_SPEED}] m/s")
        if self.tightness <= 0:
            raise ValidationError("tightness must be positive")


class _Path:
    """Arclength-parameterized smooth path through control points."""

    def __init__(self, points, spacing: float = 0.25):
        pts = np.asarray(points, dtype=float)
        keep = [0]
        for i in range(1, len(pts)):
            if np.hypot(*(pts[i] - pts[keep[-1]])) > 1e-9:
                keep.append(i)
        pts = pts[keep]
        chord = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])
        if len(pts) >= 4:
            spline = make_interp_spline(chord, pts, k=3, axis=0)
            dense = spline(np.linspace(0.0, chord[-1], max(4, int(chord[-1] / spacing)) + 1))
        else:
            dense = np.stack(
                [
                    np.interp(np.linspace(0, chord[-1], int(chord[-1] / spacing) + 2), chord, pts[:, 0]),
                    np.interp(np.linspace(0, chord[-1], int(chord[-1] / spacing) + 2), chord, pts[:, 1]),
                ],
                axis=1,
            )
        seg = np.linalg.norm(np.diff(dense, axis=0), axis=1)
        self._s = np.concatenate([[0.0], np.cumsum(seg)])
        self._pts = dense
        self.length = float(self._s[-1])

    def at(self, s: float) -> tuple[float, float]:
        s = min(max(s, 0.0), self.length)
        return (
            float(np.interp(s, self._s, self._pts[:, 0])),
            float(np.interp(s, self._s, self._pts[:, 1])),
        )

    def yaw(self, s: float) -> float:
        eps = 0.25
        x0, y0 = self.at(max(0.0, s - eps))
        x1, y1 = self.at(min(self.length, s + eps))
        return math.atan2(y1 - y0, x1 - x0)


def _phase_speeds(v0: float, phases, accel: float = GEN_ACCEL, decel: float = GEN_DECEL) -> np.ndarray:
    """Per-frame speeds moving toward each phase target for its duration."""
    speeds = [v0]
    v = v0
    for duration_s, target in phases:
        for _ in range(int(round(duration_s / DT))):
            v += min(max(target - v, -decel * DT), accel * DT)
            v = min(max(v, 0.0), MAX_SPEED)
            speeds.append(v)
    return np.array(speeds)


def _path_track(
    track_id: str,
    path: _Path,
    speeds: np.ndarray,
    s0: float = 0.0,
    t0_ms: int = 0,
    length: float = CAR_LENGTH,
    width: float = CAR_WIDTH,
) -> VehicleTrack:
    """Drive a path with the given per-frame speeds; ends at the path end."""
    points = []
    s = s0
    prev_yaw = path.yaw(s0)
    for k, v in enumerate(speeds):
        if k:
            s += float(v) * DT
        if s > path.length + 1e-9:
            break
        x, y = path.at(s)
        yaw = path.yaw(s) if v > 0.05 else prev_yaw
        prev_yaw = yaw
        points.append(TrackPoint(t0_ms + k * FRAME_MS, x, y, wrap_angle(yaw)))
    if len(points) < 2:
        raise GenerationError(f"track '{track_id}' degenerated to {len(points)} frames")
    return VehicleTrack(track_id, points, length, width)


def _follower_speeds(
    v0: float,
    cruise: float,
    own_x0: float,
    lead_x,
    lead_in_lane,
    route_length: float,
    min_gap: float = 6.5,
    headway: float = 1.2,
) -> np.ndarray:
    """Speed profile of a straight-lane follower reacting to a leader.

    ``lead_x``/``lead_in_lane`` give the leader's x position and whether it
    occupies the follower's lane at each frame (None-safe past its track).
    Used to script the logged ego on the straight templates.
    """
    speeds = [v0]
    v, x = v0, own_x0
    k = 0
    while x - own_x0 < route_length and k < 6000:
        k += 1
        x += v * DT
        gap = math.inf
        if k < len(lead_x) and lead_in_lane[k] and lead_x[k] > x:
            gap = lead_x[k] - x - CAR_LENGTH
        target = min(cruise, max(0.0, (gap - min_gap) / headway))
        v += min(max(target - v, -GEN_DECEL * DT), GEN_ACCEL * DT)
        v = max(0.0, v)
        speeds.append(v)
    return np.array(speeds)


def _stop_and_go_speeds(
    v_cruise: float,
    s_stop: float,
    t_go_s: float,
    v_finish: float,
    total_length: float,
) -> np.ndarray:
    """Approach, halt at ``s_stop`` until ``t_go_s``, then run out the path."""
    speeds = [v_cruise]
    v, s, t = v_cruise, 0.0, 0.0
    k = 0
    while s < total_length and k < 6000:
        k += 1
        t += DT
        s += v * DT
        if t < t_go_s and s < s_stop:
            brake_dist = v * v / (2.0 * GEN_DECEL) + v * DT
            target = 0.0 if s + brake_dist >= s_stop else v_cruise
        elif t < t_go_s:
            target = 0.0
        else:
            target = v_finish
        v += min(max(target - v, -GEN_DECEL * DT), GEN_ACCEL * DT)
        v = max(0.0, v)
        speeds.append(v)
    return np.array(speeds)


def _lane_change_points(x0: float, y_from: float, y_to: float, x_lc: float, lc_len: float, x_end: float):
    """Polyline control points for a smoothstep lane change starting at ``x_lc``."""
    xs = np.concatenate(
        [
            np.arange(x0, x_lc, 2.0),
            np.linspace(x_lc, x_lc + lc_len, 13),
            np.arange(x_lc + lc_len + 2.0, x_end, 2.0),
            [x_end],
        ]
    )
    ys = np.empty_like(xs)
    for i, x in enumerate(xs):
        if x <= x_lc:
            ys[i] = y_from
        elif x >= x_lc + lc_len:
            ys[i] = y_to
        else:
            u = (x - x_lc) / lc_len
            ys[i] = y_from + (y_to - y_from) * (3 * u * u - 2 * u ** 3)
    return np.stack([xs, ys], axis=1)


def _straight(x0, y0, x1, y1):
    n = max(4, int(math.hypot(x1 - x0, y1 - y0) / 2.0) + 1)
    return np.stack([np.linspace(x0, x1, n), np.linspace(y0, y1, n)], axis=1)


def _lead_arrays(track: VehicleTrack, n: int, lane_y: float = 0.0, lane_half: float = 1.9):
    """Leader x positions and same-lane flags padded to ``n`` frames."""
    xs = np.full(n, -1e9)
    in_lane = np.zeros(n, dtype=bool)
    for i, p in enumerate(track.points[:n]):
        xs[i] = p.x
        in_lane[i] = abs(p.y - lane_y) < lane_half
    return xs, in_lane


def _gen_follow(rng: np.random.Generator, p: TemplateParams) -> list[VehicleTrack]:
    lo, hi = p.speed_range
    v0 = rng.uniform(max(3.5, lo), min(6.5, max(hi, 4.0)))
    lane = _Path(_straight(0.0, 0.0, 260.0, 0.0))
    time_gap = rng.uniform(1.3, 1.7)
    gap0 = time_gap * v0 + CAR_LENGTH

    t_brake = rng.uniform(2.0, 4.0)
    stop_dur = rng.uniform(3.5, 5.5) * p.tightness
    v_resume = rng.uniform(4.0, 5.5)
    leader_speeds = _phase_speeds(
        v0, [(t_brake, v0), (v0 / GEN_DECEL + stop_dur, 0.0), (40.0, v_resume)]
    )
    leader = _path_track("lead", lane, leader_speeds, s0=gap0)

    route_length = 105.0
    lead_x, lead_in = _lead_arrays(leader, 4000)
    ego_speeds = _follower_speeds(v0, rng.uniform(4.8, 5.6), 0.0, lead_x, lead_in, route_length)
    ego_path = _Path(_straight(0.0, 0.0, route_length, 0.0))
    ego = _path_track("ego", ego_path, ego_speeds)

    tracks = [ego, leader]
    oncoming = _Path(_straight(250.0, LANE_WIDTH, -60.0, LANE_WIDTH))
    for i in range(p.traffic_density - 1):
        v = rng.uniform(5.0, 8.0)
        s0 = rng.uniform(60.0, 160.0) + 35.0 * i
        n = int(min(oncoming.length - s0, 1) + (oncoming.length - s0) / (v * DT))
        speeds = np.full(max(2, n), v)
        tracks.append(_path_track(f"bg{i}", oncoming, speeds, s0=s0))
    return tracks


def _gen_cut_in(rng: np.random.Generator, p: TemplateParams) -> list[VehicleTrack]:
    v_c = rng.uniform(5.0, 6.0)
    x_c0 = rng.uniform(11.0, 14.0)
    t_cut = rng.uniform(1.0, 1.6)
    x_lc = x_c0 + v_c * t_cut
    lc_len = rng.uniform(14.0, 17.0)
    cutter_path = _Path(_lane_change_points(x_c0, LANE_WIDTH, 0.0, x_lc, lc_len, 280.0))

    merge_t = t_cut + lc_len / v_c
    v_slow = rng.uniform(0.6, 1.4)
    slow_dur = rng.uniform(3.5, 5.0) * p.tightness
    cutter_speeds = _phase_speeds(
        v_c,
        [(merge_t + 0.2, v_c), ((v_c - v_slow) / GEN_DECEL + slow_dur, v_slow), (40.0, 7.5)],
    )
    cutter = _path_track("cutter", cutter_path, cutter_speeds)

    route_length = 115.0
    lead_x, lead_in = _lead_arrays(cutter, 4000)
    v0 = rng.uniform(6.0, 7.0)
    ego_speeds = _follower_speeds(v0, rng.uniform(5.2, 6.0), 0.0, lead_x, lead_in, route_length)
    ego_path = _Path(_straight(0.0, 0.0, route_length, 0.0))
    ego = _path_track("ego", ego_path, ego_speeds)

    tracks = [ego, cutter]
    adjacent = _Path(_straight(-30.0, LANE_WIDTH, 280.0, LANE_WIDTH))
    for i in range(p.traffic_density - 1):
        v = rng.uniform(6.0, 8.5)
        s0 = rng.uniform(55.0, 90.0) + 30.0 * i  # ahead of the cutter, never conflicts
        speeds = np.full(600, v)
        tracks.append(_path_track(f"bg{i}", adjacent, speeds, s0=s0))
    return tracks


def _left_turn_ego_points():
    approach = _straight(1.75, -42.0, 1.75, -4.25)
    theta = np.linspace(0.0, 0.5 * math.pi, 25)
    arc = np.stack([-4.25 + 6.0 * np.cos(theta), -4.25 + 6.0 * np.sin(theta)], axis=1)
    exit_leg = _straight(-4.25, 1.75, -48.0, 1.75)
    return np.concatenate([approach, arc[1:], exit_leg[1:]], axis=0)


def _gen_left_turn(rng: np.random.Generator, p: TemplateParams) -> list[VehicleTrack]:
    density = max(1, p.traffic_density)
    ego_path = _Path(_left_turn_ego_points())
    stream_path = _Path(_straight(-1.75, 140.0, -1.75, -55.0))

    v_s = rng.uniform(6.2, 7.6)
    t0 = rng.uniform(4.2, 5.2)
    headway = rng.uniform(1.6, 2.2) * p.tightness
    s_conflict = 140.0 - 1.2  # stream arclength at the crossing point
    tracks = []
    t_last = t0
    for k in range(density):
        t_k = t0 + k * headway
        t_last = t_k
        s0 = s_conflict - v_s * t_k
        if s0 < 0:
            raise GenerationError(
                f"density {density} does not fit the left_turn approach at {v_s:.1f} m/s"
            )
        speeds = np.full(int(stream_path.length / (v_s * DT)) + 2, v_s)
        tracks.append(_path_track(f"bg{k}", stream_path, speeds, s0=s0))

    t_clear = t_last + (CAR_LENGTH + 2.0) / v_s
    t_go = t_clear + rng.uniform(0.4, 0.9)
    s_stop = 37.75 - 2.0
    ego_speeds = _stop_and_go_speeds(
        v_cruise=6.0,
        s_stop=s_stop,
        t_go_s=t_go,
        v_finish=rng.uniform(5.0, 6.0),
        total_length=ego_path.length,
    )
    ego = _path_track("ego", ego_path, ego_speeds)
    return [ego] + tracks


def _check_feasible(track: VehicleTrack) -> None:
    """Per-frame speed and heading continuity of a generated track."""
    pts = track.points
    speeds = [math.hypot(b.x - a.x, b.y - a.y) / DT for a, b in zip(pts, pts[1:])]
    for i in range(1, len(speeds)):
        if abs(speeds[i] - speeds[i - 1]) > 0.5 + 1e-6:
            raise GenerationError(
                f"track '{track.track_id}': speed jump {abs(speeds[i] - speeds[i-1]):.2f} m/s at frame {i}"
            )
    if speeds and max(speeds) > MAX_SPEED + 1e-6:
        raise GenerationError(f"track '{track.track_id}': speed {max(speeds):.2f} exceeds {MAX_SPEED}")
    for i in range(1, len(pts)):
        dyaw = abs(wrap_angle(pts[i].yaw - pts[i - 1].yaw))
        if dyaw > 0.2 + 1e-6:
            raise GenerationError(f"track '{track.track_id}': heading jump {dyaw:.3f} rad at frame {i}")


def generate(params: TemplateParams) -> Scenario:
    """Build one scenario from a template; identical params give identical output."""
    params.validate()
    if params.traffic_density > _MAX_DENSITY[params.template]:
        raise GenerationError(
            f"density {params.traffic_density} exceeds the {params.template} "
            f"template footprint (max {_MAX_DENSITY[params.template]})"
        )
    rng = np.random.default_rng(params.seed)
    builder = {"follow": _gen_follow, "cut_in": _gen_cut_in, "left_turn": _gen_left_turn}
    tracks = builder[params.template](rng, params)
    ego, background = tracks[0], tracks[1:]
    for track in tracks:
        _check_feasible(track)
    scenario = Scenario(f"{params.template}-s{params.seed:04d}", ego, background)
    scenario.validate()
    return scenario


def random_policy_rates(
    scenarios: list[Scenario],
    episodes_per_scenario: int,
    seed: int = 0,
) -> dict:
    """Monte-Carlo interactivity probe: outcome rates under uniform random actions."""
    from .env import DrivingEnv, N_ACTIONS
    from .metrics import EpisodeOutcome, classify

    rng = np.random.default_rng(seed)
    env = DrivingEnv(eval_mode=True)
    counts = {"success": 0, "collision": 0, "time_exceed": 0}
    total = 0
    for scenario in scenarios:
        for _ in range(episodes_per_scenario):
            result = env.reset(scenario)
            while not result.done:
                result = env.step(int(rng.integers(N_ACTIONS)))
            outcome = EpisodeOutcome(
                scenario_id=scenario.scenario_id,
                collided=env.collided,
                completion_ratio=env.completion_ratio(),
            )
            counts[classify(outcome)] += 1
            total += 1
    return {key: counts[key] / total for key in counts} | {"episodes": total}
