"""Deterministic log-replay driving simulator.

Background vehicles retrace their recorded tracks frame by frame; the ego
replaces one logged vehicle and follows that vehicle's path under a
kinematic bicycle model, with a longitudinal PID tracking the commanded
target speed and a lateral PID steering toward a lookahead waypoint.
Rewards trade safety against efficiency; episodes end when the route is
finished or the logged time budget runs out (plus, in evaluation mode, on
collision).
"""

from dataclasses import dataclass, field

from .control import (
    ControlConfig,
    EgoDynamicState,
    PIDController,
    Route,
    bicycle_update,
    pid_lateral,
    pid_longitudinal,
)
from .errors import UsageError, ValidationError
from .geometry import OrientedBox, boxes_overlap
from .observation import HistoryBuffer, Pose, in_detection_range
from .tracks import DT, FRAME_MS, Scenario

SPEED_ACTIONS = (0.0, 3.0, 6.0, 9.0)   # selectable target speeds, m/s
N_ACTIONS = len(SPEED_ACTIONS)
V_NORM_MAX = SPEED_ACTIONS[-1]

COLLISION_REWARD_SCALE = -30.0
SPEED_REWARD_SCALE = 0.3
STEP_REWARD = -0.3


def compute_reward(collision: bool, v_norm: float) -> float:
    """Per-step reward: collision penalty + speed incentive + time penalty."""
    r = COLLISION_REWARD_SCALE * (1.0 + v_norm) if collision else 0.0
    return r + SPEED_REWARD_SCALE * v_norm + STEP_REWARD


@dataclass
class FrameSnapshot:
    """World-frame poses at one frame: the ego plus vehicles in detection range."""

    t_ms: int
    ego: Pose
    ego_v: float
    vehicles: dict[int, Pose] = field(default_factory=dict)


@dataclass
class StepResult:
    observation_raw: FrameSnapshot
    reward: float
    done: bool
    info: dict


class DrivingEnv:
    """Single-scenario log-replay environment stepping at 10 Hz.

    In training mode collisions penalize but do not terminate; in
    evaluation mode the episode ends at the first collision. Each new
    contact with a particular vehicle is penalized once, so an episode
    that drives on after a crash is not charged every overlapping frame.
    """

    def __init__(self, control: ControlConfig | None = None, eval_mode: bool = False):
        self.control = control or ControlConfig()
        self.eval_mode = eval_mode
        self.history = HistoryBuffer()
        self.scenario: Scenario | None = None
        self._active = False

    # -- lifecycle -----------------------------------------------------

    def reset(self, scenario: Scenario, start_offset_ms: int = 0) -> StepResult:
        scenario.validate()
        if start_offset_ms % FRAME_MS or start_offset_ms < 0:
            raise ValidationError(f"start offset {start_offset_ms} must be a non-negative frame multiple")
        if start_offset_ms > scenario.time_budget_ms:
            raise ValidationError("start offset exceeds the scenario time budget")
        self.scenario = scenario
        ego_track = scenario.ego_track
        self._ids = {track.track_id: i for i, track in enumerate(scenario.background)}
        self._tracks = {i: track for i, track in enumerate(scenario.background)}
        self.clock_ms = ego_track.start_ms + start_offset_ms
        self._end_ms = ego_track.end_ms

        spawn = ego_track.point_at(self.clock_ms)
        self.ego = EgoDynamicState(
            x=spawn.x,
            y=spawn.y,
            yaw=spawn.yaw,
            v=ego_track.speed_at(self.clock_ms),
            wheelbase=self.control.wheelbase,
        )
        self.route = Route(ego_track.xy())
        self.ego.route_progress = self.route.progress(spawn.x, spawn.y, prev=0.0)

        self._pid_lon = PIDController(
            self.control.kp_lon, self.control.ki_lon, self.control.kd_lon, self.control.integral_limit
        )
        self._pid_lat = PIDController(self.control.kp_lat, kd=self.control.kd_lat)
        self._overlapping: set[int] = set()
        self._collided = False
        self._active = True
        self.steps = 0

        # Seed the 2 s of pre-spawn history from the log (ego included);
        # frames before the log starts are simply absent (zero-padded later).
        self.history = HistoryBuffer()
        first = max(ego_track.start_ms, self.clock_ms - (self.history.maxlen - 1) * FRAME_MS)
        for t in range(first, self.clock_ms, FRAME_MS):
            p = ego_track.point_at(t)
            logged_ego: Pose = (p.x, p.y, p.yaw)
            self.history.push(logged_ego, self._replay_poses(t, logged_ego))
        self.history.push(self.ego_pose, self._replay_poses(self.clock_ms, self.ego_pose))

        snapshot = self._snapshot()
        return StepResult(snapshot, 0.0, False, self._info(collision=False))

    def step(self, action_index: int) -> StepResult:
        if not self._active:
            raise UsageError("step() called on a finished or unreset environment")
        if not 0 <= action_index < N_ACTIONS:
            raise ValidationError(f"action index {action_index} outside 0..{N_ACTIONS - 1}")
        target_v = SPEED_ACTIONS[action_index]

        accel = pid_longitudinal(self._pid_lon, target_v, self.ego.v, DT)
        lookahead = self.control.lookahead_base + self.control.lookahead_gain * self.ego.v
        steer = pid_lateral(
            self._pid_lat, self.route, self.ego.x, self.ego.y, self.ego.yaw,
            self.ego.route_progress, lookahead, DT,
        )
        self.ego = bicycle_update(
            self.ego, accel, steer, DT,
            self.control.accel_min, self.control.accel_max, self.control.steer_limit,
        )
        self.ego.route_progress = self.route.progress(
            self.ego.x, self.ego.y, prev=self.ego.route_progress
        )
        self.clock_ms += FRAME_MS
        self.steps += 1

        overlapping = self._overlapping_ids()
        new_contact = bool(overlapping - self._overlapping)
        self._overlapping = overlapping
        if new_contact:
            self._collided = True

        v_norm = self._v_norm()
        reward = compute_reward(new_contact, v_norm)

        done = (
            self.ego.route_progress >= self.route.length - 1e-9
            or self.clock_ms >= self._end_ms
            or (self.eval_mode and bool(overlapping))
        )
        if done:
            self._active = False

        self.history.push(self.ego_pose, self._replay_poses(self.clock_ms, self.ego_pose))
        return StepResult(self._snapshot(), reward, done, self._info(collision=new_contact))

    # -- queries -------------------------------------------------------

    @property
    def ego_pose(self) -> Pose:
        return (self.ego.x, self.ego.y, self.ego.yaw)

    @property
    def done(self) -> bool:
        return not self._active

    @property
    def collided(self) -> bool:
        """Whether any contact has occurred this episode."""
        return self._collided

    def completion_ratio(self) -> float:
        return min(1.0, max(0.0, self.ego.route_progress / self.route.length))

    def vehicle_name(self, vid: int) -> str:
        return self._tracks[vid].track_id

    # -- internals -----------------------------------------------------

    def _v_norm(self) -> float:
        return min(1.0, max(0.0, self.ego.v / V_NORM_MAX))

    def _info(self, collision: bool) -> dict:
        return {
            "collision": collision,
            "completion_ratio": self.completion_ratio(),
            "v_norm": self._v_norm(),
        }

    def _replay_poses(self, t_ms: int, ego_pose: Pose) -> dict[int, Pose]:
        """Poses of replayed vehicles existing at ``t_ms`` within detection range."""
        poses: dict[int, Pose] = {}
        for vid, track in self._tracks.items():
            if not track.exists_at(t_ms):
                continue
            p = track.point_at(t_ms)
            if in_detection_range(ego_pose, p.x, p.y):
                poses[vid] = (p.x, p.y, p.yaw)
        return poses

    def _snapshot(self) -> FrameSnapshot:
        return FrameSnapshot(
            t_ms=self.clock_ms,
            ego=self.ego_pose,
            ego_v=self.ego.v,
            vehicles=self._replay_poses(self.clock_ms, self.ego_pose),
        )

    def _ego_box(self) -> OrientedBox:
        track = self.scenario.ego_track
        return OrientedBox(self.ego.x, self.ego.y, self.ego.yaw, track.length, track.width)

    def _overlapping_ids(self) -> set[int]:
        ego_box = self._ego_box()
        hits = set()
        for vid, track in self._tracks.items():
            if not track.exists_at(self.clock_ms):
                continue
            p = track.point_at(self.clock_ms)
            box = OrientedBox(p.x, p.y, p.yaw, track.length, track.width)
            if boxes_overlap(ego_box, box):
                hits.add(vid)
        return hits
