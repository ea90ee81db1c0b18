"""Ego-frame vectorized observations and prediction targets.

A vehicle's observation is its trajectory over the last 2 s (20 poses at
10 Hz) rendered as 19 vectors, each vector holding the previous position,
the current position and the heading, all expressed in the ego's current
frame. Surrounding vehicles are split by distance into slots for direct
influencers (VDI, the 5 closest) and potential influencers (VPI, the next
5); missing slots are zero-padded and masked.
"""

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .geometry import to_frame, wrap_angle

N_VDI = 5
N_VPI = 5
HIST_POSES = 20          # poses spanning 2 s
HIST_VECTORS = HIST_POSES - 1
FEATURES = 5             # (x_prev, y_prev, x_cur, y_cur, yaw)
DETECT_FRONT_M = 60.0
DETECT_REAR_M = 30.0
EMPTY_ID = -1

Pose = tuple[float, float, float]  # (x, y, yaw) in world frame


def in_detection_range(ego_pose: Pose, x: float, y: float) -> bool:
    """Detection covers 60 m except in the rear half-plane, where it is 30 m."""
    ex, ey, eyaw = ego_pose
    dx, dy = x - ex, y - ey
    dist = math.hypot(dx, dy)
    behind = (dx * math.cos(eyaw) + dy * math.sin(eyaw)) < 0.0
    return dist <= (DETECT_REAR_M if behind else DETECT_FRONT_M)


@dataclass
class NeighborAssignment:
    """In-range vehicles sorted by distance and split into VDI/VPI groups."""

    ids: list[int]
    distances: list[float]
    n_vdi: int = N_VDI
    n_vpi: int = N_VPI

    @property
    def vdi_ids(self) -> list[int]:
        return self.ids[: self.n_vdi]

    @property
    def vpi_ids(self) -> list[int]:
        return self.ids[self.n_vdi : self.n_vdi + self.n_vpi]


def select_neighbors(
    ego_pose: Pose,
    vehicle_poses: dict[int, Pose],
    n_vdi: int = N_VDI,
    n_vpi: int = N_VPI,
) -> NeighborAssignment:
    """Rank in-range vehicles by distance; closest fill VDI, then VPI slots."""
    ranked = []
    ex, ey, _ = ego_pose
    for vid, (x, y, _yaw) in vehicle_poses.items():
        if not in_detection_range(ego_pose, x, y):
            continue
        ranked.append((math.hypot(x - ex, y - ey), vid))
    ranked.sort()  # ties broken by id for determinism
    ranked = ranked[: n_vdi + n_vpi]
    return NeighborAssignment(
        ids=[vid for _, vid in ranked],
        distances=[d for d, _ in ranked],
        n_vdi=n_vdi,
        n_vpi=n_vpi,
    )


def to_ego_frame(world_points, ego_pose: Pose) -> np.ndarray:
    """Rigid transform of (..., 2) world points into the ego frame."""
    return to_frame(world_points, ego_pose[0], ego_pose[1], ego_pose[2])


@dataclass
class Observation:
    """Fixed-slot ego-frame observation for one timestep."""

    ego_hist: np.ndarray                      # (19, 5)
    vdi_hist: np.ndarray                      # (N_VDI, 19, 5)
    vdi_mask: np.ndarray                      # (N_VDI,) bool
    vdi_ids: np.ndarray                       # (N_VDI,) int64, EMPTY_ID when unused
    vpi_hist: np.ndarray                      # (N_VPI, 19, 5)
    vpi_mask: np.ndarray                      # (N_VPI,) bool
    vpi_ids: np.ndarray                       # (N_VPI,) int64


@dataclass
class PredictionTarget:
    """Future ego/VDI positions in the frame of the step they supervise."""

    ego_future: np.ndarray                    # (H, 2)
    ego_mask: np.ndarray                      # (H,) bool
    vdi_future: np.ndarray                    # (N_VDI, H, 2)
    vdi_mask: np.ndarray                      # (N_VDI, H) bool
    vdi_ids: np.ndarray                       # (N_VDI,) int64


class HistoryBuffer:
    """Sliding window of the last ``maxlen`` frames of world-frame poses.

    Each frame maps vehicle id -> pose for the vehicles visible that frame;
    the ego pose is tracked separately. ``trailing`` returns a vehicle's
    poses over the run of consecutive frames ending now (a vehicle that
    dropped out and came back only counts from its reappearance).
    """

    def __init__(self, maxlen: int = HIST_POSES):
        self.maxlen = maxlen
        self._frames: deque[dict[int, Pose]] = deque(maxlen=maxlen)
        self._ego: deque[Pose] = deque(maxlen=maxlen)

    def push(self, ego_pose: Pose, vehicle_poses: dict[int, Pose]) -> None:
        self._ego.append(ego_pose)
        self._frames.append(dict(vehicle_poses))

    def trailing_ego(self) -> list[Pose]:
        return list(self._ego)

    def trailing(self, vid: int) -> list[Pose]:
        poses = []
        for frame in reversed(self._frames):
            if vid not in frame:
                break
            poses.append(frame[vid])
        poses.reverse()
        return poses

    def __len__(self) -> int:
        return len(self._frames)


def _history_vectors(poses: list[Pose], ego_pose: Pose) -> np.ndarray:
    """Render ≤20 world poses as 19 front-zero-padded ego-frame vectors."""
    out = np.zeros((HIST_VECTORS, FEATURES))
    k = len(poses)
    if k < 2:
        return out
    if k > HIST_POSES:
        raise ValidationError(f"history holds {k} poses, limit is {HIST_POSES}")
    pts = to_ego_frame(np.array([(p[0], p[1]) for p in poses]), ego_pose)
    yaws = wrap_angle(np.array([p[2] for p in poses]) - ego_pose[2])
    n_vec = k - 1
    rows = out[HIST_VECTORS - n_vec :]
    rows[:, 0:2] = pts[:-1]
    rows[:, 2:4] = pts[1:]
    rows[:, 4] = yaws[1:]
    return out


def build_observation(
    history: HistoryBuffer,
    assignment: NeighborAssignment,
    ego_pose: Pose,
) -> Observation:
    """Assemble the slotted observation for the current frame."""
    n_vdi, n_vpi = assignment.n_vdi, assignment.n_vpi
    obs = Observation(
        ego_hist=_history_vectors(history.trailing_ego(), ego_pose),
        vdi_hist=np.zeros((n_vdi, HIST_VECTORS, FEATURES)),
        vdi_mask=np.zeros(n_vdi, dtype=bool),
        vdi_ids=np.full(n_vdi, EMPTY_ID, dtype=np.int64),
        vpi_hist=np.zeros((n_vpi, HIST_VECTORS, FEATURES)),
        vpi_mask=np.zeros(n_vpi, dtype=bool),
        vpi_ids=np.full(n_vpi, EMPTY_ID, dtype=np.int64),
    )
    for slot, vid in enumerate(assignment.vdi_ids):
        obs.vdi_hist[slot] = _history_vectors(history.trailing(vid), ego_pose)
        obs.vdi_mask[slot] = True
        obs.vdi_ids[slot] = vid
    for slot, vid in enumerate(assignment.vpi_ids):
        obs.vpi_hist[slot] = _history_vectors(history.trailing(vid), ego_pose)
        obs.vpi_mask[slot] = True
        obs.vpi_ids[slot] = vid
    return obs


def extract_future_targets(
    ego_trace: list[Pose],
    vehicle_trace: list[dict[int, Pose]],
    t: int,
    horizon: int,
    vdi_ids,
) -> PredictionTarget:
    """Ground-truth future positions for step ``t``, in that step's ego frame.

    A VDI member is supervised until the first future frame it is absent
    from (left detection range or the scene); later frames stay masked even
    if it reappears. Frames past the end of the trace are masked.
    """
    ego_pose = ego_trace[t]
    n_vdi = len(vdi_ids)
    target = PredictionTarget(
        ego_future=np.zeros((horizon, 2)),
        ego_mask=np.zeros(horizon, dtype=bool),
        vdi_future=np.zeros((n_vdi, horizon, 2)),
        vdi_mask=np.zeros((n_vdi, horizon), dtype=bool),
        vdi_ids=np.asarray(vdi_ids, dtype=np.int64),
    )
    n = len(ego_trace)
    for k in range(horizon):
        idx = t + 1 + k
        if idx >= n:
            break
        target.ego_future[k] = to_ego_frame(ego_trace[idx][:2], ego_pose)
        target.ego_mask[k] = True
    for slot, vid in enumerate(vdi_ids):
        if vid == EMPTY_ID:
            continue
        for k in range(horizon):
            idx = t + 1 + k
            if idx >= n or vid not in vehicle_trace[idx]:
                break
            pose = vehicle_trace[idx][vid]
            target.vdi_future[slot, k] = to_ego_frame(pose[:2], ego_pose)
            target.vdi_mask[slot, k] = True
    return target


def constant_velocity_prediction(poses: list[Pose], ego_pose: Pose, horizon: int) -> np.ndarray:
    """Baseline forecast: extrapolate the last observed displacement.

    Returns (horizon, 2) positions in the ego frame. With fewer than two
    poses the vehicle is assumed stationary.
    """
    pts = to_ego_frame(np.array([(p[0], p[1]) for p in poses]), ego_pose)
    cur = pts[-1]
    vel = pts[-1] - pts[-2] if len(pts) >= 2 else np.zeros(2)
    steps = np.arange(1, horizon + 1)[:, None]
    return cur + steps * vel
