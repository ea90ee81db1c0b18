"""Track and scenario records: the replay log a simulation runs from.

Scenario files are single JSON documents::

    {"scenario_id": ..., "ego": <track>, "background": [<track>, ...]}
    <track> = {"id": str, "length": m, "width": m,
               "points": [[t_ms, x, y, yaw], ...]}

Track points are spaced exactly 100 ms apart (10 Hz frames). Tracks can
also be ingested from CSV with columns
``track_id, frame, timestamp_ms, x, y, psi_rad, length, width``.
"""

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ScenarioValidationError

FRAME_MS = 100
DT = FRAME_MS / 1000.0


@dataclass(frozen=True)
class TrackPoint:
    t_ms: int
    x: float
    y: float
    yaw: float


@dataclass
class VehicleTrack:
    track_id: str
    points: list[TrackPoint]
    length: float
    width: float

    @property
    def start_ms(self) -> int:
        return self.points[0].t_ms

    @property
    def end_ms(self) -> int:
        return self.points[-1].t_ms

    @property
    def duration_ms(self) -> int:
        return self.end_ms - self.start_ms

    def exists_at(self, t_ms: int) -> bool:
        return self.start_ms <= t_ms <= self.end_ms

    def point_at(self, t_ms: int) -> TrackPoint:
        """Recorded point at an exact frame time (no interpolation)."""
        idx = (t_ms - self.start_ms) // FRAME_MS
        if not self.exists_at(t_ms) or (t_ms - self.start_ms) % FRAME_MS:
            raise KeyError(f"track '{self.track_id}' has no frame at {t_ms} ms")
        return self.points[idx]

    def speed_at(self, t_ms: int) -> float:
        """Speed from the displacement of adjacent frames (m/s)."""
        if len(self.points) < 2:
            return 0.0
        cur = self.point_at(t_ms)
        if t_ms == self.start_ms:
            nxt = self.points[1]
            return math.hypot(nxt.x - cur.x, nxt.y - cur.y) / DT
        prev = self.point_at(t_ms - FRAME_MS)
        return math.hypot(cur.x - prev.x, cur.y - prev.y) / DT

    def xy(self):
        """Positions as an (n, 2) array-friendly list."""
        return [(p.x, p.y) for p in self.points]

    def validate(self) -> None:
        if not self.points:
            raise ScenarioValidationError(f"track '{self.track_id}': no points")
        if self.length <= 0 or self.width <= 0:
            raise ScenarioValidationError(
                f"track '{self.track_id}': non-positive extents {self.length}x{self.width}"
            )
        for i, p in enumerate(self.points):
            if p.t_ms % FRAME_MS:
                raise ScenarioValidationError(
                    f"track '{self.track_id}': timestamp {p.t_ms} not a multiple of {FRAME_MS} ms"
                )
            if not (-math.pi < p.yaw <= math.pi):
                raise ScenarioValidationError(
                    f"track '{self.track_id}': yaw {p.yaw} outside (-pi, pi] at {p.t_ms} ms"
                )
            if i and p.t_ms - self.points[i - 1].t_ms != FRAME_MS:
                raise ScenarioValidationError(
                    f"track '{self.track_id}': gap {p.t_ms - self.points[i - 1].t_ms} ms "
                    f"before {p.t_ms} ms (must be exactly {FRAME_MS})"
                )


@dataclass
class Scenario:
    scenario_id: str
    ego_track: VehicleTrack
    background: list[VehicleTrack] = field(default_factory=list)

    @property
    def time_budget_ms(self) -> int:
        """Maximum episode duration: the ego's logged existence time."""
        return self.ego_track.duration_ms

    def validate(self) -> None:
        self.ego_track.validate()
        route_len = 0.0
        pts = self.ego_track.points
        for a, b in zip(pts, pts[1:]):
            route_len += math.hypot(b.x - a.x, b.y - a.y)
        if route_len <= 0.0:
            raise ScenarioValidationError(
                f"track '{self.ego_track.track_id}': ego route has zero length"
            )
        seen = {self.ego_track.track_id}
        for track in self.background:
            track.validate()
            if track.track_id in seen:
                raise ScenarioValidationError(f"track '{track.track_id}': duplicate id")
            seen.add(track.track_id)

    def to_dict(self) -> dict:
        return {
            "scenario_id": self.scenario_id,
            "ego": _track_to_dict(self.ego_track),
            "background": [_track_to_dict(t) for t in self.background],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Scenario":
        try:
            return cls(
                scenario_id=doc["scenario_id"],
                ego_track=_track_from_dict(doc["ego"]),
                background=[_track_from_dict(t) for t in doc["background"]],
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ScenarioValidationError(f"malformed scenario document: {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "Scenario":
        scenario = cls.from_dict(json.loads(Path(path).read_text()))
        scenario.validate()
        return scenario


def _track_to_dict(track: VehicleTrack) -> dict:
    return {
        "id": track.track_id,
        "length": track.length,
        "width": track.width,
        "points": [[p.t_ms, p.x, p.y, p.yaw] for p in track.points],
    }


def _track_from_dict(doc: dict) -> VehicleTrack:
    return VehicleTrack(
        track_id=str(doc["id"]),
        points=[TrackPoint(int(t), float(x), float(y), float(yaw)) for t, x, y, yaw in doc["points"]],
        length=float(doc["length"]),
        width=float(doc["width"]),
    )


def load_tracks_csv(path) -> list[VehicleTrack]:
    """Read tracks from CSV (one row per vehicle per 100 ms frame)."""
    rows_by_id: dict[str, list] = {}
    meta: dict[str, tuple] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"track_id", "frame", "timestamp_ms", "x", "y", "psi_rad", "length", "width"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            missing = required - set(reader.fieldnames or [])
            raise ScenarioValidationError(f"track CSV missing columns: {sorted(missing)}")
        for row in reader:
            tid = row["track_id"]
            rows_by_id.setdefault(tid, []).append(
                TrackPoint(int(row["timestamp_ms"]), float(row["x"]), float(row["y"]), float(row["psi_rad"]))
            )
            meta[tid] = (float(row["length"]), float(row["width"]))
    tracks = []
    for tid, points in rows_by_id.items():
        points.sort(key=lambda p: p.t_ms)
        length, width = meta[tid]
        track = VehicleTrack(tid, points, length, width)
        track.validate()
        tracks.append(track)
    return tracks


def scenario_from_tracks(scenario_id: str, ego_id: str, tracks: list[VehicleTrack]) -> Scenario:
    """Build a scenario by electing one track as the ego."""
    ego = next((t for t in tracks if t.track_id == ego_id), None)
    if ego is None:
        raise ScenarioValidationError(f"track '{ego_id}': not found in track set")
    background = [t for t in tracks if t.track_id != ego_id]
    scenario = Scenario(scenario_id, ego, background)
    scenario.validate()
    return scenario
