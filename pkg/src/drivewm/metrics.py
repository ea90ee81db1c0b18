"""Evaluation metrics: episode outcomes, traffic density levels, prediction error."""

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .observation import in_detection_range
from .tracks import Scenario

SUCCESS_COMPLETION = 0.9

DENSITY_LOW_MAX = 6
DENSITY_MEDIUM_MAX = 8


@dataclass
class EpisodeOutcome:
    scenario_id: str
    collided: bool
    completion_ratio: float
    episode_return: float = 0.0
    steps: int = 0
    density_level: str = "low"
    ego_ade: float | None = None
    vdi_ade: float | None = None
    cv_ego_ade: float | None = None


def classify(outcome: EpisodeOutcome) -> str:
    """Partition an episode into success / collision / time_exceed.

    A collision dominates regardless of how far the route got; success
    requires at least 90% completion without any collision.
    """
    if outcome.collided:
        return "collision"
    if outcome.completion_ratio >= SUCCESS_COMPLETION:
        return "success"
    return "time_exceed"


def density_level(scenario: Scenario) -> str:
    """Traffic level from the peak neighbor count around the log-replayed ego."""
    n_max = 0
    ego = scenario.ego_track
    for p in ego.points:
        ego_pose = (p.x, p.y, p.yaw)
        count = 0
        for track in scenario.background:
            if not track.exists_at(p.t_ms):
                continue
            q = track.point_at(p.t_ms)
            if in_detection_range(ego_pose, q.x, q.y):
                count += 1
        n_max = max(n_max, count)
    if n_max <= DENSITY_LOW_MAX:
        return "low"
    if n_max <= DENSITY_MEDIUM_MAX:
        return "medium"
    return "high"


def ade(predictions: np.ndarray, ground_truth: np.ndarray, mask: np.ndarray) -> float | None:
    """Mean Euclidean distance over valid prediction points.

    ``predictions`` and ``ground_truth`` are (..., H, 2); ``mask`` is (..., H).
    Returns None when no point is valid (undefined, not zero).
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return None
    err = np.linalg.norm(np.asarray(predictions) - np.asarray(ground_truth), axis=-1)
    return float(err[mask].mean())


@dataclass
class MetricsReport:
    """Aggregate over a set of evaluation episodes."""

    episodes: int
    success_rate: float
    collision_rate: float
    time_exceed_rate: float
    avg_completion: float
    avg_return: float
    ego_ade: float | None
    vdi_ade: float | None
    cv_ego_ade: float | None
    by_density: dict = field(default_factory=dict)

    @classmethod
    def from_outcomes(cls, outcomes: list[EpisodeOutcome]) -> "MetricsReport":
        if not outcomes:
            raise ValueError("no episodes to aggregate")
        labels = [classify(o) for o in outcomes]
        n = len(outcomes)

        def rate(label):
            return sum(1 for l in labels if l == label) / n

        def mean_opt(values):
            vals = [v for v in values if v is not None]
            return float(np.mean(vals)) if vals else None

        by_density = {}
        for level in ("low", "medium", "high"):
            group = [o for o in outcomes if o.density_level == level]
            if group:
                glabels = [classify(o) for o in group]
                by_density[level] = {
                    "episodes": len(group),
                    "success_rate": sum(1 for l in glabels if l == "success") / len(group),
                    "collision_rate": sum(1 for l in glabels if l == "collision") / len(group),
                }
        return cls(
            episodes=n,
            success_rate=rate("success"),
            collision_rate=rate("collision"),
            time_exceed_rate=rate("time_exceed"),
            avg_completion=float(np.mean([o.completion_ratio for o in outcomes])),
            avg_return=float(np.mean([o.episode_return for o in outcomes])),
            ego_ade=mean_opt([o.ego_ade for o in outcomes]),
            vdi_ade=mean_opt([o.vdi_ade for o in outcomes]),
            cv_ego_ade=mean_opt([o.cv_ego_ade for o in outcomes]),
            by_density=by_density,
        )

    def to_text(self) -> str:
        def pct(x):
            return f"{100.0 * x:6.2f}%"

        def opt(x):
            return f"{x:.3f} m" if x is not None else "n/a"

        lines = [
            f"episodes            {self.episodes}",
            f"success rate        {pct(self.success_rate)}",
            f"collision rate      {pct(self.collision_rate)}",
            f"time-exceed rate    {pct(self.time_exceed_rate)}",
            f"avg completion      {pct(self.avg_completion)}",
            f"avg episode return  {self.avg_return:.3f}",
            f"ego ADE (2s)        {opt(self.ego_ade)}",
            f"VDI ADE (2s)        {opt(self.vdi_ade)}",
            f"const-vel ego ADE   {opt(self.cv_ego_ade)}",
        ]
        for level, row in self.by_density.items():
            lines.append(
                f"density {level:<7} n={row['episodes']:<4d} "
                f"success {pct(row['success_rate'])}  collision {pct(row['collision_rate'])}"
            )
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(
            ["episodes", "success_rate", "collision_rate", "time_exceed_rate",
             "avg_completion", "avg_return", "ego_ade", "vdi_ade", "cv_ego_ade"]
        )
        fmt = lambda x: "" if x is None else f"{x:.6f}"
        writer.writerow(
            [self.episodes, fmt(self.success_rate), fmt(self.collision_rate),
             fmt(self.time_exceed_rate), fmt(self.avg_completion), fmt(self.avg_return),
             fmt(self.ego_ade), fmt(self.vdi_ade), fmt(self.cv_ego_ade)]
        )
        return buf.getvalue()

    def to_json(self) -> str:
        doc = dict(self.__dict__)
        return json.dumps(doc, indent=1, sort_keys=True)
