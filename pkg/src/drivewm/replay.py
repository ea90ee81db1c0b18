"""Two-stage experience store: a live episode buffer and a sequence sampler.

Steps accumulate in an :class:`EpisodeBuffer` while an episode runs. At
episode end the buffer derives every step's future-trajectory labels from
the recorded frames and hands a finalized :class:`Episode` of flat arrays
to the :class:`ReplayStore`, which samples fixed-length training windows
that never cross episode boundaries.
"""

from dataclasses import dataclass

import numpy as np

from .env import FrameSnapshot
from .errors import EmptyStoreError, UsageError
from .observation import Observation, extract_future_targets


@dataclass
class Episode:
    """Finalized episode as stacked arrays (length L along axis 0)."""

    ego: np.ndarray          # (L, 19, 5) float32
    vdi: np.ndarray          # (L, Nd, 19, 5) float32
    vdi_mask: np.ndarray     # (L, Nd) bool
    vdi_ids: np.ndarray      # (L, Nd) int64
    vpi: np.ndarray          # (L, Np, 19, 5) float32
    vpi_mask: np.ndarray     # (L, Np) bool
    vpi_ids: np.ndarray      # (L, Np) int64
    action: np.ndarray       # (L,) int64
    reward: np.ndarray       # (L,) float32
    done: np.ndarray         # (L,) bool
    y_ego: np.ndarray        # (L, H, 2) float32
    y_ego_mask: np.ndarray   # (L, H) bool
    y_vdi: np.ndarray        # (L, Nd, H, 2) float32
    y_vdi_mask: np.ndarray   # (L, Nd, H) bool

    def __len__(self) -> int:
        return len(self.action)


_FIELDS = list(Episode.__dataclass_fields__)


class EpisodeBuffer:
    """Collects (observation, action, reward, done, frame) for one episode."""

    def __init__(self):
        self.clear()

    def clear(self) -> None:
        self._obs: list[Observation] = []
        self._actions: list[int] = []
        self._rewards: list[float] = []
        self._dones: list[bool] = []
        self._frames: list[FrameSnapshot] = []

    def __len__(self) -> int:
        return len(self._actions)

    def append_step(
        self,
        obs: Observation,
        action: int,
        reward: float,
        done: bool,
        frame: FrameSnapshot,
    ) -> None:
        """Record one step; ``frame`` is the snapshot the observation was built from."""
        if self._dones and self._dones[-1]:
            raise UsageError("appending to an episode that already ended")
        self._obs.append(obs)
        self._actions.append(int(action))
        self._rewards.append(float(reward))
        self._dones.append(bool(done))
        self._frames.append(frame)

    def finalize_episode(self, final_frame: FrameSnapshot, horizon: int) -> Episode:
        """Derive future labels against the full frame trace and emit the episode."""
        if not self._actions:
            raise UsageError("finalizing an empty episode")
        if not self._dones[-1]:
            raise UsageError("finalize_episode() before the episode ended")
        ego_trace = [f.ego for f in self._frames] + [final_frame.ego]
        veh_trace = [f.vehicles for f in self._frames] + [final_frame.vehicles]
        length = len(self._actions)

        targets = [
            extract_future_targets(ego_trace, veh_trace, t, horizon, self._obs[t].vdi_ids)
            for t in range(length)
        ]
        episode = Episode(
            ego=np.stack([o.ego_hist for o in self._obs]).astype(np.float32),
            vdi=np.stack([o.vdi_hist for o in self._obs]).astype(np.float32),
            vdi_mask=np.stack([o.vdi_mask for o in self._obs]),
            vdi_ids=np.stack([o.vdi_ids for o in self._obs]),
            vpi=np.stack([o.vpi_hist for o in self._obs]).astype(np.float32),
            vpi_mask=np.stack([o.vpi_mask for o in self._obs]),
            vpi_ids=np.stack([o.vpi_ids for o in self._obs]),
            action=np.asarray(self._actions, dtype=np.int64),
            reward=np.asarray(self._rewards, dtype=np.float32),
            done=np.asarray(self._dones, dtype=bool),
            y_ego=np.stack([t.ego_future for t in targets]).astype(np.float32),
            y_ego_mask=np.stack([t.ego_mask for t in targets]),
            y_vdi=np.stack([t.vdi_future for t in targets]).astype(np.float32),
            y_vdi_mask=np.stack([t.vdi_mask for t in targets]),
        )
        self.clear()
        return episode


def save_episode(path, episode: Episode) -> None:
    """Spill one episode to disk as an .npz with the Episode field order."""
    np.savez_compressed(path, **{name: getattr(episode, name) for name in _FIELDS})


def load_episode(path) -> Episode:
    with np.load(path) as data:
        return Episode(**{name: data[name] for name in _FIELDS})


class ReplayStore:
    """Episode store sampling uniform fixed-length windows.

    Capacity counts steps; when exceeded, whole episodes are evicted oldest
    first. Windows are drawn uniformly over all valid (episode, offset)
    pairs, so longer episodes are proportionally more likely.
    """

    def __init__(self, capacity_steps: int = 100_000, seed: int = 0):
        self.capacity = capacity_steps
        self._episodes: list[Episode] = []
        self._rng = np.random.default_rng(seed)

    @property
    def total_steps(self) -> int:
        return sum(len(e) for e in self._episodes)

    @property
    def num_episodes(self) -> int:
        return len(self._episodes)

    def add_episode(self, episode: Episode) -> None:
        self._episodes.append(episode)
        while self.total_steps > self.capacity and len(self._episodes) > 1:
            self._episodes.pop(0)

    def can_sample(self, length: int) -> bool:
        return any(len(e) >= length for e in self._episodes)

    def sample_sequences(self, batch: int, length: int) -> dict[str, np.ndarray]:
        """Time-major batch of contiguous windows with an is-first flag."""
        if not self._episodes:
            raise EmptyStoreError("replay store holds no finalized episodes")
        eligible = [e for e in self._episodes if len(e) >= length]
        if not eligible:
            raise EmptyStoreError(f"no stored episode is at least {length} steps long")
        weights = np.array([len(e) - length + 1 for e in eligible], dtype=float)
        probs = weights / weights.sum()
        columns = []
        for _ in range(batch):
            ep = eligible[self._rng.choice(len(eligible), p=probs)]
            offset = int(self._rng.integers(len(ep) - length + 1))
            window = {name: getattr(ep, name)[offset : offset + length] for name in _FIELDS}
            window["is_first"] = np.zeros(length, dtype=bool)
            window["is_first"][0] = True
            columns.append(window)
        out = {
            name: np.stack([c[name] for c in columns], axis=1)
            for name in columns[0]
        }
        out["cont"] = 1.0 - out["done"].astype(np.float32)
        return out
