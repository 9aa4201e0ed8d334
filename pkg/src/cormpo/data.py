"""Transition datasets: in-memory arrays, normalization stats, JSON-Lines I/O.

A dataset is a flat collection of (state, action, reward, next_state, done)
transitions tagged with trajectory id and step index.  The sidecar metadata
file freezes the generator configuration and the normalization statistics
so every downstream stage (twin, guardian, policy training, evaluation)
shares one set of constants.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .domain import N_FEATURES, InvalidInputError, WINDOW_SHAPE

_STD_FLOOR = 1e-8  # degenerate features still need an invertible z-scale


@dataclass(frozen=True)
class NormalizationStats:
    """Per-feature z-score statistics plus action and reward statistics."""

    feature_mean: np.ndarray
    feature_std: np.ndarray
    action_mean: float
    action_std: float
    reward_mean: float
    reward_std: float

    def __post_init__(self) -> None:
        mean = np.asarray(self.feature_mean, dtype=np.float64).reshape(N_FEATURES)
        std = np.asarray(self.feature_std, dtype=np.float64).reshape(N_FEATURES)
        std = np.maximum(std, _STD_FLOOR)
        object.__setattr__(self, "feature_mean", mean)
        object.__setattr__(self, "feature_std", std)
        object.__setattr__(self, "action_std", max(float(self.action_std), _STD_FLOOR))
        object.__setattr__(self, "reward_std", max(float(self.reward_std), _STD_FLOOR))

    def normalize_windows(self, windows: np.ndarray) -> np.ndarray:
        return (np.asarray(windows, dtype=np.float64) - self.feature_mean) / self.feature_std

    def denormalize_windows(self, windows_z: np.ndarray) -> np.ndarray:
        return np.asarray(windows_z, dtype=np.float64) * self.feature_std + self.feature_mean

    def normalize_actions(self, levels: np.ndarray) -> np.ndarray:
        return (np.asarray(levels, dtype=np.float64) - self.action_mean) / self.action_std

    def to_dict(self) -> dict:
        return {
            "feature_mean": self.feature_mean.tolist(),
            "feature_std": self.feature_std.tolist(),
            "action_mean": self.action_mean,
            "action_std": self.action_std,
            "reward_mean": self.reward_mean,
            "reward_std": self.reward_std,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(
            feature_mean=np.asarray(d["feature_mean"], dtype=np.float64),
            feature_std=np.asarray(d["feature_std"], dtype=np.float64),
            action_mean=float(d["action_mean"]),
            action_std=float(d["action_std"]),
            reward_mean=float(d["reward_mean"]),
            reward_std=float(d["reward_std"]),
        )


@dataclass
class Dataset:
    """Columnar transition storage; all windows are raw (unnormalized)."""

    states: np.ndarray       # (N, 6, 12)
    actions: np.ndarray      # (N,) int64 pump levels 2..9
    rewards: np.ndarray      # (N,) raw physiological rewards
    next_states: np.ndarray  # (N, 6, 12)
    dones: np.ndarray        # (N,) bool
    traj_ids: np.ndarray     # (N,) int64
    ts: np.ndarray           # (N,) int64 step index within trajectory
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        n = len(self.actions)
        if self.states.shape != (n, *WINDOW_SHAPE) or self.next_states.shape != (n, *WINDOW_SHAPE):
            raise InvalidInputError("state arrays must have shape (N, 6, 12)")
        for name in ("rewards", "dones", "traj_ids", "ts"):
            if len(getattr(self, name)) != n:
                raise InvalidInputError(f"column {name} length mismatch")

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def stats(self) -> NormalizationStats:
        return NormalizationStats.from_dict(self.meta["normalization"])

    def iter_trajectories(self) -> Iterator[tuple[int, np.ndarray]]:
        """Yield (traj_id, row indices sorted by t) per trajectory."""
        order = np.lexsort((self.ts, self.traj_ids))
        boundaries = np.flatnonzero(np.diff(self.traj_ids[order])) + 1
        for chunk in np.split(order, boundaries):
            yield int(self.traj_ids[chunk[0]]), chunk

    def validate_grouping(self) -> None:
        """Require every trajectory to be a gapless 0..k run of step indices."""
        for traj_id, idx in self.iter_trajectories():
            t = self.ts[idx]
            if not np.array_equal(t, np.arange(len(t))):
                raise InvalidInputError(
                    f"trajectory {traj_id} has non-contiguous step indices"
                )

    def subset(self, indices: np.ndarray) -> "Dataset":
        return Dataset(
            states=self.states[indices].copy(),
            actions=self.actions[indices].copy(),
            rewards=self.rewards[indices].copy(),
            next_states=self.next_states[indices].copy(),
            dones=self.dones[indices].copy(),
            traj_ids=self.traj_ids[indices].copy(),
            ts=self.ts[indices].copy(),
            meta=dict(self.meta),
        )


def compute_stats(
    states: np.ndarray,
    actions: np.ndarray,
    rewards: np.ndarray,
    next_states: np.ndarray,
    dones: np.ndarray,
) -> NormalizationStats:
    """Statistics over every distinct observed window (episode-final windows
    enter through their done-flagged next_state)."""
    windows = np.concatenate([states, next_states[np.asarray(dones, dtype=bool)]], axis=0)
    rows = windows.reshape(-1, N_FEATURES)
    return NormalizationStats(
        feature_mean=rows.mean(axis=0),
        feature_std=rows.std(axis=0),
        action_mean=float(np.mean(actions)),
        action_std=float(np.std(actions)),
        reward_mean=float(np.mean(rewards)),
        reward_std=float(np.std(rewards)),
    )


def meta_path_for(path: Path | str) -> Path:
    return Path(str(path) + ".meta.json")


def save_dataset(dataset: Dataset, path: Path | str) -> None:
    """Write one transition per line plus a sidecar metadata JSON."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for i in range(len(dataset)):
            record = {
                "state": dataset.states[i].tolist(),
                "action": int(dataset.actions[i]),
                "reward": float(dataset.rewards[i]),
                "next_state": dataset.next_states[i].tolist(),
                "done": bool(dataset.dones[i]),
                "traj_id": int(dataset.traj_ids[i]),
                "t": int(dataset.ts[i]),
            }
            fh.write(json.dumps(record, separators=(",", ":")) + "\n")
    with meta_path_for(path).open("w", encoding="utf-8") as fh:
        json.dump(dataset.meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset(path: Path | str) -> Dataset:
    path = Path(path)
    states, actions, rewards, next_states, dones, traj_ids, ts = [], [], [], [], [], [], []
    with path.open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            states.append(rec["state"])
            actions.append(rec["action"])
            rewards.append(rec["reward"])
            next_states.append(rec["next_state"])
            dones.append(rec["done"])
            traj_ids.append(rec["traj_id"])
            ts.append(rec["t"])
    meta_file = meta_path_for(path)
    meta = json.loads(meta_file.read_text(encoding="utf-8")) if meta_file.exists() else {}
    return Dataset(
        states=np.asarray(states, dtype=np.float64),
        actions=np.asarray(actions, dtype=np.int64),
        rewards=np.asarray(rewards, dtype=np.float64),
        next_states=np.asarray(next_states, dtype=np.float64),
        dones=np.asarray(dones, dtype=bool),
        traj_ids=np.asarray(traj_ids, dtype=np.int64),
        ts=np.asarray(ts, dtype=np.int64),
        meta=meta,
    )
