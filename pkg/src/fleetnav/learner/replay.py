"""Uniform FIFO replay over fixed-width transitions.

One writer thread and one sampling thread may share a buffer; pushes are
atomic per trajectory, so a sampler never sees part of one.
"""

from __future__ import annotations

import threading

import numpy as np

from ..errors import EmptyBuffer, InvalidArgument, ParseError
from .rewards import Trajectory

SPILL_FORMAT_VERSION = 1


class ReplayBuffer:
    def __init__(self, obs_width: int, action_dim: int = 2, capacity: int = 1_000_000):
        if capacity < 1:
            raise InvalidArgument("capacity must be >= 1")
        self.capacity = int(capacity)
        self.obs = np.zeros((capacity, obs_width), dtype=np.float32)
        self.actions = np.zeros((capacity, action_dim), dtype=np.float32)
        self.rewards = np.zeros(capacity, dtype=np.float32)
        self.next_obs = np.zeros((capacity, obs_width), dtype=np.float32)
        self.done = np.zeros(capacity, dtype=np.float32)  # 1 on transitions into terminal
        self.size = 0
        self.head = 0  # next write slot; FIFO eviction once full
        self.total_pushed = 0
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return self.size

    def push(self, traj: Trajectory) -> int:
        """Append the trajectory's transitions; returns how many were added."""
        n = len(traj) - 1
        if n < 1:
            return 0
        with self._lock:
            for i in range(n):
                j = self.head
                self.obs[j] = traj.observations[i]
                self.actions[j] = traj.actions[i]
                self.rewards[j] = traj.rewards[i + 1]
                self.next_obs[j] = traj.observations[i + 1]
                self.done[j] = 1.0 if traj.discounts[i + 1] == 0.0 else 0.0
                self.head = (self.head + 1) % self.capacity
                self.size = min(self.size + 1, self.capacity)
            self.total_pushed += n
        return n

    def sample(self, batch: int, rng: np.random.Generator) -> dict:
        """Uniform with replacement; deterministic under a seeded rng."""
        with self._lock:
            if self.size == 0:
                raise EmptyBuffer("replay buffer is empty")
            idx = rng.integers(0, self.size, size=batch)
            return {
                "obs": self.obs[idx].copy(),
                "actions": self.actions[idx].copy(),
                "rewards": self.rewards[idx].copy(),
                "next_obs": self.next_obs[idx].copy(),
                "done": self.done[idx].copy(),
            }

    def save(self, path) -> None:
        with self._lock:
            np.savez_compressed(
                path,
                format_version=SPILL_FORMAT_VERSION,
                obs=self.obs[: self.size],
                actions=self.actions[: self.size],
                rewards=self.rewards[: self.size],
                next_obs=self.next_obs[: self.size],
                done=self.done[: self.size],
                capacity=self.capacity,
                total_pushed=self.total_pushed,
            )

    @classmethod
    def load(cls, path) -> "ReplayBuffer":
        with np.load(path) as data:
            if int(data["format_version"]) != SPILL_FORMAT_VERSION:
                raise ParseError(
                    f"unsupported spill format_version {int(data['format_version'])}")
            obs = data["obs"]
            buf = cls(obs.shape[1], data["actions"].shape[1], int(data["capacity"]))
            n = len(obs)
            buf.obs[:n] = obs
            buf.actions[:n] = data["actions"]
            buf.rewards[:n] = data["rewards"]
            buf.next_obs[:n] = data["next_obs"]
            buf.done[:n] = data["done"]
            buf.size = n
            buf.head = n % buf.capacity
            buf.total_pushed = int(data["total_pushed"])
        return buf
