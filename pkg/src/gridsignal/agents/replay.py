from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    done: bool


@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray

    def __len__(self) -> int:
        return len(self.rewards)

    @classmethod
    def of(cls, transitions) -> "Batch":
        return cls(
            np.stack([t.state for t in transitions]).astype(np.float64),
            np.stack([np.asarray(t.action) for t in transitions]).astype(np.int64),
            np.array([t.reward for t in transitions], dtype=np.float64),
            np.stack([t.next_state for t in transitions]).astype(np.float64),
            np.array([t.done for t in transitions], dtype=bool),
        )


class ReplayBuffer:
    """Fixed-capacity ring; once full, each push overwrites the oldest record."""

    def __init__(self, capacity: int = 2000):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.size = 0
        self.head = 0  # next write slot
        self._s = self._a = self._r = self._s2 = self._d = None

    def __len__(self) -> int:
        return self.size

    def _alloc(self, t: Transition) -> None:
        c = self.capacity
        self._s = np.zeros((c,) + np.shape(t.state))
        self._s2 = np.zeros((c,) + np.shape(t.next_state))
        self._a = np.zeros((c,) + np.shape(t.action), dtype=np.int64)
        self._r = np.zeros(c)
        self._d = np.zeros(c, dtype=bool)

    def push(self, t: Transition) -> None:
        if not np.isfinite(t.reward):
            raise ValueError("reward must be finite")
        if np.shape(t.state) != np.shape(t.next_state):
            raise ValueError("state and next_state differ in shape")
        if self._s is None:
            self._alloc(t)
        k = self.head
        self._s[k] = t.state
        self._a[k] = t.action
        self._r[k] = t.reward
        self._s2[k] = t.next_state
        self._d[k] = t.done
        self.head = (k + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def __getitem__(self, i: int) -> Transition:
        """``i``-th stored record, oldest first."""
        if not -self.size <= i < self.size:
            raise IndexError(i)
        i %= self.size
        k = (self.head - self.size + i) % self.capacity
        return Transition(self._s[k].copy(), self._a[k].copy(), float(self._r[k]),
                          self._s2[k].copy(), bool(self._d[k]))

    def sample(self, batch: int, rng: np.random.Generator) -> Batch:
        """Uniform sample without replacement."""
        if batch > self.size:
            raise ValueError(f"cannot sample {batch} from {self.size} records")
        idx = rng.choice(self.size, size=batch, replace=False)
        k = (self.head - self.size + idx) % self.capacity
        return Batch(self._s[k], self._a[k], self._r[k], self._s2[k], self._d[k])
