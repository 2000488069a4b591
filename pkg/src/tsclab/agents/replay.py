"""Proportional prioritized replay backed by a sum-tree."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class SumTree:
    """Binary tree of non-negative masses with O(log n) update and prefix search."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        size = 1
        while size < capacity:
            size *= 2
        self.size = size
        self.tree = np.zeros(2 * size)

    @property
    def total(self) -> float:
        return float(self.tree[1])

    def get(self, i: int) -> float:
        return float(self.tree[self.size + i])

    def set(self, i: int, mass: float) -> None:
        if mass < 0 or not np.isfinite(mass):
            raise ValueError(f"invalid mass {mass}")
        j = self.size + i
        self.tree[j] = mass
        j //= 2
        while j >= 1:
            self.tree[j] = self.tree[2 * j] + self.tree[2 * j + 1]
            j //= 2

    def find(self, u: float) -> int:
        """Leaf index whose cumulative mass interval contains ``u`` in [0, total)."""
        j = 1
        while j < self.size:
            left = self.tree[2 * j]
            if u < left:
                j = 2 * j
            else:
                u -= left
                j = 2 * j + 1
        i = j - self.size
        # guard against float round-off landing on an empty leaf
        while i > 0 and self.tree[self.size + i] == 0.0:
            i -= 1
        return i


@dataclass
class Batch:
    idx: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray
    weights: np.ndarray
    extras: dict


class PrioritizedReplayBuffer:
    """Ring buffer; item i is drawn with probability p_i^alpha / sum_j p_j^alpha.

    ``extras`` stores optional per-transition arrays (e.g. cached safety flags).
    """

    def __init__(self, capacity: int, state_len: int, alpha: float = 0.6, eps: float = 1e-3,
                 extras: dict | None = None):
        self.capacity = capacity
        self.alpha = alpha
        self.eps = eps
        self.tree = SumTree(capacity)
        self.states = np.zeros((capacity, state_len))
        self.next_states = np.zeros((capacity, state_len))
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.terminals = np.zeros(capacity, dtype=bool)
        self.extras = {k: np.zeros((capacity,) + tuple(shape), dtype=dt)
                       for k, (shape, dt) in (extras or {}).items()}
        self.pos = 0
        self.count = 0
        self.max_priority = 1.0

    def __len__(self):
        return self.count

    def add(self, state, action, reward, next_state, terminal, priority: float | None = None,
            **extras) -> int:
        i = self.pos
        self.states[i] = state
        self.next_states[i] = next_state
        self.actions[i] = action
        self.rewards[i] = reward
        self.terminals[i] = terminal
        for k, v in extras.items():
            self.extras[k][i] = v
        p = self.max_priority if priority is None else float(priority)
        if p <= 0:
            raise ValueError("priority must be positive")
        self.max_priority = max(self.max_priority, p)
        self.tree.set(i, p ** self.alpha)
        self.pos = (i + 1) % self.capacity
        self.count = min(self.count + 1, self.capacity)
        return i

    def probabilities(self) -> np.ndarray:
        masses = self.tree.tree[self.tree.size:self.tree.size + self.count]
        return masses / self.tree.total

    def sample_indices(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Stratified proportional draws (one uniform per equal-mass segment)."""
        total = self.tree.total
        seg = total / n
        u = (np.arange(n) + rng.random(n)) * seg
        return np.array([self.tree.find(min(x, np.nextafter(total, 0))) for x in u], dtype=np.int64)

    def sample(self, n: int, beta: float, rng: np.random.Generator) -> Batch:
        if self.count < n:
            raise ValueError(f"buffer holds {self.count} < {n} transitions")
        idx = self.sample_indices(n, rng)
        probs = np.array([self.tree.get(i) for i in idx]) / self.tree.total
        w = (self.count * probs) ** (-beta)
        w /= w.max()
        return Batch(idx, self.states[idx], self.actions[idx], self.rewards[idx],
                     self.next_states[idx], self.terminals[idx], w,
                     {k: v[idx] for k, v in self.extras.items()})

    def update_priorities(self, idx, td_errors) -> None:
        for i, e in zip(idx, td_errors):
            p = abs(float(e)) + self.eps
            self.max_priority = max(self.max_priority, p)
            self.tree.set(int(i), p ** self.alpha)
