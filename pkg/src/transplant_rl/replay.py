"""Proportional prioritized replay on an array sum-tree, plus n-step return folding."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np


@dataclass
class Transition:
    obs: np.ndarray
    action: int
    G: float
    next_obs: np.ndarray
    terminal: bool
    n_actual: int


@dataclass
class BufferConfig:
    capacity: int = 50_000
    alpha: float = 0.5
    beta0: float = 0.4
    beta_final: float = 1.0
    priority_epsilon: float = 1e-6

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if not 0.0 < self.beta0 <= 1.0:
            raise ValueError("beta0 must lie in (0, 1]")
        if self.capacity < 1:
            raise ValueError("capacity must be >= 1")

    def beta(self, progress: float) -> float:
        """Linearly annealed importance-sampling exponent; ``progress`` in [0, 1]."""
        progress = min(max(progress, 0.0), 1.0)
        return self.beta0 + (self.beta_final - self.beta0) * progress


class SumTree:
    """Binary tree of partial sums stored heap-style; node 1 is the root, leaves start at ``capacity``."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = 1 << (capacity - 1).bit_length()
        self.nodes = np.zeros(2 * self.capacity, dtype=np.float64)

    @property
    def total(self) -> float:
        return float(self.nodes[1])

    @property
    def leaves(self) -> np.ndarray:
        return self.nodes[self.capacity :]

    def update(self, indices, values) -> None:
        idx = np.atleast_1d(np.asarray(indices, dtype=np.int64))
        values = np.broadcast_to(np.asarray(values, dtype=np.float64), idx.shape)
        if idx.size and (idx.min() < 0 or idx.max() >= self.capacity):
            raise IndexError(f"leaf index out of range [0, {self.capacity})")
        if np.any(values < 0):
            raise ValueError("priorities must be non-negative")
        # duplicates: last write wins, as with sequential assignment
        self.nodes[idx + self.capacity] = values
        node = np.unique((idx + self.capacity) // 2)
        while node.size and node[0] >= 1:
            self.nodes[node] = self.nodes[2 * node] + self.nodes[2 * node + 1]
            node = np.unique(node // 2)

    def find(self, prefix) -> np.ndarray:
        """Leaf indices whose cumulative interval ``[lo, hi)`` contains each prefix value."""
        u = np.atleast_1d(np.asarray(prefix, dtype=np.float64)).copy()
        node = np.ones(u.shape, dtype=np.int64)
        while node[0] < self.capacity:
            left = 2 * node
            left_mass = self.nodes[left]
            right = (u >= left_mass) & (self.nodes[left + 1] > 0)
            u = np.where(right, u - left_mass, u)
            node = np.where(right, left + 1, left)
        return node - self.capacity


class PrioritizedReplay:
    """Ring buffer of n-step transitions sampled in proportion to ``(priority + eps) ** alpha``."""

    def __init__(self, config: BufferConfig, obs_shape):
        self.config = config
        self.tree = SumTree(config.capacity)
        cap = config.capacity
        self.obs = np.zeros((cap, *obs_shape), dtype=np.float32)
        self.next_obs = np.zeros((cap, *obs_shape), dtype=np.float32)
        self.actions = np.zeros(cap, dtype=np.int64)
        self.returns = np.zeros(cap, dtype=np.float64)
        self.terminals = np.zeros(cap, dtype=bool)
        self.n_actual = np.zeros(cap, dtype=np.int64)
        self.size = 0
        self.cursor = 0
        self.max_priority = 1.0

    def __len__(self) -> int:
        return self.size

    def _leaf_value(self, priority):
        return (np.abs(priority) + self.config.priority_epsilon) ** self.config.alpha

    def push(self, t: Transition, initial_priority: float | None = None) -> int:
        i = self.cursor
        self.obs[i] = t.obs
        self.next_obs[i] = t.next_obs
        self.actions[i] = t.action
        self.returns[i] = t.G
        self.terminals[i] = t.terminal
        self.n_actual[i] = t.n_actual
        p = self.max_priority if initial_priority is None else initial_priority
        self.tree.update(i, self._leaf_value(p))
        self.cursor = (i + 1) % self.config.capacity
        self.size = min(self.size + 1, self.config.capacity)
        return i

    def sample(self, batch_size: int, beta: float, rng: np.random.Generator):
        """Stratified proportional sample.

        Returns ``(batch, indices, is_weights)`` where ``batch`` is a dict of
        arrays and the weights are max-normalized to (0, 1].
        """
        if self.size < batch_size:
            raise ValueError(f"cannot sample {batch_size} from a buffer holding {self.size}")
        total = self.tree.total
        bounds = np.linspace(0.0, total, batch_size + 1)
        u = rng.uniform(bounds[:-1], bounds[1:])
        u = np.minimum(u, np.nextafter(total, 0.0))
        idx = self.tree.find(u)
        probs = self.tree.leaves[idx] / total
        weights = (self.size * probs) ** (-beta)
        weights /= weights.max()
        batch = {
            "obs": self.obs[idx],
            "actions": self.actions[idx],
            "returns": self.returns[idx],
            "next_obs": self.next_obs[idx],
            "terminals": self.terminals[idx],
            "n_actual": self.n_actual[idx],
        }
        return batch, idx, weights

    def update_priorities(self, indices, td_errors) -> None:
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= self.size):
            raise IndexError(f"priority index out of range [0, {self.size})")
        td = np.abs(np.asarray(td_errors, dtype=np.float64))
        self.tree.update(idx, self._leaf_value(td))
        if td.size:
            self.max_priority = max(self.max_priority, float(td.max()))


class NStepAccumulator:
    """Folds single-step records into n-step transitions.

    ``push`` returns the transitions that became complete: at most one while
    the episode runs, and every pending one (with shortened ``n_actual``) once
    a terminal step arrives.
    """

    def __init__(self, n_step: int, gamma: float):
        if n_step < 1:
            raise ValueError("n_step must be >= 1")
        self.n_step = n_step
        self.gamma = gamma
        self.pending: deque = deque()

    def _emit(self, next_obs, terminal) -> Transition:
        obs, action, _ = self.pending[0]
        G = 0.0
        for i, (_, _, r) in enumerate(self.pending):
            G += self.gamma**i * r
        t = Transition(obs, action, G, next_obs, terminal, len(self.pending))
        self.pending.popleft()
        return t

    def push(self, obs, action: int, reward: float, next_obs, terminal: bool) -> list[Transition]:
        self.pending.append((obs, action, float(reward)))
        out = []
        if len(self.pending) == self.n_step:
            out.append(self._emit(next_obs, terminal))
        if terminal:
            while self.pending:
                out.append(self._emit(next_obs, True))
        return out

    def reset(self) -> None:
        self.pending.clear()
