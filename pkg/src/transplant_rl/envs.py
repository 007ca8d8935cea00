"""Three 10x10 grid games sharing one observation/action spec, and frame stacking.

corridor: reach a static goal while avoiding one hazard (simplest).
chase:    collect a goal that keeps relocating, avoid two hazards (same genre, harder).
river:    dodge hazard rows that scroll down through the bottom band (different genre).
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

GRID = 10
N_ACTIONS = 5
MAX_EPISODE_STEPS = 200
HISTORY_LEN = 4

AGENT, GOAL, HAZARD, EMPTY = 1.0, 0.66, 0.33, 0.0

# noop, up, down, left, right as (row, col) deltas
MOVES = ((0, 0), (-1, 0), (1, 0), (0, -1), (0, 1))


@dataclass(frozen=True)
class EnvSpec:
    obs_shape: tuple[int, int, int] = (GRID, GRID, 1)
    n_actions: int = N_ACTIONS
    max_episode_steps: int = MAX_EPISODE_STEPS


@dataclass
class StepResult:
    frame: np.ndarray
    reward: float
    terminal: bool


class EpisodeOver(RuntimeError):
    """step() called on a finished episode."""


class GridEnv:
    name = "grid"
    spec = EnvSpec()

    def __init__(self):
        self.rng: np.random.Generator | None = None
        self.steps = 0
        self.done = True
        self.agent = (0, 0)

    def reset(self, seed: int) -> np.ndarray:
        self.rng = np.random.default_rng(seed)
        self.steps = 0
        self.done = False
        self._reset_layout()
        return self.render()

    def step(self, action: int) -> StepResult:
        if self.done:
            raise EpisodeOver(f"{self.name}: episode finished; call reset()")
        if not 0 <= int(action) < N_ACTIONS:
            raise ValueError(f"action must be in [0, {N_ACTIONS}), got {action}")
        self.steps += 1
        reward, terminal = self._transition(int(action))
        if not terminal and self.steps >= self.spec.max_episode_steps:
            reward, terminal = 0.0, True
        self.done = terminal
        return StepResult(self.render(), float(reward), terminal)

    def _move(self, action, rows=(0, GRID - 1)):
        dr, dc = MOVES[action]
        r = min(max(self.agent[0] + dr, rows[0]), rows[1])
        c = min(max(self.agent[1] + dc, 0), GRID - 1)
        self.agent = (r, c)

    def _cells(self):
        """Yield (row, col, value) for everything but the agent."""
        return ()

    def render(self) -> np.ndarray:
        frame = np.zeros((GRID, GRID, 1), dtype=np.float32)
        for r, c, v in self._cells():
            frame[r, c, 0] = v
        frame[self.agent[0], self.agent[1], 0] = AGENT
        return frame

    def _reset_layout(self):
        raise NotImplementedError

    def _transition(self, action):
        raise NotImplementedError


class Corridor(GridEnv):
    """A four-row corridor: start at the left end, goal at the right end, one hazard in between."""

    name = "corridor"
    band = (3, 6)

    def _reset_layout(self):
        rng = self.rng
        lo, hi = self.band
        self.agent = (int(rng.integers(lo, hi + 1)), 0)
        self.goal = (int(rng.integers(lo, hi + 1)), GRID - 1)
        self.hazard = (int(rng.integers(lo, hi + 1)), int(rng.integers(3, GRID - 3)))

    def _cells(self):
        return ((*self.goal, GOAL), (*self.hazard, HAZARD))

    def _transition(self, action):
        self._move(action, rows=self.band)
        if self.agent == self.hazard:
            return -1.0, True
        if self.agent == self.goal:
            return 1.0, True
        return 0.0, False


class Chase(GridEnv):
    name = "chase"
    relocate_every = 20

    def _free_cell(self, taken):
        while True:
            cell = (int(self.rng.integers(GRID)), int(self.rng.integers(GRID)))
            if cell not in taken:
                return cell

    def _reset_layout(self):
        self.agent = self._free_cell(())
        self.hazards = []
        for _ in range(2):
            self.hazards.append(self._free_cell([self.agent, *self.hazards]))
        self.goal = self._free_cell([self.agent, *self.hazards])

    def _cells(self):
        return ((*self.goal, GOAL), *((r, c, HAZARD) for r, c in self.hazards))

    def _transition(self, action):
        self._move(action)
        if self.agent in self.hazards:
            return -1.0, True
        reward = 0.0
        if self.agent == self.goal:
            reward = 1.0
            self.goal = self._free_cell([self.agent, *self.hazards])
        elif self.steps % self.relocate_every == 0:
            self.goal = self._free_cell([self.agent, *self.hazards])
        return reward, False


class River(GridEnv):
    """Hazard rows with a 3-cell gap scroll down one row every 2 steps.

    The agent lives in the bottom three rows; a new hazard row enters at the top
    every 4 scrolls, its gap a short random walk away from the previous gap.
    """

    name = "river"
    scroll_every = 2
    row_spacing = 4
    gap_width = 3
    survive_reward = 0.05
    band = (GRID - 3, GRID - 1)

    def _new_row(self):
        self.gap = int(np.clip(self.gap + self.rng.integers(-2, 3), 0, GRID - self.gap_width))
        return [0, self.gap]

    def _reset_layout(self):
        self.agent = (GRID - 1, int(self.rng.integers(GRID)))
        self.gap = int(self.rng.integers(GRID - self.gap_width + 1))
        self.rows = [self._new_row()]  # [row index, gap start]
        self.scrolls = 0

    def _hazard_cells(self):
        for r, g in self.rows:
            for c in range(GRID):
                if not g <= c < g + self.gap_width:
                    yield r, c

    def _cells(self):
        return ((r, c, HAZARD) for r, c in self._hazard_cells())

    def _hit(self):
        return any(
            r == self.agent[0] and not g <= self.agent[1] < g + self.gap_width for r, g in self.rows
        )

    def _transition(self, action):
        self._move(action, rows=self.band)
        if self._hit():
            return -1.0, True
        if self.steps % self.scroll_every == 0:
            self.scrolls += 1
            self.rows = [[r + 1, g] for r, g in self.rows if r + 1 < GRID]
            if self.scrolls % self.row_spacing == 0:
                self.rows.append(self._new_row())
            if self._hit():
                return -1.0, True
        return self.survive_reward, False


ENVIRONMENTS = {cls.name: cls for cls in (Corridor, Chase, River)}


def make_env(name: str) -> GridEnv:
    try:
        return ENVIRONMENTS[name]()
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}") from None


class FrameStack:
    """The last ``HISTORY_LEN`` frames, oldest first, stacked on the channel axis."""

    def __init__(self, history_len: int = HISTORY_LEN):
        self.frames: deque = deque(maxlen=history_len)

    def reset(self, frame) -> np.ndarray:
        for _ in range(self.frames.maxlen):
            self.frames.append(frame)
        return self.observation()

    def push(self, frame) -> np.ndarray:
        if not self.frames:
            return self.reset(frame)
        self.frames.append(frame)
        return self.observation()

    def observation(self) -> np.ndarray:
        return np.concatenate(list(self.frames), axis=-1)
