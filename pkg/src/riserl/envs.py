"""Pixel environments with controllable memory demands, framestacking and a
synchronous vectorized runner.

Frames are rendered from a uint8 palette and returned as float32 in [0, 1],
so storing them back as uint8 is lossless.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from typing import IO

import numpy as np

from .errors import ConfigError, UsageError

BLACK, DARK, GRAY, LIGHT, WHITE = 0, 64, 128, 192, 255


class EnvKind(str, enum.Enum):
    TMAZE = "tmaze"
    CATCH = "catch"
    FLICKER_CATCH = "flicker_catch"


@dataclass
class EnvSpec:
    kind: EnvKind = EnvKind.TMAZE
    corridor_length: int = 6
    cue_steps: int = 1
    grid: int = 8
    blank_prob: float = 0.0
    obs_size: int = 24
    step_cap: int | None = None
    seed: int = 0

    def __post_init__(self):
        self.kind = EnvKind(self.kind)
        if self.corridor_length < 1:
            raise ConfigError("corridor_length must be >= 1")
        if self.cue_steps < 1:
            raise ConfigError("cue_steps must be >= 1")
        if not 0.0 <= self.blank_prob < 1.0:
            raise ConfigError("blank_prob must lie in [0, 1)")
        if self.grid < 3:
            raise ConfigError("grid must be >= 3")
        if self.step_cap is not None and self.step_cap < 1:
            raise ConfigError("step_cap must be positive")
        if self.kind is EnvKind.TMAZE and self.obs_size < self.corridor_length + 1:
            raise ConfigError("obs_size too small for the corridor")
        if self.kind is not EnvKind.TMAZE and self.obs_size < self.grid:
            raise ConfigError("obs_size smaller than the catch grid")

    @property
    def num_actions(self) -> int:
        return 3

    @property
    def max_steps(self) -> int:
        if self.step_cap is not None:
            return self.step_cap
        if self.kind is EnvKind.TMAZE:
            return 2 * (self.corridor_length + 1)
        return self.grid - 1


@dataclass
class StepResult:
    obs: np.ndarray
    reward: float
    terminal: bool
    truncated: bool
    info: dict

    @property
    def done(self) -> bool:
        return self.terminal or self.truncated


def _paint(size: int, rows: int, cols: int, cells: dict[tuple[int, int], int]) -> np.ndarray:
    """Render a rows x cols cell grid into a size x size uint8 frame, top-left aligned."""
    cell = size // max(rows, cols)
    img = np.zeros((size, size), dtype=np.uint8)
    for (r, c), v in cells.items():
        img[r * cell:(r + 1) * cell, c * cell:(c + 1) * cell] = v
    return img


class Env:
    spec: EnvSpec

    def __init__(self, spec: EnvSpec, seed: int | None = None):
        self.spec = spec
        self.rng = np.random.default_rng(spec.seed if seed is None else seed)
        self.t = 0
        self._needs_reset = True
        self.trace: IO[str] | None = None

    def _emit(self, img: np.ndarray) -> np.ndarray:
        return (img.astype(np.float32) / np.float32(255.0))[None]

    def reset(self) -> np.ndarray:
        self.t = 0
        self._needs_reset = False
        self._reset()
        return self._emit(self._render())

    def step(self, action: int) -> StepResult:
        if self._needs_reset:
            raise UsageError("step() after episode end; call reset() first")
        action = int(action)
        if not 0 <= action < self.spec.num_actions:
            raise UsageError(f"action {action} outside [0, {self.spec.num_actions})")
        reward, terminal, info = self._step(action)
        self.t += 1
        truncated = not terminal and self.t >= self.spec.max_steps
        self._needs_reset = terminal or truncated
        if self.trace is not None:
            self.trace.write(json.dumps({"step": self.t, "action": action, "reward": reward,
                                         "terminal": terminal}) + "\n")
        return StepResult(self._emit(self._render()), float(reward), terminal, truncated, info)

    def _reset(self) -> None:
        raise NotImplementedError

    def _step(self, action: int) -> tuple[float, bool, dict]:
        raise NotImplementedError

    def _render(self) -> np.ndarray:
        raise NotImplementedError


class TMaze(Env):
    """Corridor with a cue shown only at the start; the turn at the end must match it.

    Actions: 0 forward, 1 up, 2 down. Row 1 is the corridor, the junction is
    column ``L``. The cue lights the top-left (up) or bottom-left (down) cell.
    """

    FORWARD, UP, DOWN = 0, 1, 2

    def _reset(self):
        self.pos = 0
        self.cue = int(self.rng.integers(2))  # 0 up, 1 down

    def _step(self, action):
        L = self.spec.corridor_length
        if self.pos < L:
            if action == self.FORWARD:
                self.pos += 1
            return 0.0, False, {}
        if action == self.FORWARD:
            return 0.0, False, {}
        correct = (action == self.UP) == (self.cue == 0)
        return (1.0 if correct else -1.0), True, {"junction": True, "success": correct}

    def _render(self):
        L = self.spec.corridor_length
        cells: dict[tuple[int, int], int] = {}
        for c in range(1, L):
            cells[(0, c)] = GRAY
            cells[(2, c)] = GRAY
        cells[(0, L)] = DARK
        cells[(2, L)] = DARK
        if self.t < self.spec.cue_steps:
            cells[(0, 0) if self.cue == 0 else (2, 0)] = LIGHT
        cells[(1, self.pos)] = WHITE
        return _paint(self.spec.obs_size, 3, L + 1, cells)

    def cue_region(self, frame: np.ndarray) -> np.ndarray:
        cell = self.spec.obs_size // max(3, self.spec.corridor_length + 1)
        f = frame.reshape(self.spec.obs_size, self.spec.obs_size)
        return np.concatenate([f[0:cell, 0:cell].ravel(), f[2 * cell:3 * cell, 0:cell].ravel()])


class Catch(Env):
    """Ball drops one row per step; the paddle must be under it on the last row.

    Actions: 0 left, 1 stay, 2 right.
    """

    def _reset(self):
        g = self.spec.grid
        self.ball_col = int(self.rng.integers(g))
        self.ball_row = 0
        self.paddle = g // 2

    def _step(self, action):
        g = self.spec.grid
        self.paddle = int(np.clip(self.paddle + action - 1, 0, g - 1))
        self.ball_row += 1
        if self.ball_row == g - 1:
            caught = self.paddle == self.ball_col
            return (1.0 if caught else -1.0), True, {"success": caught}
        return 0.0, False, {}

    def _render(self):
        g = self.spec.grid
        cells = {(self.ball_row, self.ball_col): WHITE}
        if self.ball_row != g - 1 or self.ball_col != self.paddle:
            cells[(g - 1, self.paddle)] = LIGHT
        return _paint(self.spec.obs_size, g, g, cells)


class FlickerCatch(Catch):
    """Catch whose frames are blanked with probability ``blank_prob``."""

    def _render(self):
        img = super()._render()
        if self.rng.random() < self.spec.blank_prob:
            return np.zeros_like(img)
        return img


def make_env(spec: EnvSpec, seed: int | None = None) -> Env:
    cls = {EnvKind.TMAZE: TMaze, EnvKind.CATCH: Catch, EnvKind.FLICKER_CATCH: FlickerCatch}[spec.kind]
    return cls(spec, seed)


class FrameStack:
    """Keeps the last ``depth`` frames, zero-filled at episode start."""

    def __init__(self, depth: int, hw: tuple[int, int]):
        self.depth = depth
        self.frames = np.zeros((depth, *hw), dtype=np.float32)

    def reset(self, frame: np.ndarray) -> np.ndarray:
        self.frames[:] = 0.0
        return self.push(frame)

    def push(self, frame: np.ndarray) -> np.ndarray:
        self.frames[:-1] = self.frames[1:]
        self.frames[-1] = frame.reshape(self.frames.shape[1:])
        return self.frames.copy()


class VecRunner:
    """N independent envs stepped in index order; finished envs auto-reset.

    ``step`` returns the raw per-env results plus the observation each env
    will act on next (a fresh reset frame for envs that just finished).
    """

    def __init__(self, spec: EnvSpec, num_envs: int, framestack: int, seed: int = 0):
        if num_envs < 1:
            raise ConfigError("num_envs must be >= 1")
        self.spec = spec
        self.num_envs = num_envs
        seeds = np.random.SeedSequence(seed).spawn(num_envs)
        self.envs = [make_env(spec, int(s.generate_state(1)[0])) for s in seeds]
        hw = (spec.obs_size, spec.obs_size)
        self.stacks = [FrameStack(framestack, hw) for _ in range(num_envs)]
        self.obs: list[np.ndarray] = []
        self.stacked: np.ndarray | None = None
        self.episode_start = np.ones(num_envs, dtype=bool)

    def reset(self) -> np.ndarray:
        self.obs = [env.reset() for env in self.envs]
        self.stacked = np.stack([st.reset(o) for st, o in zip(self.stacks, self.obs)])
        self.episode_start[:] = True
        return self.stacked

    def current_frames(self) -> np.ndarray:
        return np.stack([o[0] for o in self.obs])

    def step(self, actions) -> list[StepResult]:
        actions = np.asarray(actions)
        if actions.shape != (self.num_envs,):
            raise UsageError(f"expected {self.num_envs} actions, got shape {actions.shape}")
        results = []
        for i, (env, a) in enumerate(zip(self.envs, actions)):
            res = env.step(int(a))
            results.append(res)
            if res.done:
                self.obs[i] = env.reset()
                self.stacked[i] = self.stacks[i].reset(self.obs[i])
                self.episode_start[i] = True
            else:
                self.obs[i] = res.obs
                self.stacked[i] = self.stacks[i].push(res.obs)
                self.episode_start[i] = False
        return results
