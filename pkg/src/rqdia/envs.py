"""Small deterministic pixel environments.

``point_reach`` is a continuous 2-D reacher: move a bright disc onto a gray
goal disc. ``catch`` is a falling-ball game on a coarse grid with a 3-cell
paddle and three discrete actions (left, stay, right).

Both render square grayscale frames, repeat each action ``action_repeat``
times with summed reward and return a uint8 stack of the last
``frame_stack`` frames shaped ``(frame_stack, H, W)``.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

KINDS = ("point_reach", "catch")

AGENT_LEVEL = 1.0
GOAL_LEVEL = 0.5
BALL_LEVEL = 1.0
PADDLE_LEVEL = 0.6
DISC_RADIUS = 2.0

MOVE_SCALE = 0.05
REACH_RADIUS = 0.05
REACH_BONUS = 1.0

LEFT, STAY, RIGHT = 0, 1, 2


class EpisodeDone(RuntimeError):
    pass


@dataclass
class EnvSpec:
    kind: str = "point_reach"
    frame_size: int = 32
    action_repeat: int = 4
    frame_stack: int = 3
    max_episode_steps: int = 25
    seed: int = 0
    grid: int = 12  # catch only

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown env kind {self.kind!r}; expected one of {KINDS}")
        if self.frame_size < 16:
            raise ValueError(f"frame_size must be >= 16, got {self.frame_size}")
        if self.action_repeat < 1 or self.frame_stack < 1 or self.max_episode_steps < 1:
            raise ValueError("action_repeat, frame_stack and max_episode_steps must be >= 1")
        if self.kind == "catch" and not 4 <= self.grid <= self.frame_size:
            raise ValueError(f"catch grid must be in [4, frame_size], got {self.grid}")

    @property
    def discrete(self) -> bool:
        return self.kind == "catch"

    @property
    def obs_shape(self) -> tuple[int, int, int]:
        return (self.frame_stack, self.frame_size, self.frame_size)

    @property
    def action_dim(self) -> int:
        """Continuous action dimension, or number of discrete actions."""
        return 3 if self.discrete else 2


@dataclass
class PointState:
    agent_pos: np.ndarray
    goal_pos: np.ndarray
    steps: int = 0


@dataclass
class CatchState:
    paddle_x: int
    ball_x: int
    ball_y: int
    steps: int = 0


def to_uint8(frame: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8)


def _disc(img: np.ndarray, center_xy: np.ndarray, level: float) -> None:
    size = img.shape[0]
    cx, cy = center_xy * (size - 1)
    rows, cols = np.ogrid[:size, :size]
    img[(rows - cy) ** 2 + (cols - cx) ** 2 <= DISC_RADIUS ** 2] = level


def render_point(state: PointState, frame_size: int) -> np.ndarray:
    img = np.zeros((frame_size, frame_size), dtype=np.float32)
    _disc(img, state.goal_pos, GOAL_LEVEL)
    # agent drawn last so it stays visible on top of the goal
    _disc(img, state.agent_pos, AGENT_LEVEL)
    return img


def render_catch(state: CatchState, frame_size: int, grid: int) -> np.ndarray:
    img = np.zeros((frame_size, frame_size), dtype=np.float32)
    cell = frame_size // grid
    off = (frame_size - cell * grid) // 2

    def fill(row, col, level):
        r0, c0 = off + row * cell, off + col * cell
        img[r0:r0 + cell, c0:c0 + cell] = level

    for col in range(state.paddle_x - 1, state.paddle_x + 2):
        fill(grid - 1, col, PADDLE_LEVEL)
    fill(state.ball_y, state.ball_x, BALL_LEVEL)
    return img


def render(state, frame_size: int, grid: int = 12) -> np.ndarray:
    """Grayscale frame in [0, 1]; a pure function of ``state``."""
    if isinstance(state, PointState):
        return render_point(state, frame_size)
    return render_catch(state, frame_size, grid)


class PixelEnv:
    """Frame-stacked, action-repeated wrapper around one of the toy dynamics."""

    def __init__(self, spec: EnvSpec, rng: np.random.Generator | None = None):
        self.spec = spec
        self.rng = rng if rng is not None else np.random.default_rng(spec.seed)
        self.state = None
        self.frames: deque[np.ndarray] = deque(maxlen=spec.frame_stack)
        self.done = True
        self.truncated = False

    # -- dynamics ---------------------------------------------------------

    def _initial_state(self):
        if self.spec.kind == "point_reach":
            agent = self.rng.uniform(0.1, 0.9, size=2)
            goal = self.rng.uniform(0.1, 0.9, size=2)
            # start clear of the goal so every episode needs at least one move
            while np.linalg.norm(agent - goal) < 4 * REACH_RADIUS:
                goal = self.rng.uniform(0.1, 0.9, size=2)
            return PointState(agent, goal)
        g = self.spec.grid
        return CatchState(paddle_x=int(self.rng.integers(1, g - 1)), ball_x=int(self.rng.integers(0, g)), ball_y=0)

    def _repeat_point(self, action: np.ndarray) -> tuple[float, bool]:
        s = self.state
        s.agent_pos = np.clip(s.agent_pos + MOVE_SCALE * action, 0.0, 1.0)
        dist = float(np.linalg.norm(s.agent_pos - s.goal_pos))
        if dist < REACH_RADIUS:
            return -dist + REACH_BONUS, True
        return -dist, False

    def _repeat_catch(self, action: int) -> tuple[float, bool]:
        s, g = self.state, self.spec.grid
        s.paddle_x = int(np.clip(s.paddle_x + (action - 1), 1, g - 2))
        s.ball_y += 1
        if s.ball_y == g - 1:
            return (1.0 if abs(s.ball_x - s.paddle_x) <= 1 else -1.0), True
        return 0.0, False

    # -- public API -------------------------------------------------------

    def render(self) -> np.ndarray:
        return render(self.state, self.spec.frame_size, self.spec.grid)

    def observation(self) -> np.ndarray:
        return np.stack(self.frames)

    def reset(self) -> np.ndarray:
        self.state = self._initial_state()
        self.done = False
        self.truncated = False
        first = to_uint8(self.render())
        for _ in range(self.spec.frame_stack):
            self.frames.append(first)
        return self.observation()

    def step(self, action) -> tuple[np.ndarray, float, bool]:
        if self.done:
            raise EpisodeDone("step() called on a finished episode; call reset()")
        if self.spec.discrete:
            action = int(action)
            if action not in (LEFT, STAY, RIGHT):
                raise ValueError(f"catch action must be 0, 1 or 2, got {action}")
            repeat = self._repeat_catch
        else:
            action = np.clip(np.asarray(action, dtype=np.float64).reshape(2), -1.0, 1.0)
            repeat = self._repeat_point
        total, terminal = 0.0, False
        for _ in range(self.spec.action_repeat):
            r, terminal = repeat(action)
            total += r
            if terminal:
                break
        self.state.steps += 1
        self.truncated = not terminal and self.state.steps >= self.spec.max_episode_steps
        self.done = terminal or self.truncated
        self.frames.append(to_uint8(self.render()))
        return self.observation(), total, self.done


def make_env(spec: EnvSpec, seed: int | None = None) -> PixelEnv:
    return PixelEnv(spec, np.random.default_rng(spec.seed if seed is None else seed))


def random_action(spec: EnvSpec, rng: np.random.Generator):
    if spec.discrete:
        return int(rng.integers(0, 3))
    return rng.uniform(-1.0, 1.0, size=2).astype(np.float32)


def write_pgm(path, frame: np.ndarray) -> None:
    """Binary (P5) portable graymap of one uint8 or [0, 1] frame."""
    img = frame if frame.dtype == np.uint8 else to_uint8(frame)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(img).tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)
