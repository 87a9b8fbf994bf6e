"""Procedural gridworld mazes and optimal-policy data collection.

Cells are indexed row-major (``cell = row * width + col``). Moving into a wall
or off the grid leaves the agent where it is. The reward is 1 on the step that
reaches the goal and 0 otherwise.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple, Sequence

import numpy as np

from .data import Episode, TrajectoryDataset, compute_returns_to_go

ACTION_NAMES = ("Up", "Down", "Left", "Right")
# (d_row, d_col) per action name
MOVES = {"Up": (-1, 0), "Down": (1, 0), "Left": (0, -1), "Right": (0, 1)}

MAX_GENERATION_RETRIES = 200


class MazeStyle(str, Enum):
    BLOCKED = "blocked"
    TUNNELED = "tunneled"
    CORRIDOR = "corridor"


class MazeGenerationError(RuntimeError):
    """Raised when no connected layout is found within the retry bound."""


@dataclass(frozen=True, eq=False)
class MazeSpec:
    width: int
    height: int
    walls: np.ndarray  # bool, shape (height, width)
    style: MazeStyle
    seed: int
    actions: tuple[str, ...] = ACTION_NAMES
    density: float = 0.0
    name: str = ""

    def __post_init__(self):
        walls = np.asarray(self.walls, dtype=bool)
        if walls.shape != (self.height, self.width):
            raise ValueError(
                f"walls has shape {walls.shape}, expected {(self.height, self.width)}"
            )
        unknown = set(self.actions) - set(ACTION_NAMES)
        if unknown:
            raise ValueError(f"unknown actions {sorted(unknown)}")
        walls.setflags(write=False)
        object.__setattr__(self, "walls", walls)
        if not self.name:
            object.__setattr__(self, "name", f"{self.style.value}-{self.seed}")

    @property
    def n_cells(self) -> int:
        return self.width * self.height

    @property
    def free_cells(self) -> np.ndarray:
        return np.flatnonzero(~self.walls.ravel())

    def is_free(self, cell: int) -> bool:
        return 0 <= cell < self.n_cells and not self.walls.flat[cell]

    def move(self, cell: int, action: str) -> int:
        """Cell reached from ``cell`` by the named action."""
        dr, dc = MOVES[action]
        r, c = divmod(cell, self.width)
        r2, c2 = r + dr, c + dc
        if not (0 <= r2 < self.height and 0 <= c2 < self.width):
            return cell
        nxt = r2 * self.width + c2
        return cell if self.walls.flat[nxt] else nxt

    def __eq__(self, other):
        if not isinstance(other, MazeSpec):
            return NotImplemented
        return (
            (self.width, self.height, self.style, self.seed, self.actions, self.name)
            == (other.width, other.height, other.style, other.seed, other.actions, other.name)
            and np.array_equal(self.walls, other.walls)
        )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "width": self.width,
            "height": self.height,
            "style": self.style.value,
            "seed": self.seed,
            "density": self.density,
            "actions": list(self.actions),
            "walls": ["".join("#" if w else "." for w in row) for row in self.walls],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MazeSpec":
        walls = np.array([[ch == "#" for ch in row] for row in d["walls"]], dtype=bool)
        return cls(
            width=int(d["width"]),
            height=int(d["height"]),
            walls=walls,
            style=MazeStyle(d["style"]),
            seed=int(d["seed"]),
            actions=tuple(d["actions"]),
            density=float(d.get("density", 0.0)),
            name=d.get("name", ""),
        )


class EnvState(NamedTuple):
    agent: int
    goal: int


class StepOutcome(NamedTuple):
    next: EnvState
    reward: float
    done: bool


def _flood_fill(walls: np.ndarray, start: int) -> np.ndarray:
    h, w = walls.shape
    seen = np.zeros(h * w, dtype=bool)
    seen[start] = True
    queue = deque([start])
    while queue:
        cell = queue.popleft()
        r, c = divmod(cell, w)
        for dr, dc in MOVES.values():
            r2, c2 = r + dr, c + dc
            if 0 <= r2 < h and 0 <= c2 < w:
                nxt = r2 * w + c2
                if not seen[nxt] and not walls[r2, c2]:
                    seen[nxt] = True
                    queue.append(nxt)
    return seen


def is_connected(walls: np.ndarray) -> bool:
    free = np.flatnonzero(~walls.ravel())
    if free.size == 0:
        return False
    return int(_flood_fill(walls, int(free[0])).sum()) == free.size


def _place_blocks(rng: np.random.Generator, h: int, w: int, density: float) -> np.ndarray:
    walls = np.zeros((h, w), dtype=bool)
    target = int(round(density * h * w))
    while walls.sum() < target:
        bh, bw = rng.integers(1, 4, size=2)
        r = rng.integers(0, h - bh + 1)
        c = rng.integers(0, w - bw + 1)
        walls[r : r + bh, c : c + bw] = True
    return walls


def _place_tunnels(rng: np.random.Generator, h: int, w: int, density: float) -> np.ndarray:
    walls = np.zeros((h, w), dtype=bool)
    target = int(round(density * h * w))
    used_rows: set[int] = set()
    used_cols: set[int] = set()
    # lines never sit on the border and never touch a parallel line
    while walls.sum() < target:
        horizontal = bool(rng.integers(2))
        n = h if horizontal else w
        used = used_rows if horizontal else used_cols
        free = [i for i in range(1, n - 1) if not used & {i - 1, i, i + 1}]
        if not free:
            horizontal = not horizontal
            n = h if horizontal else w
            used = used_rows if horizontal else used_cols
            free = [i for i in range(1, n - 1) if not used & {i - 1, i, i + 1}]
            if not free:
                break
        idx = int(rng.choice(free))
        used.add(idx)
        length = w if horizontal else h
        line = np.ones(length, dtype=bool)
        gaps = rng.choice(length, size=int(rng.integers(1, 3)), replace=False)
        line[gaps] = False
        if horizontal:
            walls[idx, :] |= line
        else:
            walls[:, idx] |= line
        # a crossing line may have filled the other line's gap; reopen it
        for row in used_rows:
            if walls[row].all():
                walls[row, rng.integers(w)] = False
        for col in used_cols:
            if walls[:, col].all():
                walls[rng.integers(h), col] = False
    return walls


def generate_maze(
    seed: int,
    style: MazeStyle | str = MazeStyle.BLOCKED,
    width: int = 20,
    height: int = 20,
    obstacle_density: float = 0.15,
    actions: Sequence[str] | None = None,
) -> MazeSpec:
    """Generate a connected maze layout.

    ``BLOCKED`` scatters 1-3 cell rectangles, ``TUNNELED`` draws full-length
    wall lines pierced by 1-2 gaps, and ``CORRIDOR`` leaves the grid open but
    restricts movement to ``actions`` (vertical-only or horizontal-only
    corridors). Layouts that break connectivity are redrawn, up to
    ``MAX_GENERATION_RETRIES`` times.
    """
    style = MazeStyle(style)
    if width < 4 or height < 4:
        raise ValueError("width and height must be at least 4")
    if not 0.0 <= obstacle_density < 1.0:
        raise ValueError("obstacle_density must lie in [0, 1)")
    if actions is None:
        actions = ACTION_NAMES
    rng = np.random.default_rng(np.random.SeedSequence([seed, width, height]))
    for _ in range(MAX_GENERATION_RETRIES):
        if style is MazeStyle.BLOCKED:
            walls = _place_blocks(rng, height, width, obstacle_density)
        elif style is MazeStyle.TUNNELED:
            walls = _place_tunnels(rng, height, width, obstacle_density)
        else:
            walls = np.zeros((height, width), dtype=bool)
        if is_connected(walls):
            return MazeSpec(
                width=width,
                height=height,
                walls=walls,
                style=style,
                seed=seed,
                actions=tuple(actions),
                density=obstacle_density,
            )
    raise MazeGenerationError(
        f"no connected {style.value} maze at density {obstacle_density} "
        f"after {MAX_GENERATION_RETRIES} attempts"
    )


def corridor_maze(seed: int, orientation: str, width: int = 20, height: int = 20) -> MazeSpec:
    """Open grid whose agent may only move vertically or only horizontally."""
    actions = ("Up", "Down") if orientation == "vertical" else ("Left", "Right")
    if orientation not in ("vertical", "horizontal"):
        raise ValueError("orientation must be 'vertical' or 'horizontal'")
    spec = generate_maze(seed, MazeStyle.CORRIDOR, width, height, 0.0, actions=actions)
    return MazeSpec(
        width=width,
        height=height,
        walls=spec.walls,
        style=MazeStyle.CORRIDOR,
        seed=seed,
        actions=actions,
        name=f"corridor-{orientation}-{seed}",
    )


def step(spec: MazeSpec, state: EnvState, action: int) -> StepOutcome:
    """Apply one action, given as an index into ``spec.actions``."""
    if not 0 <= action < len(spec.actions):
        raise ValueError(f"invalid action id {action} for {spec.actions}")
    if not (spec.is_free(state.agent) and spec.is_free(state.goal)):
        raise ValueError(f"state {state} is not valid for maze {spec.name}")
    nxt = spec.move(state.agent, spec.actions[action])
    reached = nxt == state.goal
    return StepOutcome(EnvState(nxt, state.goal), 1.0 if reached else 0.0, reached)


def bfs_distances(spec: MazeSpec, goal: int) -> np.ndarray:
    """Steps to ``goal`` from every cell under the maze's action set (-1: unreachable)."""
    # reverse search: predecessors of a cell are cells that move into it
    dist = np.full(spec.n_cells, -1, dtype=np.int64)
    dist[goal] = 0
    preds: dict[int, list[int]] = {}
    for cell in spec.free_cells:
        for name in spec.actions:
            nxt = spec.move(int(cell), name)
            if nxt != cell:
                preds.setdefault(nxt, []).append(int(cell))
    queue = deque([goal])
    while queue:
        cell = queue.popleft()
        for p in preds.get(cell, ()):
            if dist[p] < 0:
                dist[p] = dist[cell] + 1
                queue.append(p)
    return dist


@dataclass(frozen=True)
class PolicyTable:
    """Optimal action index per cell for a fixed goal (-1 where undefined)."""

    goal: int
    actions: np.ndarray
    distances: np.ndarray = field(repr=False)

    def __getitem__(self, cell: int) -> int:
        return int(self.actions[cell])


def optimal_policy(spec: MazeSpec, goal: int) -> PolicyTable:
    """Greedy BFS policy; ties go to the action listed first in ``spec.actions``."""
    if not spec.is_free(goal):
        raise ValueError(f"goal {goal} is a wall")
    dist = bfs_distances(spec, goal)
    table = np.full(spec.n_cells, -1, dtype=np.int64)
    for cell in spec.free_cells:
        cell = int(cell)
        if cell == goal or dist[cell] < 0:
            continue
        for a, name in enumerate(spec.actions):
            nxt = spec.move(cell, name)
            if dist[nxt] == dist[cell] - 1:
                table[cell] = a
                break
    return PolicyTable(goal, table, dist)


def sample_start_goal(spec: MazeSpec, rng: np.random.Generator) -> tuple[EnvState, PolicyTable]:
    """Uniform goal, then uniform start among other cells that can reach it."""
    free = spec.free_cells
    while True:
        goal = int(rng.choice(free))
        policy = optimal_policy(spec, goal)
        starts = free[(policy.distances[free] > 0)]
        if starts.size:
            return EnvState(int(rng.choice(starts)), goal), policy


def collect_trajectories(
    spec: MazeSpec,
    epsilon: float = 0.5,
    count: int = 500,
    max_len: int = 500,
    seed: int = 0,
) -> TrajectoryDataset:
    """Roll out the epsilon-greedy optimal policy from random start/goal pairs.

    Each episode draws its own generator from ``SeedSequence(seed)`` so the
    result does not depend on the order in which episodes are produced.
    """
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    if count <= 0 or max_len <= 0:
        raise ValueError("count and max_len must be positive")
    n_actions = len(spec.actions)
    episodes = []
    for child in np.random.SeedSequence(seed).spawn(count):
        rng = np.random.default_rng(child)
        state, policy = sample_start_goal(spec, rng)
        states, actions, rewards = [], [], []
        for _ in range(max_len):
            if rng.random() < epsilon:
                a = int(rng.integers(n_actions))
            else:
                a = policy[state.agent]
            out = step(spec, state, a)
            states.append(encode_state(spec, state))
            actions.append(a)
            rewards.append(out.reward)
            state = out.next
            if out.done:
                break
        episodes.append(
            compute_returns_to_go(
                Episode(
                    env_id=spec.name,
                    states=np.asarray(states, dtype=np.int64),
                    actions=np.asarray(actions, dtype=np.int64),
                    rewards=np.asarray(rewards, dtype=np.float32),
                    final_state=encode_state(spec, state),
                )
            )
        )
    return TrajectoryDataset(spec.name, episodes, tuple(spec.actions))


def encode_state(spec: MazeSpec, state: EnvState) -> int:
    """Single token id for an (agent, goal) pair."""
    return state.agent * spec.n_cells + state.goal


def decode_state(spec: MazeSpec, token: int) -> EnvState:
    agent, goal = divmod(int(token), spec.n_cells)
    return EnvState(agent, goal)


def displacement_action(spec: MazeSpec, token: int, next_token: int) -> str | None:
    """Action name implied by a transition, or None if the agent did not move."""
    a = decode_state(spec, token).agent
    b = decode_state(spec, next_token).agent
    if a == b:
        return None
    (r1, c1), (r2, c2) = divmod(a, spec.width), divmod(b, spec.width)
    for name, delta in MOVES.items():
        if (r2 - r1, c2 - c1) == delta:
            return name
    raise ValueError(f"cells {a} and {b} are not adjacent")


def render_svg(spec: MazeSpec, cell_px: int = 16, goal: int | None = None) -> str:
    """SVG picture of the layout; walls dark, goal (if given) green."""
    w, h = spec.width * cell_px, spec.height * cell_px
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
        f'viewBox="0 0 {w} {h}">',
        f'<rect width="{w}" height="{h}" fill="#ffffff"/>',
    ]
    for r, c in zip(*np.nonzero(spec.walls)):
        parts.append(
            f'<rect x="{c * cell_px}" y="{r * cell_px}" width="{cell_px}" '
            f'height="{cell_px}" fill="#333333"/>'
        )
    if goal is not None:
        r, c = divmod(goal, spec.width)
        parts.append(
            f'<rect x="{c * cell_px}" y="{r * cell_px}" width="{cell_px}" '
            f'height="{cell_px}" fill="#2ca02c"/>'
        )
    parts.append("</svg>")
    return "\n".join(parts)
