"""Deterministic 8-connected gridworld and the toy stitching dataset."""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from porlab.data import TrajectoryDataset, Transition

Cell = tuple[int, int]

# index -> (dx, dy); y grows upwards
OFFSETS: tuple[Cell, ...] = (
    (0, 1),    # 0 up
    (1, 1),    # 1 up-right
    (1, 0),    # 2 right
    (1, -1),   # 3 down-right
    (0, -1),   # 4 down
    (-1, -1),  # 5 down-left
    (-1, 0),   # 6 left
    (-1, 1),   # 7 up-left
)
ACTION_NAMES = ("U", "UR", "R", "DR", "D", "DL", "L", "UL")


def action_index(name_or_index) -> int:
    if isinstance(name_or_index, str):
        try:
            return ACTION_NAMES.index(name_or_index.upper())
        except ValueError:
            raise ValueError(f"unknown action name {name_or_index!r}") from None
    return int(name_or_index)


def action_between(s: Cell, s2: Cell) -> int:
    delta = (s2[0] - s[0], s2[1] - s[1])
    if delta not in OFFSETS:
        raise ValueError(f"{s} -> {s2} is not a single 8-connected move")
    return OFFSETS.index(delta)


@dataclass(frozen=True)
class GridWorld:
    width: int = 7
    height: int = 7
    start: Cell = (0, 0)
    goal: Cell = (6, 6)

    def in_bounds(self, s: Cell) -> bool:
        return 0 <= s[0] < self.width and 0 <= s[1] < self.height

    def move(self, s: Cell, a: int) -> Cell:
        if not 0 <= a < 8:
            raise ValueError(f"invalid action index {a}")
        dx, dy = OFFSETS[a]
        nxt = (s[0] + dx, s[1] + dy)
        return nxt if self.in_bounds(nxt) else tuple(s)

    def step(self, s: Cell, a: int) -> tuple[Cell, float, bool]:
        """Entering the goal pays 0 and terminates; every other move pays -1."""
        if not self.in_bounds(s):
            raise ValueError(f"state {s} out of bounds")
        nxt = self.move(tuple(s), int(a))
        if nxt == self.goal:
            return nxt, 0.0, True
        return nxt, -1.0, False

    def cells(self):
        for x in range(self.width):
            for y in range(self.height):
                yield (x, y)


grid_step = GridWorld.step


@dataclass
class FigureOneLayout:
    """Two start-to-goal paths plus isolated (state, action) transitions."""

    world: GridWorld
    paths: list[list[Cell]] = field(default_factory=list)
    random_transitions: list[tuple[Cell, int]] = field(default_factory=list)

    @classmethod
    def parse(cls, text: str) -> "FigureOneLayout":
        size, start, goal = (7, 7), (0, 0), (6, 6)
        paths, randoms = [], []
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, *rest = line.split()
            if key == "size":
                size = (int(rest[0]), int(rest[1]))
            elif key == "start":
                start = (int(rest[0]), int(rest[1]))
            elif key == "goal":
                goal = (int(rest[0]), int(rest[1]))
            elif key == "path":
                paths.append([_cell(tok) for tok in rest])
            elif key == "random":
                randoms.append((_cell(rest[0]), action_index(rest[1])))
            else:
                raise ValueError(f"unknown layout key {key!r}")
        return cls(GridWorld(size[0], size[1], start, goal), paths, randoms)

    @classmethod
    def load(cls, name_or_path: str) -> "FigureOneLayout":
        path = Path(name_or_path)
        if path.exists():
            return cls.parse(path.read_text())
        text = resources.files("porlab.envs").joinpath("data", f"toy_{name_or_path}.txt").read_text()
        return cls.parse(text)

    def dump(self) -> str:
        w = self.world
        lines = [f"size {w.width} {w.height}", f"start {w.start[0]} {w.start[1]}", f"goal {w.goal[0]} {w.goal[1]}"]
        for p in self.paths:
            lines.append("path " + " ".join(f"{x},{y}" for x, y in p))
        for s, a in self.random_transitions:
            lines.append(f"random {s[0]},{s[1]} {ACTION_NAMES[a]}")
        return "\n".join(lines) + "\n"


def _cell(tok: str) -> Cell:
    x, y = tok.split(",")
    return int(x), int(y)


def build_toy_dataset(layout: FigureOneLayout) -> TrajectoryDataset:
    """Gridworld dataset: each path becomes a trajectory, each random
    transition a one-step truncated trajectory. Actions are stored as the
    float action index."""
    world = layout.world
    trajs = []
    for k, path in enumerate(layout.paths):
        if not path or path[0] != world.start or path[-1] != world.goal:
            raise ValueError(f"path {k} does not run from start {world.start} to goal {world.goal}")
        traj = []
        for s, s2 in zip(path[:-1], path[1:]):
            a = action_between(s, s2)
            nxt, r, done = world.step(s, a)
            if nxt != s2:
                raise ValueError(f"path {k}: move {s} -> {s2} leaves the grid")
            traj.append(Transition(np.array(s, float), np.array([a], float), r, np.array(nxt, float), done))
            if done:
                break
        if not traj[-1].done:
            raise ValueError(f"path {k} does not reach the goal")
        trajs.append(traj)
    for s, a in layout.random_transitions:
        nxt, r, done = world.step(s, a)
        trajs.append([Transition(np.array(s, float), np.array([a], float), r, np.array(nxt, float), done)])
    return TrajectoryDataset.from_trajectories(
        trajs, obs_dim=2, act_dim=1, metadata={"env_id": "gridworld", "name": "toy"}
    )
