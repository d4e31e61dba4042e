"""Continuous four-room navigation tasks (plain, river, key)."""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

TASKS = ("A", "B", "C")


@dataclass(frozen=True)
class FourRoomSpec:
    name: str
    task: str
    walls: np.ndarray  # bool, indexed [x, y]
    start: tuple[float, float]
    start_noise: float
    goal: tuple[float, float]
    goal_radius: float = 0.5
    horizon: int = 500
    action_bound: float = 0.1
    rivers: tuple[tuple[float, float, float, float], ...] = ()
    key: tuple[float, float] | None = None
    key_radius: float = 0.5

    @property
    def width(self) -> int:
        return self.walls.shape[0]

    @property
    def height(self) -> int:
        return self.walls.shape[1]

    obs_dim = 3
    act_dim = 2


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split()]


def parse_spec(text: str) -> FourRoomSpec:
    cp = configparser.ConfigParser(comment_prefixes=(";",), inline_comment_prefixes=None)
    cp.read_string(text)
    rows = [r.strip() for r in cp["map"]["rows"].strip().splitlines() if r.strip()]
    if len({len(r) for r in rows}) != 1:
        raise ValueError("map rows must all have the same width")
    height, width = len(rows), len(rows[0])
    walls = np.zeros((width, height), dtype=bool)
    for r, row in enumerate(rows):
        for x, ch in enumerate(row):
            if ch not in "#.":
                raise ValueError(f"bad map character {ch!r}")
            walls[x, height - 1 - r] = ch == "#"
    task = cp["task"].get("task", "A").upper()
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    rivers = ()
    if cp.has_section("river"):
        rivers = tuple(
            tuple(_floats(line)) for line in cp["river"]["rects"].strip().splitlines() if line.strip()
        )
        if any(len(r) != 4 for r in rivers):
            raise ValueError("river rectangles need four numbers: x0 y0 x1 y1")
    key = None
    key_radius = 0.5
    if cp.has_section("key"):
        key = tuple(_floats(cp["key"]["position"]))
        key_radius = cp["key"].getfloat("radius", 0.5)
    spec = FourRoomSpec(
        name=cp["task"].get("name", "fourroom"),
        task=task,
        walls=walls,
        start=tuple(_floats(cp["start"]["position"])),
        start_noise=cp["start"].getfloat("noise", 0.0),
        goal=tuple(_floats(cp["goal"]["position"])),
        goal_radius=cp["goal"].getfloat("radius", 0.5),
        horizon=cp["task"].getint("horizon", 500),
        action_bound=cp["task"].getfloat("action_bound", 0.1),
        rivers=rivers,
        key=key,
        key_radius=key_radius,
    )
    return spec


def load_spec(name_or_path: str) -> FourRoomSpec:
    """Load a task by id (``fourroom-a``/``-b``/``-c``) or config path."""
    path = Path(name_or_path)
    if path.exists():
        return parse_spec(path.read_text())
    suffix = name_or_path.lower().replace("fourroom-", "").replace("fourroom_", "")
    try:
        text = resources.files("porlab.envs").joinpath("data", f"fourroom_{suffix}.ini").read_text()
    except FileNotFoundError:
        raise ValueError(f"unknown four-room task {name_or_path!r}") from None
    return parse_spec(text)


class FourRoomEnv:
    """Point agent in a walled grid; observation is (x, y, has_key).

    ``transition`` is the pure dynamics/reward function; ``reset``/``step``
    add the episode step counter and horizon truncation.
    """

    def __init__(self, spec: FourRoomSpec | str = "fourroom-a"):
        self.spec = load_spec(spec) if isinstance(spec, str) else spec
        self.obs_dim = 3
        self.act_dim = 2
        self.state = np.zeros(3)
        self.t = 0

    @property
    def horizon(self) -> int:
        return self.spec.horizon

    @property
    def action_low(self) -> np.ndarray:
        return np.full(2, -self.spec.action_bound)

    @property
    def action_high(self) -> np.ndarray:
        return np.full(2, self.spec.action_bound)

    # -- geometry ----------------------------------------------------------

    def is_free(self, x: float, y: float) -> bool:
        w, h = self.spec.width, self.spec.height
        if not (0.0 <= x < w and 0.0 <= y < h):
            return False
        return not self.spec.walls[int(math.floor(x)), int(math.floor(y))]

    def in_river(self, x: float, y: float) -> bool:
        return any(x0 <= x < x1 and y0 <= y < y1 for x0, y0, x1, y1 in self.spec.rivers)

    def at_goal(self, x: float, y: float) -> bool:
        gx, gy = self.spec.goal
        return math.hypot(x - gx, y - gy) <= self.spec.goal_radius

    def at_key(self, x: float, y: float) -> bool:
        if self.spec.key is None:
            return False
        kx, ky = self.spec.key
        return math.hypot(x - kx, y - ky) <= self.spec.key_radius

    def free_cells(self, exclude_hazards: bool = True) -> list[tuple[int, int]]:
        cells = []
        for x in range(self.spec.width):
            for y in range(self.spec.height):
                if self.spec.walls[x, y]:
                    continue
                if exclude_hazards and self.in_river(x + 0.5, y + 0.5):
                    continue
                cells.append((x, y))
        return cells

    def sample_free_position(self, rng: np.random.Generator, avoid_goal: bool = True) -> np.ndarray:
        cells = self.free_cells()
        for _ in range(1000):
            cx, cy = cells[rng.integers(len(cells))]
            x, y = cx + rng.uniform(0.05, 0.95), cy + rng.uniform(0.05, 0.95)
            if self.in_river(x, y) or (avoid_goal and self.at_goal(x, y)):
                continue
            return np.array([x, y])
        raise RuntimeError("could not sample a free position")

    # -- dynamics ------------------------------------------------------------

    def clip_action(self, a) -> np.ndarray:
        b = self.spec.action_bound
        return np.clip(np.asarray(a, dtype=np.float64), -b, b)

    def transition(self, s, a):
        """One step from observation ``s`` under action ``a``.

        Returns ``(s', reward, terminal, info)``; the horizon is not applied.
        """
        s = np.asarray(s, dtype=np.float64)
        x, y = float(s[0]), float(s[1])
        has_key = bool(s[2] > 0.5) if s.shape[0] > 2 else False
        dx, dy = self.clip_action(a)
        # axis-separated collision: x first, then y
        if self.is_free(x + dx, y):
            x = x + dx
        if self.is_free(x, y + dy):
            y = y + dy
        info = {"river": False, "key_pickup": False, "goal": False, "goal_without_key": False}
        reward, terminal = 0.0, False
        if self.spec.rivers and self.in_river(x, y):
            info["river"] = True
            reward, terminal = -1.0, True
        else:
            if self.spec.key is not None and not has_key and self.at_key(x, y):
                has_key = True
                info["key_pickup"] = True
            if self.at_goal(x, y):
                if self.spec.key is None or has_key:
                    info["goal"] = True
                    reward, terminal = 1.0, True
                else:
                    info["goal_without_key"] = True
        return np.array([x, y, float(has_key)]), reward, terminal, info

    def reset(self, rng: np.random.Generator | None = None, position=None) -> np.ndarray:
        if position is None:
            position = np.asarray(self.spec.start, dtype=np.float64)
            if rng is not None and self.spec.start_noise > 0:
                for _ in range(100):
                    cand = position + rng.uniform(-self.spec.start_noise, self.spec.start_noise, 2)
                    if self.is_free(*cand) and not self.in_river(*cand):
                        position = cand
                        break
        self.state = np.array([position[0], position[1], 0.0])
        self.t = 0
        return self.state.copy()

    def step(self, a):
        nxt, reward, terminal, info = self.transition(self.state, a)
        self.t += 1
        info["timeout"] = not terminal and self.t >= self.spec.horizon
        self.state = nxt
        return nxt.copy(), reward, terminal or info["timeout"], info


def fourroom_step(env: FourRoomEnv, s, a):
    return env.transition(s, a)
