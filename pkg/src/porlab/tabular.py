"""Exact dataset-restricted value iteration and the two stitching policies on
the gridworld."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from porlab.data import TrajectoryDataset
from porlab.envs.gridworld import OFFSETS, Cell, GridWorld


class GoalUnreachableError(ValueError):
    def __init__(self, disconnected):
        self.disconnected = sorted(disconnected)
        super().__init__(f"goal unreachable through dataset transitions from {self.disconnected}")


class StitchError(ValueError):
    pass


@dataclass(frozen=True)
class GridTransition:
    state: Cell
    action: int
    reward: float
    next_state: Cell
    done: bool


@dataclass
class TabularValue:
    """V over dataset cells. Cells without a value are simply missing."""

    values: dict[Cell, float]
    gamma: float
    tol: float
    goals: frozenset[Cell] = frozenset()
    sweeps: int = 0
    disconnected: list[Cell] = field(default_factory=list)

    def __contains__(self, cell) -> bool:
        return tuple(cell) in self.values

    def __getitem__(self, cell) -> float:
        return self.values[tuple(cell)]

    def get(self, cell, default=None):
        return self.values.get(tuple(cell), default)


def grid_transitions(dataset: TrajectoryDataset) -> list[GridTransition]:
    if dataset.action_free:
        raise ValueError("gridworld datasets need actions")
    out = []
    for s, a, r, s2, d in zip(
        dataset.observations, dataset.actions, dataset.rewards, dataset.next_observations, dataset.dones
    ):
        out.append(
            GridTransition(
                (int(round(s[0])), int(round(s[1]))),
                int(round(a[0])),
                float(r),
                (int(round(s2[0])), int(round(s2[1]))),
                bool(d),
            )
        )
    return out


def _by_source(transitions) -> dict[Cell, list[GridTransition]]:
    table: dict[Cell, list[GridTransition]] = defaultdict(list)
    for t in transitions:
        table[t.state].append(t)
    return table


def dataset_value_iteration(
    dataset: TrajectoryDataset, gamma: float = 1.0, tol: float = 1e-9, max_sweeps: int = 100_000
) -> TabularValue:
    """Bellman optimality backups using only transitions present in ``dataset``.

    Terminal successors are goal cells with value 0. A source cell whose
    transitions never lead to a goal is left without a value and listed in
    ``disconnected``.
    """
    if not 0.0 < gamma <= 1.0:
        raise ValueError("gamma must lie in (0, 1]")
    trans = grid_transitions(dataset)
    goals = frozenset(t.next_state for t in trans if t.done)
    table = _by_source(trans)
    values: dict[Cell, float] = {g: 0.0 for g in goals}
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        delta = 0.0
        changed = False
        for s, outs in table.items():
            if s in goals:
                continue
            best = None
            for t in outs:
                if t.done:
                    q = t.reward
                elif t.next_state in values:
                    q = t.reward + gamma * values[t.next_state]
                else:
                    continue
                best = q if best is None else max(best, q)
            if best is None:
                continue
            old = values.get(s)
            if old is None:
                changed = True
            else:
                delta = max(delta, abs(best - old))
            values[s] = best
        if not changed and delta < tol:
            break
    else:
        raise RuntimeError(f"value iteration did not converge in {max_sweeps} sweeps")
    sources = set(table)
    disconnected = sorted(sources - set(values))
    if not goals or not (sources & set(values)):
        raise GoalUnreachableError(sources)
    return TabularValue(values, gamma, tol, goals, sweeps, disconnected)


def true_value(world: GridWorld) -> TabularValue:
    """Full-coverage oracle: value of every cell under optimal play."""
    steps = {}
    gx, gy = world.goal
    for x, y in world.cells():
        steps[(x, y)] = max(abs(x - gx), abs(y - gy))
    values = {c: (0.0 if n == 0 else -(n - 1.0)) for c, n in steps.items()}
    return TabularValue(values, 1.0, 0.0, frozenset([world.goal]))


# -- stitchers -------------------------------------------------------------------------


def _argmax(options: list[tuple[int, float]]) -> list[int]:
    best = max(v for _, v in options)
    return sorted(a for a, v in options if v == best)


def _backup(V: TabularValue, reward: float, s2: Cell, done: bool):
    """r + gamma V(s'); ``None`` when s' has no value.

    Scoring by the backup rather than V(s') alone lets entering the goal
    (reward 0) beat stepping to a neighbor that also has value 0.
    """
    if done:
        return reward
    v = V.get(s2)
    return None if v is None else reward + V.gamma * v


def action_stitch_choices(V: TabularValue, dataset_or_table, s: Cell) -> list[int]:
    """All dataset actions from ``s`` whose successor has the highest value."""
    table = _table(dataset_or_table)
    s = tuple(s)
    if s not in table:
        raise StitchError(f"state {s} is not a source state of the dataset")
    options = [(t.action, _backup(V, t.reward, t.next_state, t.done)) for t in table[s]]
    options = [(a, v) for a, v in options if v is not None]
    if not options:
        raise StitchError(f"no dataset action from {s} leads to a valued state")
    return _argmax(options)


def action_stitch_action(V: TabularValue, dataset_or_table, s: Cell) -> int:
    return action_stitch_choices(V, dataset_or_table, s)[0]


def state_stitch_choices(V: TabularValue, world: GridWorld, s: Cell) -> list[int]:
    """All of the eight actions whose true successor, restricted to dataset states, scores best."""
    s = tuple(s)
    options = []
    for a in range(len(OFFSETS)):
        s2, r, done = world.step(s, a)
        if s2 not in V:
            continue
        options.append((a, _backup(V, r, s2, done)))
    if not options:
        raise StitchError(f"no action from {s} reaches a dataset state")
    return _argmax(options)


def state_stitch_action(V: TabularValue, dataset, world: GridWorld, s: Cell) -> int:
    return state_stitch_choices(V, world, s)[0]


def _table(dataset_or_table):
    if isinstance(dataset_or_table, TrajectoryDataset):
        return _by_source(grid_transitions(dataset_or_table))
    return dataset_or_table


# -- rollouts ------------------------------------------------------------------------


def rollout(choose, world: GridWorld, start: Cell | None = None, max_steps: int | None = None) -> list[Cell]:
    """Follow ``choose(s) -> action`` under the true dynamics until the goal."""
    s = tuple(world.start if start is None else start)
    limit = max_steps if max_steps is not None else 4 * world.width * world.height
    path = [s]
    for _ in range(limit):
        s2, _, done = world.step(s, choose(s))
        path.append(s2)
        if done:
            return path
        s = s2
    raise StitchError(f"no goal within {limit} steps")


def rollout_lengths(choices, world: GridWorld, start: Cell | None = None, max_steps: int | None = None):
    """Step counts of every path obtained by following any argmax-tied choice.

    ``choices(s)`` returns the tied action list at ``s``. Returns the set of
    lengths and one example path per length.
    """
    start = tuple(world.start if start is None else start)
    limit = max_steps if max_steps is not None else 4 * world.width * world.height
    paths: dict[int, list[Cell]] = {}
    stack = [(start, [start])]
    while stack:
        s, path = stack.pop()
        if len(path) - 1 >= limit:
            raise StitchError(f"no goal within {limit} steps")
        for a in choices(s):
            s2, _, done = world.step(s, a)
            if done:
                n = len(path)
                paths.setdefault(n, path + [s2])
            elif s2 not in path:
                stack.append((s2, path + [s2]))
    if not paths:
        raise StitchError("no tie-following rollout reaches the goal")
    return set(paths), paths


def stitch_lengths(dataset: TrajectoryDataset, world: GridWorld, gamma: float = 1.0):
    """(action-stitching lengths, state-stitching lengths) for a gridworld dataset."""
    V = dataset_value_iteration(dataset, gamma)
    table = _by_source(grid_transitions(dataset))
    act, _ = rollout_lengths(lambda s: action_stitch_choices(V, table, s), world)
    st, _ = rollout_lengths(lambda s: state_stitch_choices(V, world, s), world)
    return act, st


def render_path(world: GridWorld, path, dataset: TrajectoryDataset | None = None) -> str:
    """ASCII grid: S start, G goal, * path, . dataset cell, blank otherwise."""
    cells = set()
    if dataset is not None:
        cells = {(int(round(o[0])), int(round(o[1]))) for o in dataset.observations}
    on_path = set(map(tuple, path))
    rows = []
    for y in reversed(range(world.height)):
        row = []
        for x in range(world.width):
            c = (x, y)
            if c == tuple(world.start):
                row.append("S")
            elif c == tuple(world.goal):
                row.append("G")
            elif c in on_path:
                row.append("*")
            elif c in cells:
                row.append(".")
            else:
                row.append(" ")
        rows.append("|" + " ".join(row) + "|")
    return "\n".join(rows)


def random_grid_dataset(world: GridWorld, rng: np.random.Generator, n_random: int = 10, n_paths: int = 1):
    """Random walks biased toward the goal plus random single transitions."""
    from porlab.envs.gridworld import FigureOneLayout, build_toy_dataset

    paths = []
    limit = 4 * world.width * world.height
    while len(paths) < n_paths:
        s = tuple(world.start)
        path = [s]
        while s != tuple(world.goal) and len(path) < limit:
            dx = int(np.sign(world.goal[0] - s[0]))
            dy = int(np.sign(world.goal[1] - s[1]))
            moves = [(dx, 0), (0, dy), (dx, dy)] if rng.random() < 0.7 else list(OFFSETS)
            m = moves[rng.integers(len(moves))]
            if m == (0, 0):
                continue
            nxt = (s[0] + m[0], s[1] + m[1])
            if world.in_bounds(nxt):
                s = nxt
                path.append(s)
        if s == tuple(world.goal):
            paths.append(path)
    randoms = [
        ((int(rng.integers(world.width)), int(rng.integers(world.height))), int(rng.integers(8)))
        for _ in range(n_random)
    ]
    randoms = [(s, a) for s, a in randoms if s != tuple(world.goal)]
    return build_toy_dataset(FigureOneLayout(world, paths, randoms))
