"""Scripted data collection for the four-room tasks."""

from __future__ import annotations

import math
from dataclasses import dataclass

import networkx as nx
import numpy as np

from porlab.data import TrajectoryDataset, Transition
from porlab.envs.fourroom import FourRoomEnv

WAYPOINT_TOL = 0.15
STUCK_STEPS = 60


@dataclass(frozen=True)
class CollectorSpec:
    env_id: str = "fourroom-a"
    n_transitions: int = 100_000
    controller_fraction: float = 0.8
    random_fraction: float = 0.2
    seed: int = 0
    action_noise: float = 0.02

    def __post_init__(self):
        if self.n_transitions <= 0:
            raise ValueError("n_transitions must be positive")
        if not math.isclose(self.controller_fraction + self.random_fraction, 1.0):
            raise ValueError("controller and random fractions must sum to 1")
        if min(self.controller_fraction, self.random_fraction) < 0:
            raise ValueError("fractions must be non-negative")


def cell_graph(env: FourRoomEnv) -> nx.Graph:
    """8-connected graph over free cells; diagonals may not cut wall corners."""
    g = nx.Graph()
    walls = env.spec.walls
    w, h = walls.shape
    free = lambda x, y: 0 <= x < w and 0 <= y < h and not walls[x, y]
    for x in range(w):
        for y in range(h):
            if not free(x, y):
                continue
            g.add_node((x, y))
            for dx, dy in ((1, 0), (0, 1), (1, 1), (1, -1)):
                nx_, ny_ = x + dx, y + dy
                if not free(nx_, ny_):
                    continue
                if dx and dy and not (free(x + dx, y) and free(x, y + dy)):
                    continue
                g.add_edge((x, y), (nx_, ny_), weight=math.hypot(dx, dy))
    return g


class GoalReachingController:
    """Greedy motion along an A*-planned cell path towards a target point."""

    def __init__(self, env: FourRoomEnv, rng: np.random.Generator, noise: float = 0.02, max_retries: int = 20):
        self.env = env
        self.rng = rng
        self.noise = noise
        self.max_retries = max_retries
        self.graph = cell_graph(env)
        self.waypoints: list[np.ndarray] = []
        self.best_dist = math.inf
        self.since_progress = 0

    def _heuristic(self, a, b):
        return math.hypot(a[0] - b[0], a[1] - b[1])

    def set_target(self, position: np.ndarray) -> None:
        here = (int(position[0]), int(position[1]))
        for _ in range(self.max_retries):
            target = self.env.sample_free_position(self.rng, avoid_goal=False)
            cell = (int(target[0]), int(target[1]))
            try:
                path = nx.astar_path(self.graph, here, cell, heuristic=self._heuristic, weight="weight")
            except (nx.NetworkXNoPath, nx.NodeNotFound):
                continue
            self.waypoints = [np.array([cx + 0.5, cy + 0.5]) for cx, cy in path[1:-1]] + [target]
            self.best_dist = math.inf
            self.since_progress = 0
            return
        raise RuntimeError(f"no reachable target from cell {here} after {self.max_retries} tries")

    def act(self, position: np.ndarray) -> np.ndarray:
        if not self.waypoints:
            self.set_target(position)
        while len(self.waypoints) > 1 and np.linalg.norm(self.waypoints[0] - position) < WAYPOINT_TOL:
            self.waypoints.pop(0)
        if len(self.waypoints) == 1 and np.linalg.norm(self.waypoints[0] - position) < WAYPOINT_TOL:
            self.set_target(position)
        dist = float(np.linalg.norm(self.waypoints[-1] - position)) + len(self.waypoints)
        if dist < self.best_dist - 1e-3:
            self.best_dist = dist
            self.since_progress = 0
        else:
            self.since_progress += 1
            if self.since_progress > STUCK_STEPS:
                self.set_target(position)
        bound = self.env.spec.action_bound
        a = np.clip(self.waypoints[0] - position, -bound, bound)
        a = a + self.rng.normal(0.0, self.noise, size=2)
        return np.clip(a, -bound, bound)


def _rollout(env: FourRoomEnv, rng: np.random.Generator, policy, budget: int) -> list[Transition]:
    s = env.reset(position=env.sample_free_position(rng, avoid_goal=False))
    traj = []
    for _ in range(min(budget, env.spec.horizon)):
        a = policy(s)
        s2, r, terminal, _ = env.transition(s, a)
        traj.append(Transition(s, a, r, s2, terminal))
        s = s2
        if terminal:
            break
    return traj


def collect(spec: CollectorSpec) -> TrajectoryDataset:
    """Roll out controller and random-policy episodes until exactly
    ``n_transitions`` transitions are gathered."""
    env = FourRoomEnv(spec.env_id)
    rng = np.random.default_rng(spec.seed)
    n_ctrl = int(round(spec.n_transitions * spec.controller_fraction))
    budgets = [("controller", n_ctrl), ("random", spec.n_transitions - n_ctrl)]
    bound = env.spec.action_bound
    trajs = []
    for kind, budget in budgets:
        while budget > 0:
            if kind == "controller":
                ctrl = GoalReachingController(env, rng, noise=spec.action_noise)
                policy = lambda s: ctrl.act(s[:2])
            else:
                policy = lambda s: rng.uniform(-bound, bound, size=2)
            traj = _rollout(env, rng, policy, budget)
            budget -= len(traj)
            trajs.append(traj)
    meta = {
        "env_id": env.spec.name,
        "name": f"{env.spec.name}-collected",
        "seed": spec.seed,
        "horizon": env.spec.horizon,
        "controller_fraction": spec.controller_fraction,
    }
    return TrajectoryDataset.from_trajectories(trajs, obs_dim=3, act_dim=2, metadata=meta)
