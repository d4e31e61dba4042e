from porlab.envs.collect import CollectorSpec, GoalReachingController, collect
from porlab.envs.fourroom import FourRoomEnv, FourRoomSpec, fourroom_step, load_spec
from porlab.envs.gridworld import (
    ACTION_NAMES,
    OFFSETS,
    FigureOneLayout,
    GridWorld,
    build_toy_dataset,
    grid_step,
)

__all__ = [
    "ACTION_NAMES",
    "OFFSETS",
    "CollectorSpec",
    "FigureOneLayout",
    "FourRoomEnv",
    "FourRoomSpec",
    "GoalReachingController",
    "GridWorld",
    "build_toy_dataset",
    "collect",
    "fourroom_step",
    "grid_step",
    "load_spec",
]
