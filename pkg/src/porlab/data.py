"""Offline trajectory datasets: returns, filtering, splits and file formats."""

from __future__ import annotations

import csv
import io
import json
import math
import struct
import warnings
import zlib
from dataclasses import dataclass, field, replace
from typing import Iterator, NamedTuple, Sequence

import numpy as np

MAGIC = b"PORD"
VERSION = 1
SCHEMES = ("main", "more", "mix")


class DatasetError(ValueError):
    pass


class CorruptDatasetError(DatasetError):
    pass


class ActionFreeError(DatasetError):
    """Raised when actions are required but the data has none."""


class Transition(NamedTuple):
    state: np.ndarray
    action: np.ndarray | None
    reward: float
    next_state: np.ndarray
    done: bool


@dataclass(frozen=True)
class TrajectoryDataset:
    """Column-oriented transitions with trajectory boundaries.

    ``starts`` holds the index of the first transition of every trajectory.
    The last transition of a trajectory is either terminal (``dones``) or
    truncated (``timeouts``); interior transitions are neither. Transitions
    without an action have ``has_action`` false and NaN in ``actions``.
    """

    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_observations: np.ndarray
    dones: np.ndarray
    timeouts: np.ndarray
    has_action: np.ndarray
    starts: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.rewards)
        for name in ("observations", "actions", "next_observations", "dones", "timeouts", "has_action"):
            if len(getattr(self, name)) != n:
                raise DatasetError(f"column {name} has {len(getattr(self, name))} rows, expected {n}")
        if self.observations.ndim != 2 or self.observations.shape != self.next_observations.shape:
            raise DatasetError("state and next_state arrays must share a 2-D shape")
        if self.actions.ndim != 2:
            raise DatasetError("actions must be 2-D")
        if n and not np.all(np.isfinite(self.rewards)):
            raise DatasetError("rewards must be finite")
        starts = self.starts
        if len(starts):
            if starts[0] != 0 or np.any(np.diff(starts) < 0) or starts[-1] > n:
                raise DatasetError("trajectory starts must be sorted and begin at 0")
        elif n:
            raise DatasetError("non-empty dataset without trajectory boundaries")
        for arr in (self.observations, self.actions, self.rewards, self.next_observations):
            arr.setflags(write=False)

    # -- construction ----------------------------------------------------

    @classmethod
    def from_trajectories(
        cls,
        trajectories: Sequence[Sequence[Transition]],
        obs_dim: int | None = None,
        act_dim: int | None = None,
        metadata: dict | None = None,
    ) -> "TrajectoryDataset":
        """Build a dataset from lists of :class:`Transition`.

        A trajectory whose last transition is not terminal is marked truncated.
        """
        flat = [t for traj in trajectories for t in traj]
        if flat:
            obs_dim = len(flat[0].state) if obs_dim is None else obs_dim
            if act_dim is None:
                with_action = [t.action for t in flat if t.action is not None]
                act_dim = len(with_action[0]) if with_action else 0
        if obs_dim is None or act_dim is None:
            raise DatasetError("obs_dim and act_dim are required for an empty dataset")
        n = len(flat)
        obs = np.zeros((n, obs_dim))
        nxt = np.zeros((n, obs_dim))
        act = np.full((n, act_dim), np.nan)
        rew = np.zeros(n)
        done = np.zeros(n, dtype=bool)
        timeout = np.zeros(n, dtype=bool)
        has = np.zeros(n, dtype=bool)
        starts = []
        i = 0
        for traj in trajectories:
            if not len(traj):
                continue
            starts.append(i)
            for k, t in enumerate(traj):
                obs[i] = t.state
                nxt[i] = t.next_state
                if t.action is not None:
                    act[i] = t.action
                    has[i] = True
                rew[i] = t.reward
                done[i] = bool(t.done)
                if k == len(traj) - 1 and not t.done:
                    timeout[i] = True
                i += 1
        return cls(obs, act, rew, nxt, done, timeout, has, np.asarray(starts, dtype=np.int64), dict(metadata or {}))

    @classmethod
    def empty(cls, obs_dim: int, act_dim: int, metadata: dict | None = None) -> "TrajectoryDataset":
        return cls.from_trajectories([], obs_dim, act_dim, metadata)

    # -- shape -------------------------------------------------------------

    @property
    def obs_dim(self) -> int:
        return self.observations.shape[1]

    @property
    def act_dim(self) -> int:
        return self.actions.shape[1]

    @property
    def n_transitions(self) -> int:
        return len(self.rewards)

    @property
    def n_trajectories(self) -> int:
        return len(self.starts)

    def __len__(self) -> int:
        return self.n_transitions

    @property
    def action_free(self) -> bool:
        return not bool(np.any(self.has_action))

    @property
    def ends(self) -> np.ndarray:
        return np.append(self.starts[1:], self.n_transitions).astype(np.int64)

    def trajectory_slices(self) -> list[slice]:
        return [slice(int(a), int(b)) for a, b in zip(self.starts, self.ends)]

    def trajectory_ids(self) -> np.ndarray:
        ids = np.zeros(self.n_transitions, dtype=np.int64)
        for k, sl in enumerate(self.trajectory_slices()):
            ids[sl] = k
        return ids

    def transitions(self) -> Iterator[Transition]:
        for i in range(self.n_transitions):
            yield Transition(
                self.observations[i].copy(),
                self.actions[i].copy() if self.has_action[i] else None,
                float(self.rewards[i]),
                self.next_observations[i].copy(),
                bool(self.dones[i]),
            )

    def validate(self) -> None:
        """Check the chaining and termination invariants; raise on violation."""
        for k, sl in enumerate(self.trajectory_slices()):
            if sl.stop - sl.start == 0:
                continue
            inner = slice(sl.start, sl.stop - 1)
            if not np.array_equal(self.next_observations[inner], self.observations[sl.start + 1 : sl.stop]):
                raise DatasetError(f"trajectory {k}: next_state does not chain into the following state")
            if np.any(self.dones[inner]) or np.any(self.timeouts[inner]):
                raise DatasetError(f"trajectory {k}: terminal flag before the last step")
            last = sl.stop - 1
            if not (self.dones[last] or self.timeouts[last]):
                raise DatasetError(f"trajectory {k}: last step is neither terminal nor truncated")

    # -- derived datasets ----------------------------------------------------

    def select_trajectories(self, indices: Sequence[int]) -> "TrajectoryDataset":
        slices = self.trajectory_slices()
        rows = [np.arange(slices[i].start, slices[i].stop) for i in indices]
        rows = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64)
        lengths = [slices[i].stop - slices[i].start for i in indices]
        starts = np.concatenate([[0], np.cumsum(lengths)[:-1]]).astype(np.int64) if lengths else np.zeros(0, np.int64)
        return TrajectoryDataset(
            self.observations[rows].copy(),
            self.actions[rows].copy(),
            self.rewards[rows].copy(),
            self.next_observations[rows].copy(),
            self.dones[rows].copy(),
            self.timeouts[rows].copy(),
            self.has_action[rows].copy(),
            starts,
            dict(self.metadata),
        )

    def without_actions(self) -> "TrajectoryDataset":
        return replace(
            self,
            actions=np.full_like(self.actions, np.nan),
            has_action=np.zeros_like(self.has_action),
        )

    def with_rewards(self, rewards: np.ndarray) -> "TrajectoryDataset":
        return replace(self, rewards=np.asarray(rewards, dtype=np.float64).copy())

    def require_actions(self) -> None:
        if not np.all(self.has_action):
            missing = int(np.sum(~self.has_action))
            raise ActionFreeError(f"{missing} of {self.n_transitions} transitions carry no action")

    def content_hash(self) -> str:
        import hashlib

        return hashlib.sha256(to_bytes(self)).hexdigest()


def concat(datasets: Sequence[TrajectoryDataset], metadata: dict | None = None) -> TrajectoryDataset:
    datasets = [d for d in datasets]
    if not datasets:
        raise DatasetError("nothing to concatenate")
    obs_dim = datasets[0].obs_dim
    act_dim = max(d.act_dim for d in datasets)
    for d in datasets:
        if d.obs_dim != obs_dim:
            raise DatasetError("state dimensions differ")
        if d.act_dim not in (0, act_dim) and d.n_transitions:
            raise DatasetError("action dimensions differ")

    def acts(d):
        if d.act_dim == act_dim:
            return d.actions
        return np.full((d.n_transitions, act_dim), np.nan)

    offsets = np.cumsum([0] + [d.n_transitions for d in datasets[:-1]])
    return TrajectoryDataset(
        np.concatenate([d.observations for d in datasets]),
        np.concatenate([acts(d) for d in datasets]),
        np.concatenate([d.rewards for d in datasets]),
        np.concatenate([d.next_observations for d in datasets]),
        np.concatenate([d.dones for d in datasets]),
        np.concatenate([d.timeouts for d in datasets]),
        np.concatenate([d.has_action for d in datasets]),
        np.concatenate([d.starts + off for d, off in zip(datasets, offsets)]).astype(np.int64),
        dict(metadata if metadata is not None else datasets[0].metadata),
    )


# -- returns and filtering -------------------------------------------------


def discounted_return(rewards: Sequence[float], gamma: float) -> float:
    if not 0.0 < gamma <= 1.0:
        raise ValueError("gamma must lie in (0, 1]")
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.size == 0:
        warnings.warn("empty trajectory has return 0", RuntimeWarning, stacklevel=2)
        return 0.0
    return float(np.sum(rewards * gamma ** np.arange(rewards.size)))


def compute_returns(dataset: TrajectoryDataset, gamma: float) -> np.ndarray:
    """Per-trajectory discounted return sum_t gamma^t r_t."""
    return np.array([discounted_return(dataset.rewards[sl], gamma) for sl in dataset.trajectory_slices()])


def filter_top_fraction(dataset: TrajectoryDataset, x_percent: float) -> TrajectoryDataset:
    """Keep the ceil(x% of trajectories) with the highest undiscounted return.

    Ties go to the earlier trajectory; kept trajectories stay in dataset order.
    """
    if not 0.0 < x_percent <= 100.0:
        raise ValueError("x_percent must lie in (0, 100]")
    n = dataset.n_trajectories
    if n == 0:
        return dataset
    # round before ceil so 30% of 10 stays 3
    keep = int(math.ceil(round(n * x_percent / 100.0, 9)))
    returns = compute_returns(dataset, 1.0)
    order = sorted(range(n), key=lambda i: (-returns[i], i))
    return dataset.select_trajectories(sorted(order[:keep]))


# -- splits --------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    scheme: str = "main"
    fraction_e: float = 1.0
    action_free_supplement: bool = False

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if not 0.0 < self.fraction_e <= 1.0:
            raise ValueError("fraction_e must lie in (0, 1]")


def split(dataset: TrajectoryDataset, spec: SplitSpec, seed: int = 0):
    """Random trajectory-level split into (D_e, D_o).

    ``main`` returns (D_e, empty); ``more`` returns (D_e + D_o merged, empty);
    ``mix`` returns (D_e, D_o), stripping D_o actions when requested.
    """
    n = dataset.n_trajectories
    n_e = int(round(spec.fraction_e * n))
    if n_e == 0:
        raise DatasetError(f"fraction {spec.fraction_e} of {n} trajectories leaves D_e empty")
    perm = np.random.default_rng(seed).permutation(n)
    idx_e = np.sort(perm[:n_e])
    idx_o = np.sort(perm[n_e:])
    d_e = dataset.select_trajectories(idx_e)
    d_o = dataset.select_trajectories(idx_o)
    empty = TrajectoryDataset.empty(dataset.obs_dim, dataset.act_dim, dataset.metadata)
    if spec.scheme == "main":
        return d_e, empty
    if spec.scheme == "more":
        if spec.action_free_supplement:
            d_o = d_o.without_actions()
        return concat([d_e, d_o]), empty
    if spec.action_free_supplement:
        d_o = d_o.without_actions()
    return d_e, d_o


# -- state normalization ------------------------------------------------------


def state_statistics(dataset: TrajectoryDataset, eps: float = 1e-3):
    mean = dataset.observations.mean(axis=0)
    std = dataset.observations.std(axis=0) + eps
    return mean, std


def normalize_states(dataset: TrajectoryDataset, mean: np.ndarray, std: np.ndarray) -> TrajectoryDataset:
    return replace(
        dataset,
        observations=(dataset.observations - mean) / std,
        next_observations=(dataset.next_observations - mean) / std,
    )


# -- binary format ---------------------------------------------------------------
#
#   magic "PORD" | u16 version | u32 obs_dim | u32 act_dim | u64 n_transitions
#   | u64 n_trajectories | u64 starts[n_trajectories] | u32 metadata length
#   | metadata (UTF-8 JSON) | f64 payload | u32 crc32 of everything before it
#
# payload rows: obs, action, reward, next_obs, done, timeout, has_action


def _payload(d: TrajectoryDataset) -> np.ndarray:
    return np.hstack(
        [
            d.observations,
            d.actions,
            d.rewards[:, None],
            d.next_observations,
            d.dones[:, None].astype(np.float64),
            d.timeouts[:, None].astype(np.float64),
            d.has_action[:, None].astype(np.float64),
        ]
    ) if d.n_transitions else np.zeros((0, 2 * d.obs_dim + d.act_dim + 4))


def to_bytes(d: TrajectoryDataset) -> bytes:
    meta = json.dumps(d.metadata, sort_keys=True).encode("utf-8")
    parts = [
        MAGIC,
        struct.pack("<HIIQQ", VERSION, d.obs_dim, d.act_dim, d.n_transitions, d.n_trajectories),
        np.asarray(d.starts, dtype="<u8").tobytes(),
        struct.pack("<I", len(meta)),
        meta,
        np.ascontiguousarray(_payload(d), dtype="<f8").tobytes(),
    ]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def from_bytes(data: bytes) -> TrajectoryDataset:
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data) - 4:
            raise CorruptDatasetError(f"truncated dataset: need {n} bytes at offset {pos}")
        out = data[pos : pos + n]
        pos += n
        return out

    if len(data) < 4:
        raise CorruptDatasetError("truncated dataset at offset 0")
    if take(4) != MAGIC:
        raise CorruptDatasetError("bad magic at offset 0")
    version, obs_dim, act_dim, n, n_traj = struct.unpack("<HIIQQ", take(struct.calcsize("<HIIQQ")))
    if version != VERSION:
        raise CorruptDatasetError(f"unsupported version {version} at offset 4")
    starts = np.frombuffer(take(8 * n_traj), dtype="<u8").astype(np.int64)
    (meta_len,) = struct.unpack("<I", take(4))
    meta = json.loads(take(meta_len).decode("utf-8"))
    width = 2 * obs_dim + act_dim + 4
    payload = np.frombuffer(take(8 * width * n), dtype="<f8").reshape(n, width).astype(np.float64)
    if pos != len(data) - 4:
        raise CorruptDatasetError(f"unexpected trailing bytes at offset {pos}")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != crc:
        raise CorruptDatasetError(f"checksum mismatch at offset {len(data) - 4}")
    o = 0
    obs = payload[:, o : o + obs_dim]; o += obs_dim
    act = payload[:, o : o + act_dim]; o += act_dim
    rew = payload[:, o]; o += 1
    nxt = payload[:, o : o + obs_dim]; o += obs_dim
    done, timeout, has = (payload[:, o + k] > 0.5 for k in range(3))
    return TrajectoryDataset(obs.copy(), act.copy(), rew.copy(), nxt.copy(), done, timeout, has, starts, meta)


def save_dataset(dataset: TrajectoryDataset, path) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(dataset))


def load_dataset(path) -> TrajectoryDataset:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())


# -- CSV ---------------------------------------------------------------------------


def csv_header(obs_dim: int, act_dim: int) -> list[str]:
    return (
        ["traj", "step"]
        + [f"s{i}" for i in range(obs_dim)]
        + [f"a{i}" for i in range(act_dim)]
        + ["r"]
        + [f"sp{i}" for i in range(obs_dim)]
        + ["done"]
    )


def to_csv(dataset: TrajectoryDataset) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(csv_header(dataset.obs_dim, dataset.act_dim))
    for k, sl in enumerate(dataset.trajectory_slices()):
        for step, i in enumerate(range(sl.start, sl.stop)):
            acts = [repr(float(v)) for v in dataset.actions[i]] if dataset.has_action[i] else [""] * dataset.act_dim
            writer.writerow(
                [k, step]
                + [repr(float(v)) for v in dataset.observations[i]]
                + acts
                + [repr(float(dataset.rewards[i]))]
                + [repr(float(v)) for v in dataset.next_observations[i]]
                + [int(dataset.dones[i])]
            )
    return buf.getvalue()


def from_csv(text: str, metadata: dict | None = None) -> TrajectoryDataset:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise DatasetError("empty CSV")
    header = rows[0]
    obs_dim = sum(1 for h in header if h.startswith("s") and h[1:].isdigit())
    act_dim = sum(1 for h in header if h.startswith("a") and h[1:].isdigit())
    if header != csv_header(obs_dim, act_dim):
        raise DatasetError("unexpected CSV header")
    trajs: list[list[Transition]] = []
    last_traj = None
    for line_no, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise DatasetError(f"line {line_no}: expected {len(header)} fields, got {len(row)}")
        k = int(row[0])
        c = 2
        s = np.array([float(v) for v in row[c : c + obs_dim]]); c += obs_dim
        raw_a = row[c : c + act_dim]; c += act_dim
        a = None if act_dim and all(v == "" for v in raw_a) else np.array([float(v) for v in raw_a])
        r = float(row[c]); c += 1
        sp = np.array([float(v) for v in row[c : c + obs_dim]]); c += obs_dim
        done = bool(int(row[c]))
        if k != last_traj:
            trajs.append([])
            last_traj = k
        trajs[-1].append(Transition(s, a, r, sp, done))
    return TrajectoryDataset.from_trajectories(trajs, obs_dim, act_dim, metadata)
