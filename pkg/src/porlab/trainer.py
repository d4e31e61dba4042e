"""Decoupled training: N value/guide steps, then M execute steps; evaluation,
transfer and mix drivers."""

from __future__ import annotations

import configparser
import dataclasses
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from porlab import approx
from porlab.approx import Adam
from porlab.data import ActionFreeError, TrajectoryDataset, concat
from porlab.policies import (
    BehaviorGuideDensity,
    ExecutePolicy,
    GuidePolicy,
    PorAgent,
    execute_loss,
    fit_behavior_density,
    guide_loss_explicit,
    guide_loss_weighted,
    residual_weights,
)
from porlab.valuelearn import Batch, ValueEnsemble, batch_from

METRIC_COLUMNS = (
    "step",
    "loss_v",
    "loss_g",
    "loss_pi",
    "eval_return_mean",
    "eval_return_std",
    "eval_success_rate",
)
GUIDE_OBJECTIVES = ("eq5", "eq6")
# "divide": weight exp(u / alpha); "multiply": exp(alpha * u), alpha read as an inverse temperature
ALPHA_MODES = ("divide", "multiply")


class TrainingDiverged(RuntimeError):
    pass


def _hidden(v) -> tuple[int, ...]:
    if isinstance(v, str):
        return tuple(int(x) for x in v.replace("x", ",").split(",") if x.strip())
    return tuple(int(x) for x in v)


@dataclass(frozen=True)
class TrainConfig:
    n_steps: int = 200_000
    m_steps: int = 200_000
    batch_size: int = 256
    gamma: float = 0.99
    polyak: float = 0.05
    tau: float = 0.7
    alpha: float = 10.0
    alpha_mode: str = "divide"
    value_lr: float = 1e-4
    guide_lr: float = 1e-4
    execute_lr: float = 1e-4
    value_hidden: tuple[int, ...] = (256, 256)
    guide_hidden: tuple[int, ...] = (256, 256)
    execute_hidden: tuple[int, ...] = (1024, 1024)
    value_layer_norm: bool = False
    guide_objective: str = "eq6"
    value_objective: str = "expectile"
    deterministic_guide: bool = False
    behavior_steps: int = 5000
    execute_weighted: bool = False
    normalize_states: bool = False
    state_index: tuple[int, ...] | None = None
    reward_scale: float = 1.0
    reward_shift: float = 0.0
    env_id: str | None = None
    eval_every: int = 5000
    eval_episodes: int = 10
    log_every: int = 1000
    seed: int = 0

    def __post_init__(self):
        for name in ("value_hidden", "guide_hidden", "execute_hidden"):
            object.__setattr__(self, name, _hidden(getattr(self, name)))
        if self.state_index is not None:
            object.__setattr__(self, "state_index", _hidden(self.state_index))
        if self.n_steps < 0 or self.m_steps < 0:
            raise ValueError("step counts must be non-negative")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        if self.guide_objective not in GUIDE_OBJECTIVES:
            raise ValueError(f"guide_objective must be one of {GUIDE_OBJECTIVES}")
        if self.guide_objective == "eq6" and self.alpha <= 0:
            raise ValueError("the weighted guide objective needs alpha > 0")
        if self.alpha_mode not in ALPHA_MODES:
            raise ValueError(f"alpha_mode must be one of {ALPHA_MODES}")
        if self.log_every <= 0 or self.eval_every <= 0:
            raise ValueError("log_every and eval_every must be positive")

    @property
    def weight_alpha(self) -> float:
        """The divisor actually applied to residuals in the weighted objectives."""
        return self.alpha if self.alpha_mode == "divide" else 1.0 / self.alpha

    def replace(self, **overrides) -> "TrainConfig":
        return dataclasses.replace(self, **overrides)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp["train"] = {k: _fmt(v) for k, v in self.to_dict().items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str, section: str = "train") -> "TrainConfig":
        cp = configparser.ConfigParser()
        cp.read_string(text)
        if section not in cp:
            raise ValueError(f"config has no [{section}] section")
        return cls.from_strings(dict(cp[section]))

    @classmethod
    def from_strings(cls, values: dict[str, str], base: "TrainConfig | None" = None) -> "TrainConfig":
        """Build from string values (config files, CLI overrides) on top of ``base``."""
        base = cls() if base is None else base
        kinds = {f.name: f.type for f in dataclasses.fields(cls)}
        out = {}
        for key, raw in values.items():
            key = key.replace("-", "_")
            if key not in kinds:
                raise ValueError(f"unknown config key {key!r}")
            out[key] = _parse(kinds[key], raw)
        return base.replace(**out)


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(kind: str, raw: str):
    raw = str(raw).strip()
    if "None" in kind and raw.lower() in ("none", ""):
        return None
    if kind.startswith("bool"):
        if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {raw!r}")
        return raw.lower() in ("true", "1", "yes")
    if kind.startswith("int"):
        value = float(raw.replace("_", ""))
        if not value.is_integer():
            raise ValueError(f"not an integer: {raw!r}")
        return int(value)
    if kind.startswith("float"):
        return float(raw)
    if kind.startswith("tuple"):
        return _hidden(raw)
    return raw


# -- presets ---------------------------------------------------------------------

_TABLE4 = {
    "antmaze-umaze-v2": ("eq6", 0.9, 10.0, 1e-3),
    "antmaze-umaze-diverse-v2": ("eq6", 0.9, 10.0, 1e-3),
    "antmaze-medium-play-v2": ("eq6", 0.9, 10.0, 1e-4),
    "antmaze-medium-diverse-v2": ("eq6", 0.9, 10.0, 1e-4),
    "antmaze-large-play-v2": ("eq6", 0.9, 10.0, 1e-4),
    "antmaze-large-diverse-v2": ("eq6", 0.9, 10.0, 1e-4),
    "halfcheetah-medium-v2": ("eq6", 0.5, 3.0, 1e-3),
    "hopper-medium-v2": ("eq5", 0.7, 50.0, 1e-3),
    "walker2d-medium-v2": ("eq6", 0.5, 3.0, 1e-3),
    "halfcheetah-medium-replay-v2": ("eq6", 0.5, 3.0, 1e-3),
    "hopper-medium-replay-v2": ("eq5", 0.7, 50.0, 1e-3),
    "walker2d-medium-replay-v2": ("eq6", 0.5, 3.0, 1e-3),
    "halfcheetah-medium-expert-v2": ("eq6", 0.5, 3.0, 1e-3),
    "hopper-medium-expert-v2": ("eq5", 0.7, 5.0, 1e-3),
    "walker2d-medium-expert-v2": ("eq6", 0.5, 3.0, 1e-3),
}

_TABLE8 = {
    "antmaze-umaze-v2": (1.0, 1e-3),
    "antmaze-umaze-diverse-v2": (0.5, 1e-3),
    "antmaze-medium-play-v2": (0.1, 1e-4),
    "antmaze-medium-diverse-v2": (0.1, 1e-4),
    "antmaze-large-play-v2": (0.1, 1e-4),
    "antmaze-large-diverse-v2": (0.3, 1e-4),
}


def preset(name: str) -> TrainConfig:
    """Named hyperparameter sets: ``table3``, ``table4-<task>``, ``table8-<task>``, ``table7``."""
    base = TrainConfig()
    if name == "table3":
        return base
    if name == "table7":
        return base.replace(
            tau=0.9,
            alpha=10.0,
            value_lr=1e-4,
            guide_lr=1e-4,
            execute_lr=1e-4,
            value_hidden=(64, 64),
            guide_hidden=(64, 64),
            execute_hidden=(64, 64),
            guide_objective="eq6",
        )
    if name.startswith("table4-") and name[7:] in _TABLE4:
        obj, tau, alpha, lr = _TABLE4[name[7:]]
        return base.replace(guide_objective=obj, tau=tau, alpha=alpha, guide_lr=lr, execute_lr=lr)
    if name.startswith("table8-") and name[7:] in _TABLE8:
        tau, lr = _TABLE8[name[7:]]
        return base.replace(value_objective="sparse", tau=tau, alpha=10.0, guide_lr=lr, execute_lr=lr)
    raise ValueError(f"unknown preset {name!r}; known: {', '.join(preset_names())}")


def preset_names() -> list[str]:
    return ["table3", "table7"] + [f"table4-{k}" for k in _TABLE4] + [f"table8-{k}" for k in _TABLE8]


# -- evaluation -------------------------------------------------------------------


@dataclass(frozen=True)
class EpisodeResult:
    ret: float
    steps: int
    success: bool
    river: bool
    key_before_goal: bool


@dataclass
class EvalReport:
    episodes: list[EpisodeResult] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.episodes)

    def _col(self, name) -> np.ndarray:
        return np.array([getattr(e, name) for e in self.episodes], dtype=np.float64)

    @property
    def return_mean(self) -> float:
        return float(self._col("ret").mean()) if self.episodes else math.nan

    @property
    def return_std(self) -> float:
        return float(self._col("ret").std()) if self.episodes else math.nan

    @property
    def success_rate(self) -> float:
        return float(self._col("success").mean()) if self.episodes else math.nan

    @property
    def river_rate(self) -> float:
        return float(self._col("river").mean()) if self.episodes else math.nan

    @property
    def steps_mean(self) -> float:
        return float(self._col("steps").mean()) if self.episodes else math.nan

    @property
    def key_before_goal_rate(self) -> float:
        """Share of successful episodes whose first goal visit already held the key."""
        wins = [e for e in self.episodes if e.success]
        if not wins:
            return math.nan
        return sum(e.key_before_goal for e in wins) / len(wins)

    def to_csv(self) -> str:
        lines = ["episode,return,steps,success,river,key_before_goal"]
        for i, e in enumerate(self.episodes):
            lines.append(f"{i},{e.ret!r},{e.steps},{int(e.success)},{int(e.river)},{int(e.key_before_goal)}")
        return "\n".join(lines) + "\n"

    def summary(self) -> dict[str, float]:
        return {
            "episodes": len(self),
            "return_mean": self.return_mean,
            "return_std": self.return_std,
            "success_rate": self.success_rate,
            "river_rate": self.river_rate,
            "key_before_goal_rate": self.key_before_goal_rate,
            "steps_mean": self.steps_mean,
        }


def evaluate(env, agent, episodes: int, seed: int = 0) -> EvalReport:
    """Greedy rollouts of ``agent.act`` from the env's start distribution.

    Episodes advance in lockstep so the agent sees one batch per time step.
    """
    if episodes <= 0:
        return EvalReport()
    rng = np.random.default_rng(seed)
    states = np.stack([env.reset(rng) for _ in range(episodes)])
    ret = np.zeros(episodes)
    steps = np.zeros(episodes, dtype=np.int64)
    alive = np.ones(episodes, dtype=bool)
    success = np.zeros(episodes, dtype=bool)
    river = np.zeros(episodes, dtype=bool)
    first_goal: list[bool | None] = [None] * episodes
    for _ in range(env.horizon):
        idx = np.flatnonzero(alive)
        if len(idx) == 0:
            break
        actions = np.atleast_2d(agent.act(states[idx]))
        for j, i in enumerate(idx):
            nxt, r, terminal, info = env.transition(states[i], actions[j])
            states[i] = nxt
            ret[i] += r
            steps[i] += 1
            if first_goal[i] is None and (info.get("goal") or info.get("goal_without_key")):
                first_goal[i] = bool(info.get("goal"))
            river[i] |= bool(info.get("river"))
            if terminal:
                alive[i] = False
                success[i] = bool(info.get("goal"))
    return EvalReport(
        [
            EpisodeResult(float(ret[i]), int(steps[i]), bool(success[i]), bool(river[i]), bool(first_goal[i]))
            for i in range(episodes)
        ]
    )


# -- training ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    agent: PorAgent
    ensemble: ValueEnsemble
    metrics: list[dict[str, float | None]]
    behavior: BehaviorGuideDensity | None = None
    config: TrainConfig | None = None
    dataset_hash: str = ""

    def metrics_csv(self) -> str:
        return metrics_to_csv(self.metrics)


def metrics_to_csv(rows: Sequence[dict]) -> str:
    out = [",".join(METRIC_COLUMNS)]
    for row in rows:
        cells = []
        for c in METRIC_COLUMNS:
            v = row.get(c)
            cells.append("" if v is None else (str(v) if c == "step" else repr(float(v))))
        out.append(",".join(cells))
    return "\n".join(out) + "\n"


def _streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("value", "guide", "execute", "sample_g", "sample_pi", "behavior")
    kids = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(k) for n, k in zip(names, kids)}


def _action_bounds(config: TrainConfig, dataset: TrajectoryDataset, env):
    if env is not None:
        return env.action_low, env.action_high
    acts = dataset.actions[dataset.has_action]
    if len(acts) == 0:
        return np.full(dataset.act_dim, -np.inf), np.full(dataset.act_dim, np.inf)
    return acts.min(axis=0), acts.max(axis=0)


def _make_env(config: TrainConfig):
    if config.env_id is None:
        return None
    from porlab.envs import FourRoomEnv

    return FourRoomEnv(config.env_id)


def _state_scaling(*datasets: TrajectoryDataset) -> tuple[np.ndarray, np.ndarray]:
    """Mean and std over all (s, s') of the datasets; constant coordinates keep scale 1."""
    states = np.concatenate([x for d in datasets for x in (d.observations, d.next_observations)])
    std = states.std(axis=0)
    return states.mean(axis=0), np.where(std > 1e-6, std, 1.0)


def _normalize_inputs(config, dataset, exec_data, ensemble, guide, execute, frozen: bool) -> tuple | None:
    if not config.normalize_states:
        return None
    mean, std = _state_scaling(dataset)
    for net in ensemble.online + ensemble.targets + [guide.net]:
        net.set_input_normalization(mean, std)
    if not frozen:
        m, sd = _state_scaling(exec_data)
        idx = execute.state_index
        execute.net.set_input_normalization(
            np.concatenate([m[idx], np.zeros(len(idx))]), np.concatenate([sd[idx], sd[idx]])
        )
    return mean, std


def _shaped(batch: Batch, config: TrainConfig) -> Batch:
    if config.reward_scale == 1.0 and config.reward_shift == 0.0:
        return batch
    return batch._replace(rewards=config.reward_scale * batch.rewards + config.reward_shift)


class _Meter:
    def __init__(self):
        self.sums: dict[str, float] = {}
        self.counts: dict[str, int] = {}

    def add(self, name: str, value: float) -> None:
        self.sums[name] = self.sums.get(name, 0.0) + value
        self.counts[name] = self.counts.get(name, 0) + 1

    def flush(self) -> dict[str, float]:
        out = {k: self.sums[k] / self.counts[k] for k in self.sums}
        self.sums.clear()
        self.counts.clear()
        return out


def train(
    dataset: TrajectoryDataset,
    config: TrainConfig,
    *,
    execute_dataset: TrajectoryDataset | None = None,
    frozen_execute: ExecutePolicy | None = None,
    run_dir: str | Path | None = None,
    env=None,
) -> TrainResult:
    """N interleaved value/guide steps on ``dataset``, then M execute steps on
    ``execute_dataset`` (default: ``dataset``) unless ``frozen_execute`` is given."""
    if dataset.n_transitions == 0:
        raise ValueError("cannot train on an empty dataset")
    exec_data = dataset if execute_dataset is None else execute_dataset
    if frozen_execute is None and config.m_steps > 0:
        exec_data.require_actions()
    if execute_dataset is not None and execute_dataset.obs_dim != dataset.obs_dim:
        raise ValueError("execute dataset state dimension differs")
    env = _make_env(config) if env is None else env
    rngs = _streams(config.seed)
    obs_dim = dataset.obs_dim
    act_dim = exec_data.act_dim if frozen_execute is None else frozen_execute.act_dim

    ensemble = ValueEnsemble(
        obs_dim,
        config.value_hidden,
        config.tau,
        config.gamma,
        config.polyak,
        config.value_objective,
        config.value_lr,
        config.value_layer_norm,
        rngs["value"],
    )
    guide = GuidePolicy(obs_dim, config.guide_hidden, rngs["guide"])
    if frozen_execute is not None:
        if frozen_execute.obs_dim != obs_dim:
            raise ValueError("frozen execute-policy state dimension differs from the dataset")
        execute = frozen_execute
    else:
        execute = ExecutePolicy(obs_dim, act_dim, config.execute_hidden, rngs["execute"], config.state_index)
    low, high = _action_bounds(config, exec_data, env)
    agent = PorAgent(guide, execute, low, high)
    scaling = _normalize_inputs(config, dataset, exec_data, ensemble, guide, execute, frozen_execute is not None)

    behavior = None
    if config.guide_objective == "eq5" and config.n_steps > 0 and config.alpha > 0:
        behavior = fit_behavior_density(
            dataset,
            config.behavior_steps,
            config.guide_hidden,
            config.batch_size,
            config.guide_lr,
            rngs["behavior"],
            normalization=scaling,
        )
    guide_opt = Adam(guide.net, config.guide_lr)
    exec_opt = Adam(execute.net, config.execute_lr)

    metrics: list[dict] = []
    meter = _Meter()
    run = Path(run_dir) if run_dir is not None else None
    dataset_hash = dataset.content_hash()
    if run is not None:
        run.mkdir(parents=True, exist_ok=True)
        (run / "config.ini").write_text(config.to_ini())
        (run / "dataset_hash").write_text(dataset_hash + "\n")

    def emit(step: int, can_eval: bool, last: bool):
        due = step % config.log_every == 0 or step % config.eval_every == 0 or last
        if not due:
            return
        row = {"step": step, **meter.flush()}
        if can_eval and env is not None and (step % config.eval_every == 0 or last):
            rep = evaluate(env, agent, config.eval_episodes, seed=config.seed * 1_000_003 + step)
            row.update(
                eval_return_mean=rep.return_mean,
                eval_return_std=rep.return_std,
                eval_success_rate=rep.success_rate,
            )
        metrics.append(row)

    n, m = config.n_steps, config.m_steps
    try:
        sample = rngs["sample_g"]
        for t in range(1, n + 1):
            idx = sample.integers(dataset.n_transitions, size=config.batch_size)
            batch = _shaped(batch_from(dataset, idx), config)
            meter.add("loss_v", ensemble.update(batch))
            ensemble.update_targets()
            if config.guide_objective == "eq6":
                loss_g, grads = guide_loss_weighted(batch, guide, ensemble, config.weight_alpha)
            else:
                noise = None if config.deterministic_guide else sample.standard_normal((config.batch_size, obs_dim))
                loss_g, grads = guide_loss_explicit(batch, guide, ensemble, behavior, config.alpha, noise)
            guide_opt.step(guide.net, grads)
            meter.add("loss_g", loss_g)
            emit(t, frozen_execute is not None or m == 0, t == n)
        if frozen_execute is None:
            sample = rngs["sample_pi"]
            for t in range(1, m + 1):
                idx = sample.integers(exec_data.n_transitions, size=config.batch_size)
                batch = batch_from(exec_data, idx)
                weights = None
                if config.execute_weighted:
                    weights = residual_weights(ensemble, _shaped(batch, config), config.weight_alpha)
                loss_pi, grads = execute_loss(batch, execute, weights)
                exec_opt.step(execute.net, grads)
                meter.add("loss_pi", loss_pi)
                emit(n + t, True, t == m)
    except FloatingPointError as exc:
        if run is not None:
            save_run(run, agent, ensemble, metrics)
        raise TrainingDiverged(f"training diverged: {exc}; last good parameters saved") from exc

    result = TrainResult(agent, ensemble, metrics, behavior, config, dataset_hash)
    if run is not None:
        save_run(run, agent, ensemble, metrics)
    return result


# -- persistence --------------------------------------------------------------------


def save_run(run: Path, agent: PorAgent, ensemble: ValueEnsemble, metrics) -> None:
    run = Path(run)
    run.mkdir(parents=True, exist_ok=True)
    (run / "value.ckpt").write_bytes(approx.bundle_to_bytes(ensemble.online + ensemble.targets))
    (run / "guide.ckpt").write_bytes(approx.to_bytes(agent.guide.net))
    (run / "execute.ckpt").write_bytes(approx.to_bytes(agent.execute.net))
    (run / "metrics.csv").write_text(metrics_to_csv(metrics))


def load_agent(run: str | Path) -> tuple[PorAgent, TrainConfig]:
    run = Path(run)
    config = TrainConfig.from_ini((run / "config.ini").read_text())
    gnet = approx.from_bytes((run / "guide.ckpt").read_bytes())
    enet = approx.from_bytes((run / "execute.ckpt").read_bytes())
    guide = GuidePolicy.__new__(GuidePolicy)
    guide.obs_dim, guide.net = gnet.in_dim, gnet
    execute = ExecutePolicy.__new__(ExecutePolicy)
    execute.obs_dim = gnet.in_dim
    execute.act_dim = enet.out_dim
    execute.state_index = (
        np.arange(gnet.in_dim) if config.state_index is None else np.asarray(config.state_index, dtype=np.int64)
    )
    execute.net = enet
    env = _make_env(config)
    if env is not None:
        low, high = env.action_low, env.action_high
    else:
        low, high = np.full(enet.out_dim, -np.inf), np.full(enet.out_dim, np.inf)
    return PorAgent(guide, execute, low, high), config


def file_digest(path: str | Path) -> str:
    import hashlib

    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- experiment drivers ----------------------------------------------------------------


def transfer(old_agent: PorAgent, dataset: TrajectoryDataset, config: TrainConfig, **kwargs) -> TrainResult:
    """Retrain value and guide on a new task's data; reuse the execute-policy as is."""
    if dataset.obs_dim != old_agent.execute.obs_dim:
        raise ValueError(
            f"state dimension {dataset.obs_dim} does not match the execute-policy's {old_agent.execute.obs_dim}"
        )
    before = old_agent.execute.net.digest()
    result = train(dataset, config, frozen_execute=old_agent.execute, **kwargs)
    assert result.agent.execute.net.digest() == before, "frozen execute-policy changed"
    return result


def mix_train(d_e: TrajectoryDataset, d_o: TrajectoryDataset, config: TrainConfig, **kwargs) -> TrainResult:
    """Execute-policy from D_e only; value and guide on D_e together with D_o."""
    d_e.require_actions()
    combined = d_e if d_o.n_transitions == 0 else concat([d_e, d_o])
    return train(combined, config, execute_dataset=d_e, **kwargs)


def main_train(d_e: TrajectoryDataset, config: TrainConfig, **kwargs) -> TrainResult:
    return train(d_e, config, **kwargs)


def more_train(d_e: TrajectoryDataset, d_o: TrajectoryDataset, config: TrainConfig, **kwargs) -> TrainResult:
    """Every stage on D_e together with D_o; fails fast when D_o lacks actions."""
    combined = concat([d_e, d_o])
    combined.require_actions()
    return train(combined, config, **kwargs)
