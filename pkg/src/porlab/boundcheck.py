"""Empirical check of the single-step action-gap bound on a linear MDP with
known inverse dynamics and a known optimal action field."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from porlab.data import TrajectoryDataset, Transition


class SyntheticSmoothMdp:
    """s' = s + B a with quadratic cost to a goal.

    The reward is ``-(|s - goal|^2 + rho |a|^2)``, so the optimal policy is the
    discounted LQR feedback ``a*(s) = -K (s - goal)``. The inverse transition
    operator is ``P(s, s') = B^+ (s' - s)``, Lipschitz in s' with constant
    ``|B^+|_2``.
    """

    def __init__(
        self,
        B=None,
        goal=None,
        rho: float = 0.1,
        gamma: float = 0.99,
        horizon: int = 40,
        start_scale: float = 2.0,
    ):
        self.B = np.array([[1.0, 0.3], [-0.2, 0.8]]) if B is None else np.asarray(B, dtype=np.float64)
        n, m = self.B.shape
        if np.linalg.matrix_rank(self.B) < m:
            raise ValueError("B must have full column rank")
        self.obs_dim, self.act_dim = n, m
        self.goal = np.zeros(n) if goal is None else np.asarray(goal, dtype=np.float64)
        self.rho = float(rho)
        self.gamma = float(gamma)
        self.horizon = int(horizon)
        self.start_scale = float(start_scale)
        self.B_pinv = np.linalg.pinv(self.B)
        self.K = self._lqr_gain()
        self.action_low = np.full(m, -np.inf)
        self.action_high = np.full(m, np.inf)

    def _lqr_gain(self) -> np.ndarray:
        n, m = self.B.shape
        Q, R, B, g = np.eye(n), self.rho * np.eye(m), self.B, self.gamma
        P = Q.copy()
        for _ in range(10_000):
            S = R + g * B.T @ P @ B
            P_new = Q + g * P - g * g * P @ B @ np.linalg.solve(S, B.T @ P)
            if np.max(np.abs(P_new - P)) < 1e-13:
                P = P_new
                break
            P = P_new
        return g * np.linalg.solve(R + g * B.T @ P @ B, B.T @ P)

    @property
    def inverse_lipschitz(self) -> float:
        return float(np.linalg.norm(self.B_pinv, 2))

    @property
    def min_step_gain(self) -> float:
        """sigma_min(B): ``|s' - s| >= min_step_gain * |a|`` (non-laziness)."""
        return float(np.linalg.svd(self.B, compute_uv=False)[-1])

    def dynamics(self, s, a) -> np.ndarray:
        return np.asarray(s, dtype=np.float64) + np.asarray(a, dtype=np.float64) @ self.B.T

    def inverse(self, s, s_next) -> np.ndarray:
        return (np.asarray(s_next, dtype=np.float64) - np.asarray(s, dtype=np.float64)) @ self.B_pinv.T

    def optimal_action(self, s) -> np.ndarray:
        return -(np.asarray(s, dtype=np.float64) - self.goal) @ self.K.T

    def reward(self, s, a) -> np.ndarray:
        d = np.asarray(s, dtype=np.float64) - self.goal
        a = np.asarray(a, dtype=np.float64)
        return -(np.sum(d * d, axis=-1) + self.rho * np.sum(a * a, axis=-1))

    # env-style interface so trainer.evaluate can roll agents out
    def reset(self, rng=None, position=None) -> np.ndarray:
        if position is not None:
            return np.asarray(position, dtype=np.float64)
        rng = np.random.default_rng() if rng is None else rng
        return self.goal + rng.uniform(-self.start_scale, self.start_scale, self.obs_dim)

    def transition(self, s, a):
        return self.dynamics(s, a), float(self.reward(s, a)), False, {}

    def collect(
        self, n_transitions: int, seed: int = 0, noise: float = 0.3, gain_scale: float = 0.5
    ) -> TrajectoryDataset:
        """Suboptimal behavior: a damped optimal gain plus Gaussian action noise."""
        if n_transitions <= 0:
            raise ValueError("n_transitions must be positive")
        rng = np.random.default_rng(seed)
        trajs = []
        left = n_transitions
        while left > 0:
            s = self.reset(rng)
            traj = []
            for _ in range(min(self.horizon, left)):
                a = gain_scale * self.optimal_action(s) + rng.normal(0.0, noise, self.act_dim)
                s2 = self.dynamics(s, a)
                traj.append(Transition(s, a, float(self.reward(s, a)), s2, False))
                s = s2
            left -= len(traj)
            trajs.append(traj)
        return TrajectoryDataset.from_trajectories(
            trajs, self.obs_dim, self.act_dim, metadata={"env_id": "synthetic-linear", "seed": seed}
        )


def synthetic_config(seed: int = 0, steps: int = 5000):
    """Small-network training config for the linear MDP (trains in well under a minute)."""
    from porlab.trainer import TrainConfig

    return TrainConfig(
        n_steps=steps,
        m_steps=steps,
        tau=0.7,
        alpha=10.0,
        value_lr=1e-3,
        guide_lr=1e-3,
        execute_lr=1e-3,
        value_hidden=(64, 64),
        guide_hidden=(64, 64),
        execute_hidden=(64, 64),
        eval_every=steps,
        log_every=max(steps // 10, 1),
        seed=seed,
    )


def estimate_lipschitz(fn, inputs, pair_count: int = 10_000, rng: np.random.Generator | None = None) -> float:
    """Largest ``|f(x1) - f(x2)| / |x1 - x2|`` over sampled pairs.

    Every sample is paired with its nearest neighbor and the rest of the
    budget goes to uniformly random pairs. The result is a lower bound on the
    true constant. Coincident pairs are skipped.
    """
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = len(x)
    if n < 2:
        raise ValueError("need at least two samples")
    y = np.asarray(fn(x), dtype=np.float64).reshape(n, -1)
    rng = np.random.default_rng(0) if rng is None else rng
    if n * (n - 1) // 2 <= pair_count:
        i, j = np.triu_indices(n, k=1)
    else:
        nn = _nearest_neighbors(x)
        extra = max(pair_count - n, 0)
        i = np.concatenate([np.arange(n), rng.integers(n, size=extra)])
        j = np.concatenate([nn, rng.integers(n, size=extra)])
    dx = np.linalg.norm(x[i] - x[j], axis=1)
    dy = np.linalg.norm(y[i] - y[j], axis=1)
    keep = dx > 0
    if not np.any(keep):
        return 0.0
    return float(np.max(dy[keep] / dx[keep]))


def _nearest_neighbors(x: np.ndarray, chunk: int = 512) -> np.ndarray:
    sq = np.sum(x * x, axis=1)
    out = np.empty(len(x), dtype=np.int64)
    for lo in range(0, len(x), chunk):
        d = sq[lo : lo + chunk, None] - 2.0 * x[lo : lo + chunk] @ x.T + sq[None, :]
        idx = np.arange(lo, min(lo + chunk, len(x)))
        d[idx - lo, idx] = np.inf
        d[d <= 0] = np.inf  # duplicates carry no information
        out[lo : lo + chunk] = np.argmin(d, axis=1)
    return out


@dataclass
class BoundReport:
    """Per-sample terms of the bound and the constants used.

    ``decomposition`` holds the four triangle terms; ``l1``/``l2``/``l3`` are
    the bound's three summands with the raw (unslacked) estimates.
    """

    lhs: np.ndarray
    l1: np.ndarray
    l2: np.ndarray
    l3: np.ndarray
    decomposition: np.ndarray
    L1: float
    L2: float
    epsilon: float
    slack: float
    L1_true: float
    L2_closure: float
    notes: list[str] = field(default_factory=list)

    @property
    def rhs(self) -> np.ndarray:
        return self.l1 + self.l2 + self.l3

    @property
    def rhs_slack(self) -> np.ndarray:
        return self.slack * self.l1 + self.l2 + self.l3

    @property
    def violations(self) -> np.ndarray:
        return self.lhs > self.rhs_slack

    @property
    def violation_rate(self) -> float:
        return float(np.mean(self.violations)) if len(self.lhs) else math.nan

    @property
    def decomposition_holds(self) -> np.ndarray:
        tol = 1e-12 * (1.0 + self.decomposition.sum(axis=1))
        return self.lhs <= self.decomposition.sum(axis=1) + tol

    @property
    def episode_gap_bound(self) -> float:
        """sup of the per-step bound; multiply by a horizon for the episodic form."""
        return float(np.max(self.rhs_slack)) if len(self.lhs) else math.nan

    def to_csv(self) -> str:
        lines = ["sample,lhs,l1,l2,l3,rhs,rhs_slack,t_pi_shift,t_fit,t_inverse,t_guide,violation"]
        for k in range(len(self.lhs)):
            t = self.decomposition[k]
            lines.append(
                f"{k},{self.lhs[k]!r},{self.l1[k]!r},{self.l2[k]!r},{self.l3[k]!r},{self.rhs[k]!r},"
                f"{self.rhs_slack[k]!r},{t[0]!r},{t[1]!r},{t[2]!r},{t[3]!r},{int(self.violations[k])}"
            )
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        rows = [
            ("samples", len(self.lhs)),
            ("L1_estimate", self.L1),
            ("L1_true", self.L1_true),
            ("L2_estimate", self.L2),
            ("L2_closure", self.L2_closure),
            ("epsilon", self.epsilon),
            ("slack", self.slack),
            ("decomposition_rate", float(np.mean(self.decomposition_holds))),
            ("violation_rate", self.violation_rate),
            ("episode_gap_bound_per_step", self.episode_gap_bound),
        ]
        body = "\n".join(f"  {k}: {v}" for k, v in rows)
        notes = "".join(f"\n  note: {n}" for n in self.notes)
        return "{\n" + body + notes + "\n}"


def verify_bound(
    mdp: SyntheticSmoothMdp,
    agent,
    dataset: TrajectoryDataset,
    sample_count: int = 1000,
    slack: float = 1.5,
    pair_count: int = 20_000,
    seed: int = 0,
) -> BoundReport:
    """Evaluate the bound's terms at ``sample_count`` dataset transitions.

    ``agent`` needs ``guide.mean(s)`` and ``execute.mean(s, s')``.
    """
    dataset.require_actions()
    rng = np.random.default_rng(seed)
    S, A, S2 = dataset.observations, dataset.actions, dataset.next_observations
    pi_data = agent.execute.mean(S, S2)
    epsilon = float(np.max(np.linalg.norm(pi_data - A, axis=1)))

    idx = rng.choice(dataset.n_transitions, size=min(sample_count, dataset.n_transitions), replace=False)
    s, a, s2 = S[idx], A[idx], S2[idx]
    g = agent.guide.mean(s)
    pi_g = agent.execute.mean(s, g)
    pi_s2 = pi_data[idx]
    a_g = mdp.inverse(s, g)
    a_star = mdp.optimal_action(s)

    lhs = np.linalg.norm(pi_g - a_star, axis=1)
    decomposition = np.stack(
        [
            np.linalg.norm(pi_g - pi_s2, axis=1),
            np.linalg.norm(pi_s2 - a, axis=1),
            np.linalg.norm(a - a_g, axis=1),
            np.linalg.norm(a_g - a_star, axis=1),
        ],
        axis=1,
    )
    gap = np.linalg.norm(g - s2, axis=1)

    # L1: the inverse operator in its second argument, at the sampled states
    L1 = _pairwise_in_second(mdp.inverse, s, s2, g, rng, pair_count)
    L2 = _pairwise_in_second(lambda st, x: agent.execute.mean(st, x), s, s2, g, rng, pair_count)
    moved = gap > 0
    L2_closure = float(np.max(decomposition[moved, 0] / gap[moved])) if np.any(moved) else 0.0

    report = BoundReport(
        lhs=lhs,
        l1=(L1 + L2) * gap,
        l2=decomposition[:, 3],
        l3=np.full(len(idx), epsilon),
        decomposition=decomposition,
        L1=L1,
        L2=L2,
        epsilon=epsilon,
        slack=slack,
        L1_true=mdp.inverse_lipschitz,
        L2_closure=L2_closure,
        notes=["Lipschitz constants are sampled lower bounds; the slack multiplies them."],
    )
    return report


def _pairwise_in_second(fn, s, s2, g, rng, pair_count: int) -> float:
    """Lipschitz estimate of ``x -> fn(s, x)`` with ``s`` held fixed per pair.

    Pairs are (s', g(s)) at each sample, plus perturbations of both around
    the sample and random pairs of successors from other samples.
    """
    n = len(s)
    per = max(pair_count // max(n, 1), 3)
    ratios = []
    both = np.concatenate([s, s])
    xa = np.concatenate([s2, s2])
    xb = np.concatenate([g, s2 + (g - s2) * 0.5])
    for _ in range(per):
        j = rng.integers(n, size=n)
        scale = np.linalg.norm(s2 - s, axis=1, keepdims=True) + 1e-3
        pert = s2 + rng.normal(size=s2.shape) * scale
        both = np.concatenate([both, s, s])
        xa = np.concatenate([xa, s2, g])
        xb = np.concatenate([xb, pert, s2[j] - s[j] + s])
    d = np.linalg.norm(xa - xb, axis=1)
    keep = d > 0
    fa = fn(both[keep], xa[keep])
    fb = fn(both[keep], xb[keep])
    return float(np.max(np.linalg.norm(fa - fb, axis=1) / d[keep])) if np.any(keep) else 0.0
