"""Guide-policy, behavior next-state density, execute-policy and their composition."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from porlab.approx import Adam, Mlp, gaussian_log_prob, gaussian_log_prob_grads
from porlab.data import ActionFreeError, TrajectoryDataset
from porlab.valuelearn import Batch, ValueEnsemble, batch_from

WEIGHT_CLIP = 100.0


class NextStateModel:
    """Gaussian over the next state, mean = s + f(s).

    Shared by the guide-policy and the behavior density; predicting the
    displacement keeps the network output small for small steps.
    """

    def __init__(self, obs_dim: int, hidden=(256, 256), rng=None, layer_norm: bool = False, log_std_init: float = -1.0):
        self.obs_dim = obs_dim
        self.net = Mlp([obs_dim, *hidden, obs_dim], "gaussian", layer_norm, rng, log_std_init=log_std_init)

    def dist(self, s):
        delta, log_std = self.net(s)
        return np.asarray(s, dtype=np.float64) + delta, log_std

    def mean(self, s) -> np.ndarray:
        return self.dist(s)[0]

    def log_prob(self, s, s_next) -> np.ndarray:
        mean, log_std = self.dist(s)
        return gaussian_log_prob(mean, log_std, s_next)

    def nll_and_grads(self, s, s_next, weights=None):
        """Weighted batch-mean negative log-likelihood and its gradients."""
        (delta, log_std), tape = self.net.record(s)
        mean = s + delta
        n = len(s)
        w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
        lp = gaussian_log_prob(mean, log_std, s_next)
        d_mean, d_ls, _ = gaussian_log_prob_grads(mean, log_std, s_next)
        coef = (-w / n)[:, None]
        grads, _ = self.net.backward(tape, (coef * d_mean, coef * d_ls))
        return float(-(w * lp).mean()), grads


class GuidePolicy(NextStateModel):
    pass


class BehaviorGuideDensity(NextStateModel):
    pass


class ExecutePolicy:
    """Gaussian pi(a | s, s') over actions.

    The network sees (s[idx], s'[idx] - s[idx]) where ``idx`` selects the
    state coordinates that actions control (all of them by default).
    """

    def __init__(
        self,
        obs_dim: int,
        act_dim: int,
        hidden=(1024, 1024),
        rng=None,
        state_index: Sequence[int] | None = None,
        layer_norm: bool = False,
    ):
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.state_index = np.arange(obs_dim) if state_index is None else np.asarray(state_index, dtype=np.int64)
        k = len(self.state_index)
        self.net = Mlp([2 * k, *hidden, act_dim], "gaussian", layer_norm, rng, log_std_init=-1.0)

    def features(self, s, s_next) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)[..., self.state_index]
        s_next = np.asarray(s_next, dtype=np.float64)[..., self.state_index]
        return np.concatenate([s, s_next - s], axis=-1)

    def dist(self, s, s_next):
        return self.net(self.features(s, s_next))

    def mean(self, s, s_next) -> np.ndarray:
        return self.dist(s, s_next)[0]

    def log_prob(self, s, s_next, a) -> np.ndarray:
        mean, log_std = self.dist(s, s_next)
        return gaussian_log_prob(mean, log_std, a)


@dataclass
class PorAgent:
    guide: GuidePolicy
    execute: ExecutePolicy
    action_low: np.ndarray
    action_high: np.ndarray

    def act(self, s) -> np.ndarray:
        """a = argmax_a pi(a | s, g(s)): the execute mean at the guide mean."""
        g = self.guide.mean(s)
        a = self.execute.mean(s, g)
        return np.clip(a, self.action_low, self.action_high)


act = PorAgent.act


# -- guide objectives ------------------------------------------------------------


def residual_weights(ensemble: ValueEnsemble, batch: Batch, alpha: float, clip: float = WEIGHT_CLIP) -> np.ndarray:
    """min(exp(u / alpha), clip) with u = r + gamma V'(s') - V(s); no gradient."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    u = ensemble.residual(batch)
    return np.minimum(np.exp(np.minimum(u / alpha, np.log(clip))), clip)


def guide_loss_weighted(batch: Batch, guide: GuidePolicy, ensemble: ValueEnsemble, alpha: float, clip: float = WEIGHT_CLIP):
    """-mean[ w * log g(s'|s) ] with residual weights held constant."""
    w = residual_weights(ensemble, batch, alpha, clip)
    return guide.nll_and_grads(batch.observations, batch.next_observations, w)


def _min_value_and_input_grad(ensemble: ValueEnsemble, x: np.ndarray, d_out: np.ndarray):
    """min(V1, V2)(x) and d/dx of sum(d_out * min(V1, V2)(x))."""
    (v1, t1), (v2, t2) = (net.record(x) for net in ensemble.online)
    pick = v1 <= v2
    _, gx1 = ensemble.online[0].backward(t1, np.where(pick, d_out, 0.0))
    _, gx2 = ensemble.online[1].backward(t2, np.where(pick, 0.0, d_out))
    return np.where(pick, v1, v2), gx1 + gx2


def guide_loss_explicit(
    batch: Batch,
    guide: GuidePolicy,
    ensemble: ValueEnsemble,
    behavior: BehaviorGuideDensity | None,
    alpha: float,
    noise: np.ndarray | None = None,
):
    """-mean[ V(s~) + alpha log g_mu(s~|s) ] for reparameterized s~ ~ g(s).

    ``noise`` holds the standard-normal draws; ``None`` uses the guide mean.
    """
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    s = batch.observations
    n = len(s)
    (delta, log_std), tape = guide.net.record(s)
    std = np.exp(log_std)
    eps = np.zeros_like(delta) if noise is None else noise
    sample = s + delta + std * eps
    coef = -1.0 / n
    value, d_sample = _min_value_and_input_grad(ensemble, sample, np.full(n, coef))
    objective = value
    if alpha > 0:
        if behavior is None:
            raise ValueError("explicit guide objective needs a behavior density")
        mu_mean, mu_log_std = behavior.dist(s)
        objective = objective + alpha * gaussian_log_prob(mu_mean, mu_log_std, sample)
        _, _, d_x = gaussian_log_prob_grads(mu_mean, mu_log_std, sample)
        d_sample = d_sample + coef * alpha * d_x
    d_log_std = (d_sample * std * eps).sum(axis=0)
    grads, _ = guide.net.backward(tape, (d_sample, d_log_std))
    return float(-objective.mean()), grads


# -- execute objective --------------------------------------------------------------


def execute_loss(batch: Batch, policy: ExecutePolicy, weights=None):
    """-(weighted) mean log pi(a | s, s') and gradients."""
    if np.any(np.isnan(batch.actions)):
        raise ActionFreeError("execute-policy training needs actions")
    x = policy.features(batch.observations, batch.next_observations)
    (mean, log_std), tape = policy.net.record(x)
    n = len(x)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    lp = gaussian_log_prob(mean, log_std, batch.actions)
    d_mean, d_ls, _ = gaussian_log_prob_grads(mean, log_std, batch.actions)
    coef = (-w / n)[:, None]
    grads, _ = policy.net.backward(tape, (coef * d_mean, coef * d_ls))
    return float(-(w * lp).mean()), grads


# -- behavior density -------------------------------------------------------------------


def fit_behavior_density(
    dataset: TrajectoryDataset,
    steps: int = 5000,
    hidden=(256, 256),
    batch_size: int = 256,
    lr: float = 1e-3,
    rng: np.random.Generator | None = None,
    normalization: tuple[np.ndarray, np.ndarray] | None = None,
) -> BehaviorGuideDensity:
    """Maximum-likelihood fit of p(s' | s) on the dataset transitions.

    ``normalization`` is an optional (shift, scale) for the network input.
    """
    if dataset.n_transitions == 0:
        raise ValueError("cannot fit a density on an empty dataset")
    rng = np.random.default_rng(0) if rng is None else rng
    model = BehaviorGuideDensity(dataset.obs_dim, hidden, rng)
    if normalization is not None:
        model.net.set_input_normalization(*normalization)
    opt = Adam(model.net, lr)
    for _ in range(steps):
        idx = rng.integers(dataset.n_transitions, size=batch_size)
        _, grads = model.nll_and_grads(dataset.observations[idx], dataset.next_observations[idx])
        opt.step(model.net, grads)
    return model


def fit_model(model, opt: Adam, loss_fn, dataset: TrajectoryDataset, steps: int, batch_size: int, rng) -> list[float]:
    """Generic minibatch loop: ``loss_fn(batch) -> (loss, grads)``."""
    losses = []
    for _ in range(steps):
        idx = rng.integers(dataset.n_transitions, size=batch_size)
        loss, grads = loss_fn(batch_from(dataset, idx))
        opt.step(model, grads)
        losses.append(loss)
    return losses
