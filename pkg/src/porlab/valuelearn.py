"""State-value learning with expectile or sparse objectives and clipped double V."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from porlab.approx import Adam, Mlp, polyak_update

OBJECTIVES = ("expectile", "sparse")


class Batch(NamedTuple):
    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_observations: np.ndarray
    dones: np.ndarray


def batch_from(dataset, idx: np.ndarray) -> Batch:
    return Batch(
        dataset.observations[idx],
        dataset.actions[idx],
        dataset.rewards[idx],
        dataset.next_observations[idx],
        dataset.dones[idx].astype(np.float64),
    )


def expectile_residual_loss(u, tau: float):
    """|tau - 1(u < 0)| * u^2, elementwise."""
    u = np.asarray(u, dtype=np.float64)
    return np.abs(tau - (u < 0)) * u * u


def expectile_residual_grad(u, tau: float):
    u = np.asarray(u, dtype=np.float64)
    return 2.0 * np.abs(tau - (u < 0)) * u


def sparse_value_loss(u, v_s, tau: float):
    """1(1 + u/2tau > 0) (1 + u/2tau)^2 + v_s / tau, elementwise."""
    z = 1.0 + np.asarray(u, dtype=np.float64) / (2.0 * tau)
    return np.where(z > 0, z * z, 0.0) + np.asarray(v_s, dtype=np.float64) / tau


class ValueEnsemble:
    """Twin state-value networks with Polyak-averaged target copies."""

    def __init__(
        self,
        obs_dim: int,
        hidden=(256, 256),
        tau: float = 0.7,
        gamma: float = 0.99,
        polyak: float = 0.05,
        objective: str = "expectile",
        lr: float = 1e-4,
        layer_norm: bool = False,
        rng: np.random.Generator | None = None,
    ):
        if objective not in OBJECTIVES:
            raise ValueError(f"unknown value objective {objective!r}")
        if objective == "expectile" and not 0.0 < tau < 1.0:
            raise ValueError("expectile tau must lie in (0, 1)")
        if objective == "sparse" and tau <= 0.0:
            raise ValueError("sparse tau must be positive")
        rng = np.random.default_rng() if rng is None else rng
        sizes = [obs_dim, *hidden, 1]
        self.online = [Mlp(sizes, "scalar", layer_norm, rng) for _ in range(2)]
        self.targets = [m.copy() for m in self.online]
        self.opts = [Adam(m, lr) for m in self.online]
        self.tau = float(tau)
        self.gamma = float(gamma)
        self.polyak = float(polyak)
        self.objective = objective

    def value(self, s) -> np.ndarray:
        return np.minimum(self.online[0](s), self.online[1](s))

    def target_value(self, s) -> np.ndarray:
        return np.minimum(self.targets[0](s), self.targets[1](s))

    def td_target(self, batch: Batch) -> np.ndarray:
        """r + gamma * min target V(s'), with bootstrapping cut at terminals."""
        return batch.rewards + self.gamma * (1.0 - batch.dones) * self.target_value(batch.next_observations)

    def residual(self, batch: Batch) -> np.ndarray:
        """u = r + gamma V'(s') - V(s) using the clipped ensembles."""
        return self.td_target(batch) - self.value(batch.observations)

    def loss_and_grads(self, batch: Batch):
        """Batch-mean loss summed over both online networks, and their gradients."""
        target = self.td_target(batch)
        n = len(target)
        total = 0.0
        grads = []
        for net in self.online:
            v, tape = net.record(batch.observations)
            u = target - v
            if self.objective == "expectile":
                loss = expectile_residual_loss(u, self.tau).mean()
                d_v = -expectile_residual_grad(u, self.tau) / n
            else:
                z = 1.0 + u / (2.0 * self.tau)
                loss = sparse_value_loss(u, v, self.tau).mean()
                d_v = (np.where(z > 0, -z / self.tau, 0.0) + 1.0 / self.tau) / n
            g, _ = net.backward(tape, d_v)
            total += float(loss)
            grads.append(g)
        return total, grads

    def update(self, batch: Batch) -> float:
        loss, grads = self.loss_and_grads(batch)
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite value loss {loss}")
        for net, opt, g in zip(self.online, self.opts, grads):
            opt.step(net, g)
        return loss

    def update_targets(self) -> None:
        for t, o in zip(self.targets, self.online):
            polyak_update(t, o, self.polyak)

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for m in self.online + self.targets:
            h.update(m.digest().encode())
        return h.hexdigest()


def value_update(ensemble: ValueEnsemble, batch: Batch, polyak: bool = True) -> float:
    """One Adam step on both online networks followed by the target update."""
    loss = ensemble.update(batch)
    if polyak:
        ensemble.update_targets()
    return loss
