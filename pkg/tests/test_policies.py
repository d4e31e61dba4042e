import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from porlab.approx import Adam, gaussian_log_prob
from porlab.data import ActionFreeError, TrajectoryDataset, Transition
from porlab.policies import (
    WEIGHT_CLIP,
    BehaviorGuideDensity,
    ExecutePolicy,
    GuidePolicy,
    PorAgent,
    execute_loss,
    fit_behavior_density,
    fit_model,
    guide_loss_explicit,
    guide_loss_weighted,
    residual_weights,
)
from porlab.valuelearn import Batch, ValueEnsemble, batch_from


def one_step_dataset(S, A, S2, rewards=None):
    rewards = np.zeros(len(S)) if rewards is None else rewards
    trajs = [[Transition(s, a, float(r), s2, True)] for s, a, s2, r in zip(S, A, S2, rewards)]
    return TrajectoryDataset.from_trajectories(trajs, S.shape[1], A.shape[1])


def flat_ensemble(obs_dim, rng, value=0.0):
    ens = ValueEnsemble(obs_dim, (4,), gamma=1.0, rng=rng)
    for m in ens.online + ens.targets:
        for p in m.params:
            p[...] = 0.0
        m.params[-1][...] = value
    return ens


@pytest.fixture(scope="module")
def inverse_dynamics():
    """Execute-policy trained on a = s' - s over the unit square."""
    rng = np.random.default_rng(0)
    S = rng.uniform(-1, 1, (2000, 2))
    A = rng.uniform(-0.1, 0.1, (2000, 2))
    d = one_step_dataset(S, A, S + A)
    pol = ExecutePolicy(2, 2, (32, 32), rng)
    fit_model(pol.net, Adam(pol.net, 3e-3), lambda b: execute_loss(b, pol), d, 3000, 64, rng)
    return pol


def unit_grid():
    g = np.stack(np.meshgrid(np.linspace(-0.9, 0.9, 7), np.linspace(-0.9, 0.9, 7)), -1).reshape(-1, 2)
    a = np.stack(np.meshgrid(np.linspace(-0.09, 0.09, 5), np.linspace(-0.09, 0.09, 5)), -1).reshape(-1, 2)
    return np.repeat(g, len(a), 0), np.tile(a, (len(g), 1))


# -- behavior density -------------------------------------------------------------


def test_density_constant_shift():
    rng = np.random.default_rng(0)
    S = rng.uniform(-1, 1, (500, 2))
    c = np.array([0.3, -0.2])
    model = fit_behavior_density(one_step_dataset(S, np.zeros((500, 1)), S + c), 2000, (32, 32), 64, 3e-3, rng)
    X = rng.uniform(-1, 1, (100, 2))
    np.testing.assert_allclose(model.mean(X), X + c, atol=5e-3)
    assert np.all(model.net.log_std() <= -4.9)
    assert np.all(np.isfinite(model.log_prob(S, S + c)))


def test_density_held_out_linear_gaussian():
    rng = np.random.default_rng(1)
    S = rng.uniform(-1, 1, (4000, 2))
    S2 = S + 0.2 * S[:, ::-1] + 0.1 * rng.normal(size=S.shape)
    train = one_step_dataset(S[:3000], np.zeros((3000, 1)), S2[:3000])
    model = fit_behavior_density(train, 2000, (32, 32), 128, 3e-3, rng)
    ll_train = model.log_prob(S[:3000], S2[:3000]).mean()
    ll_test = model.log_prob(S[3000:], S2[3000:]).mean()
    assert abs(ll_test - ll_train) <= 0.1 * abs(ll_train)
    # close to the true kernel's negative entropy
    assert ll_train == pytest.approx(-2 * (math.log(0.1) + 0.5 * math.log(2 * math.pi * math.e)), abs=0.1)


def test_density_single_transition():
    rng = np.random.default_rng(2)
    s, s2 = np.array([[0.5, -0.5]]), np.array([[0.7, -0.1]])
    model = fit_behavior_density(one_step_dataset(s, np.zeros((1, 1)), s2), 1500, (16, 16), 8, 3e-3, rng)
    np.testing.assert_allclose(model.mean(s), s2, atol=1e-2)


def test_density_rejects_empty():
    with pytest.raises(ValueError):
        fit_behavior_density(TrajectoryDataset.empty(2, 1))


# -- guide objectives ------------------------------------------------------------


def batch_for(ens, rng, n, u):
    """Terminal transitions whose residual under ``ens`` equals ``u``."""
    s = rng.normal(size=(n, 2))
    return Batch(s, np.zeros((n, 1)), ens.value(s) + u, rng.normal(size=(n, 2)), np.ones(n))


def test_weights_zero_residual_is_plain_mle():
    rng = np.random.default_rng(3)
    ens = ValueEnsemble(2, (8,), rng=rng)
    batch = batch_for(ens, rng, 16, 0.0)
    np.testing.assert_allclose(residual_weights(ens, batch, 10.0), 1.0, atol=1e-12)
    guide = GuidePolicy(2, (8,), rng)
    loss_w, grads_w = guide_loss_weighted(batch, guide, ens, 10.0)
    loss, grads = guide.nll_and_grads(batch.observations, batch.next_observations)
    assert loss_w == pytest.approx(loss, rel=1e-12)
    for a, b in zip(grads_w, grads):
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-14)


def test_weight_examples():
    rng = np.random.default_rng(4)
    ens = ValueEnsemble(2, (8,), rng=rng)
    alpha = 3.0
    w = residual_weights(ens, batch_for(ens, rng, 4, alpha * math.log(2)), alpha)
    np.testing.assert_allclose(w, 2.0, rtol=1e-12)
    w = residual_weights(ens, batch_for(ens, rng, 4, 1e4), alpha)
    assert np.all(w == WEIGHT_CLIP)
    with pytest.raises(ValueError):
        residual_weights(ens, batch_for(ens, rng, 4, 0.0), 0.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=20), st.floats(0.1, 20), st.floats(1.0, 5.0))
def test_weight_spread_shrinks_with_alpha(residuals, alpha, factor):
    rng = np.random.default_rng(0)
    ens = ValueEnsemble(2, (4,), rng=rng)
    batch = batch_for(ens, rng, len(residuals), np.array(residuals))
    w1 = residual_weights(ens, batch, alpha)
    w2 = residual_weights(ens, batch, alpha * factor)
    assert np.all(w1 > 0) and np.all(w1 <= WEIGHT_CLIP)
    assert w2.max() / w2.min() <= w1.max() / w1.min() * (1 + 1e-12)


def test_weighted_guide_does_not_touch_values():
    rng = np.random.default_rng(5)
    ens = ValueEnsemble(2, (8,), rng=rng)
    before = ens.digest()
    guide = GuidePolicy(2, (8,), rng)
    _, grads = guide_loss_weighted(batch_for(ens, rng, 8, 0.3), guide, ens, 1.0)
    assert len(grads) == len(guide.net.params)
    assert ens.digest() == before


def test_explicit_alpha_zero_is_value_ascent():
    rng = np.random.default_rng(6)
    ens = ValueEnsemble(2, (8,), rng=rng)
    for m in ens.online:
        m.params[-2][...] = rng.normal(size=m.params[-2].shape)
    guide = GuidePolicy(2, (8,), rng)
    batch = batch_for(ens, rng, 8, 0.0)
    noise = rng.normal(size=(8, 2))
    loss, _ = guide_loss_explicit(batch, guide, ens, None, 0.0, noise)
    mean, log_std = guide.net(batch.observations)
    sample = batch.observations + mean + np.exp(log_std) * noise
    assert loss == pytest.approx(-ens.value(sample).mean(), rel=1e-12)


def test_explicit_needs_density_when_constrained():
    rng = np.random.default_rng(7)
    ens = ValueEnsemble(2, (8,), rng=rng)
    with pytest.raises(ValueError):
        guide_loss_explicit(batch_for(ens, rng, 2, 0.0), GuidePolicy(2, (8,), rng), ens, None, 1.0)


def test_explicit_flat_value_anchors_to_density():
    rng = np.random.default_rng(8)
    S = rng.uniform(-1, 1, (400, 1))
    behavior = fit_behavior_density(one_step_dataset(S, np.zeros((400, 1)), 0.5 * S + 0.3), 2000, (16, 16), 64, 3e-3, rng)
    ens = flat_ensemble(1, rng)
    guide = GuidePolicy(1, (16, 16), rng)
    opt = Adam(guide.net, 3e-3)
    for t in range(3000):
        if t == 2000:
            opt.lr = 3e-4
        s = rng.uniform(-1, 1, (64, 1))
        batch = Batch(s, np.zeros((64, 1)), np.zeros(64), s, np.zeros(64))
        _, grads = guide_loss_explicit(batch, guide, ens, behavior, 100.0, rng.normal(size=(64, 1)))
        opt.step(guide.net, grads)
    X = np.linspace(-0.9, 0.9, 19)[:, None]
    np.testing.assert_allclose(guide.mean(X), behavior.mean(X), atol=1e-2)


# -- execute-policy ------------------------------------------------------------------


def test_execute_learns_inverse_dynamics(inverse_dynamics):
    S, A = unit_grid()
    assert np.mean((inverse_dynamics.mean(S, S + A) - A) ** 2) < 1e-3


def test_execute_rejects_action_free():
    rng = np.random.default_rng(9)
    pol = ExecutePolicy(2, 2, (8,), rng)
    batch = Batch(np.zeros((2, 2)), np.full((2, 2), np.nan), np.zeros(2), np.ones((2, 2)), np.zeros(2))
    with pytest.raises(ActionFreeError):
        execute_loss(batch, pol)


def test_execute_single_weight_isolates_sample():
    rng = np.random.default_rng(10)
    pol = ExecutePolicy(2, 2, (8,), rng)
    batch = Batch(rng.normal(size=(5, 2)), rng.normal(size=(5, 2)), np.zeros(5), rng.normal(size=(5, 2)), np.zeros(5))
    w = np.zeros(5)
    w[2] = 1.0
    _, grads = execute_loss(batch, pol, w)
    one = Batch(*(x[2:3] for x in batch))
    _, single = execute_loss(one, pol)
    for g, h in zip(grads, single):
        np.testing.assert_allclose(g, h / 5, rtol=1e-12, atol=1e-15)


def test_execute_feature_layout():
    pol = ExecutePolicy(3, 2, (4,), np.random.default_rng(0), state_index=(0, 1))
    f = pol.features(np.array([1.0, 2.0, 1.0]), np.array([1.5, 1.0, 0.0]))
    np.testing.assert_array_equal(f, [1.0, 2.0, 0.5, -1.0])
    assert pol.net.in_dim == 4 and pol.net.out_dim == 2


# -- composition --------------------------------------------------------------------


class FixedGuide:
    def __init__(self, offset):
        self.offset = offset

    def mean(self, s):
        return np.asarray(s) + self.offset


def test_act_composes_guide_and_execute(inverse_dynamics):
    agent = PorAgent(FixedGuide(np.array([0.05, -0.03])), inverse_dynamics, np.full(2, -0.1), np.full(2, 0.1))
    S = np.random.default_rng(11).uniform(-0.8, 0.8, (50, 2))
    np.testing.assert_allclose(agent.act(S), np.tile([0.05, -0.03], (50, 1)), atol=3e-3)


def test_act_clips_and_is_deterministic(inverse_dynamics):
    agent = PorAgent(FixedGuide(np.array([0.5, -0.5])), inverse_dynamics, np.full(2, -0.1), np.full(2, 0.1))
    s = np.array([0.1, 0.2])
    a = agent.act(s)
    assert np.all(a <= 0.1) and np.all(a >= -0.1)
    assert agent.act(s).tobytes() == a.tobytes()


def test_guide_output_dimension():
    g = GuidePolicy(3, (8,), np.random.default_rng(0))
    mean, log_std = g.dist(np.zeros((4, 3)))
    assert mean.shape == (4, 3) and log_std.shape == (3,)
    assert gaussian_log_prob(mean, log_std, mean).shape == (4,)
