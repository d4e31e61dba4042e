import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from porlab import tabular
from porlab.data import TrajectoryDataset, Transition
from porlab.envs import FigureOneLayout, GridWorld, build_toy_dataset
from porlab.valuelearn import (
    Batch,
    ValueEnsemble,
    batch_from,
    expectile_residual_loss,
    sparse_value_loss,
    value_update,
)


def test_expectile_examples():
    assert expectile_residual_loss(2.0, 0.5) == 2.0
    assert expectile_residual_loss(-1.0, 0.9) == pytest.approx(0.1, abs=1e-15)
    assert expectile_residual_loss(3.0, 0.9) == pytest.approx(8.1, abs=1e-14)


def test_sparse_examples():
    assert sparse_value_loss(0.0, 0.0, 0.5) == 1.0
    assert sparse_value_loss(-1.0, 0.5, 0.5) == 1.0
    assert sparse_value_loss(1.0, 1.0, 0.5) == 6.0


@settings(max_examples=200, deadline=None)
@given(st.floats(-1e3, 1e3, allow_nan=False))
def test_expectile_half_is_half_square(u):
    assert expectile_residual_loss(u, 0.5) == 0.5 * u * u


@settings(max_examples=100, deadline=None)
@given(st.floats(0.01, 10.0), st.floats(-5, 5))
def test_sparse_continuous_at_kink(tau, v):
    b = -2 * tau
    left = sparse_value_loss(b - 1e-9, v, tau)
    right = sparse_value_loss(b + 1e-9, v, tau)
    at = sparse_value_loss(b, v, tau)
    assert abs(left - at) < 1e-12 and abs(right - at) < 1e-12


def test_tau_validation():
    with pytest.raises(ValueError):
        ValueEnsemble(2, tau=1.0)
    with pytest.raises(ValueError):
        ValueEnsemble(2, tau=0.0, objective="sparse")
    with pytest.raises(ValueError):
        ValueEnsemble(2, objective="huber")


def consistent_batch(ens, rng, n=16):
    """Terminal transitions whose reward equals V(s), so every residual is exactly 0."""
    s = rng.normal(size=(n, 3))
    return Batch(s, np.zeros((n, 1)), ens.value(s), rng.normal(size=(n, 3)), np.ones(n))


def test_zero_residual_leaves_parameters():
    rng = np.random.default_rng(0)
    ens = ValueEnsemble(3, (8, 8), rng=rng)
    # identical online nets so the min picks a residual of exactly zero for both
    ens.online[1].load_state(ens.online[0])
    ens.targets = [m.copy() for m in ens.online]
    batch = consistent_batch(ens, rng)
    before = [m.flat().copy() for m in ens.online]
    loss = value_update(ens, batch, polyak=False)
    assert loss == pytest.approx(0.0, abs=1e-25)
    for b, m in zip(before, ens.online):
        np.testing.assert_array_equal(b, m.flat())


def test_terminal_masks_bootstrap():
    rng = np.random.default_rng(1)
    ens = ValueEnsemble(3, (8, 8), rng=rng)
    for m in ens.targets:
        m.params[-1][...] = 50.0  # large output bias, so bootstrapping would show
    s, s2 = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    batch = Batch(s, np.zeros((4, 1)), np.array([1.0, 2.0, 3.0, 4.0]), s2, np.ones(4))
    np.testing.assert_array_equal(ens.td_target(batch), batch.rewards)
    np.testing.assert_allclose(ens.residual(batch), batch.rewards - ens.value(s))


def test_clipped_double_v():
    rng = np.random.default_rng(2)
    ens = ValueEnsemble(3, (8,), rng=rng)
    ens.online[0].params[-1][...] = 1.0
    ens.online[1].params[-1][...] = -1.0
    x = rng.normal(size=(5, 3))
    np.testing.assert_array_equal(ens.value(x), np.minimum(ens.online[0](x), ens.online[1](x)))
    assert all(t.same_architecture(o) for t, o in zip(ens.targets, ens.online))


def test_polyak_moves_targets():
    rng = np.random.default_rng(3)
    ens = ValueEnsemble(3, (8,), polyak=0.05, rng=rng)
    old = ens.targets[0].flat().copy()
    ens.online[0].set_flat(ens.online[0].flat() + 1.0)
    ens.update_targets()
    np.testing.assert_allclose(ens.targets[0].flat(), old + 0.05, atol=1e-12)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts():
    rng = np.random.default_rng(4)
    ens = ValueEnsemble(3, (8,), rng=rng)
    batch = Batch(np.ones((2, 3)), np.zeros((2, 1)), np.array([np.inf, 0.0]), np.ones((2, 3)), np.zeros(2))
    before = ens.digest()
    with pytest.raises(FloatingPointError):
        ens.update(batch)
    assert ens.digest() == before


# -- tabular agreement -------------------------------------------------------------

def one_hot(cells, world):
    out = np.zeros((len(cells), world.width * world.height))
    for i, (x, y) in enumerate(cells):
        out[i, x * world.height + y] = 1.0
    return out


def one_hot_dataset(d: TrajectoryDataset, world: GridWorld) -> TrajectoryDataset:
    cells = [tuple(map(int, s)) for s in d.observations]
    cells2 = [tuple(map(int, s)) for s in d.next_observations]
    return TrajectoryDataset(
        one_hot(cells, world), d.actions.copy(), d.rewards.copy(), one_hot(cells2, world),
        d.dones.copy(), d.timeouts.copy(), d.has_action.copy(), d.starts.copy(),
    )


def random_walk_dataset(world, n, seed):
    rng = np.random.default_rng(seed)
    trajs, total = [], 0
    while total < n:
        s = (int(rng.integers(world.width)), int(rng.integers(world.height)))
        if s == world.goal:
            continue
        traj = []
        for _ in range(min(12, n - total)):
            # lean towards the goal so enough walks terminate
            a = 1 if rng.random() < 0.3 else int(rng.integers(8))
            s2, r, done = world.step(s, a)
            traj.append(Transition(np.array(s, float), np.array([a], float), r, np.array(s2, float), done))
            s = s2
            if done:
                break
        total += len(traj)
        trajs.append(traj)
    return TrajectoryDataset.from_trajectories(trajs, 2, 1)


def expectile(values, tau):
    """Exact expectile of a finite sample: Newton on the piecewise-linear first-order condition."""
    m = values.mean()
    for _ in range(100):
        w = np.where(values >= m, tau, 1 - tau)
        step = np.sum(w * (values - m)) / np.sum(w)
        m += step
        if abs(step) < 1e-15:
            break
    return m


def oracle_expectile_values(d, world, tau, gamma):
    """Tabular fixed point of V(s) = expectile_tau{ r + gamma V(s') } over dataset transitions."""
    src = [tuple(map(int, s)) for s in d.observations]
    dst = [tuple(map(int, s)) for s in d.next_observations]
    cells = sorted(set(src) | set(dst))
    index = {c: i for i, c in enumerate(cells)}
    si = np.array([index[c] for c in src])
    di = np.array([index[c] for c in dst])
    cont = gamma * (1.0 - d.dones)
    groups = {c: np.flatnonzero(si == index[c]) for c in set(src)}
    V = np.zeros(len(cells))
    for _ in range(5000):
        y = d.rewards + cont * V[di]
        new = V.copy()
        for c, rows in groups.items():
            new[index[c]] = expectile(y[rows], tau)
        delta = np.max(np.abs(new - V))
        V = new
        if delta < 1e-12:
            break
    return {c: V[index[c]] for c in cells}, groups


def train_tabular_net(d1h, tau, gamma, steps, lr=0.05, seed=0):
    ens = ValueEnsemble(d1h.obs_dim, (), tau=tau, gamma=gamma, polyak=0.2, lr=lr, rng=np.random.default_rng(seed))
    full = batch_from(d1h, np.arange(d1h.n_transitions))
    for t in range(steps):
        if t == steps // 2:
            for opt in ens.opts:
                opt.lr = lr / 10
        value_update(ens, full)
    return ens


@pytest.fixture(scope="module")
def walk_200():
    world = GridWorld()
    d = random_walk_dataset(world, 200, seed=7)
    assert d.n_transitions == 200
    return world, d


def test_linear_net_matches_expectile_oracle(walk_200):
    world, d = walk_200
    ens = train_tabular_net(one_hot_dataset(d, world), 0.7, 0.9, 6000)
    V, by_src = oracle_expectile_values(d, world, 0.7, 0.9)
    cells = sorted(by_src)
    learned = ens.value(one_hot(cells, world))
    np.testing.assert_allclose(learned, [V[c] for c in cells], atol=1e-3)


def test_oracle_values_monotone_in_tau(walk_200):
    world, d = walk_200
    vals = [oracle_expectile_values(d, world, tau, 0.9)[0] for tau in (0.5, 0.7, 0.9)]
    for lo, hi in zip(vals, vals[1:]):
        assert all(hi[c] >= lo[c] - 1e-12 for c in lo)


def spearman(a, b):
    def ranks(x):
        x = np.asarray(x)
        order = np.argsort(x, kind="stable")
        r = np.empty(len(x))
        r[order] = np.arange(len(x))
        for v in np.unique(x):
            r[x == v] = r[x == v].mean()
        return r

    ra, rb = ranks(a), ranks(b)
    return float(np.corrcoef(ra, rb)[0, 1])


def test_spearman_against_dataset_value_iteration():
    layout = FigureOneLayout.load("canonical")
    world = layout.world
    d = build_toy_dataset(layout)
    V = tabular.dataset_value_iteration(d)
    ens = train_tabular_net(one_hot_dataset(d, world), 0.95, 1.0, 6000)
    cells = sorted(c for c in V.values if c not in V.goals)
    rho = spearman([V[c] for c in cells], ens.value(one_hot(cells, world)))
    assert rho > 0.95
