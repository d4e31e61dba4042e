import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from porlab import data
from porlab.data import (
    ActionFreeError,
    CorruptDatasetError,
    DatasetError,
    SplitSpec,
    TrajectoryDataset,
    Transition,
    compute_returns,
    filter_top_fraction,
    split,
)

from conftest import random_dataset


def dataset_with_returns(returns):
    trajs = []
    for k, r in enumerate(returns):
        s = np.array([float(k)])
        trajs.append([Transition(s, np.zeros(1), float(r), s + 1, True)])
    return TrajectoryDataset.from_trajectories(trajs, 1, 1)


def test_returns_examples():
    d = TrajectoryDataset.from_trajectories(
        [[Transition(np.array([float(t)]), np.zeros(1), float(r), np.array([t + 1.0]), t == 2) for t, r in enumerate([1, 2, 3])]]
    )
    assert compute_returns(d, 1.0).tolist() == [6.0]
    assert compute_returns(d, 0.5).tolist() == [2.75]
    with pytest.warns(RuntimeWarning):
        assert data.discounted_return([], 0.99) == 0.0


def test_gamma_range():
    with pytest.raises(ValueError):
        data.discounted_return([1.0], 0.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 1.0))
def test_returns_permutation_invariant(seed, gamma):
    rng = np.random.default_rng(seed)
    d = random_dataset(rng, n_traj=5, length=3)
    perm = rng.permutation(d.n_trajectories)
    shuffled = d.select_trajectories(perm)
    np.testing.assert_allclose(compute_returns(shuffled, gamma), compute_returns(d, gamma)[perm], rtol=0, atol=1e-12)


def test_filter_examples():
    d = dataset_with_returns(range(1, 11))
    top = filter_top_fraction(d, 10)
    assert compute_returns(top, 1.0).tolist() == [10.0]
    assert filter_top_fraction(d, 100).content_hash() == d.content_hash()
    tie = filter_top_fraction(dataset_with_returns([5, 5, 1, 0]), 25)
    assert tie.observations[:, 0].tolist() == [0.0]


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(-5, 5), min_size=1, max_size=12), st.sampled_from([10.0, 25.0, 40.0, 100.0]))
def test_filter_keeps_best_and_refilter_is_stable(returns, x):
    d = dataset_with_returns(returns)
    once = filter_top_fraction(d, x)
    assert once.n_trajectories == math.ceil(round(len(returns) * x / 100, 9))
    kept = sorted(compute_returns(once, 1.0))
    assert kept == sorted(returns, reverse=True)[: len(kept)][::-1]
    # a second pass keeps ceil(x% of the kept set), all of them still top scorers
    twice = filter_top_fraction(once, x)
    assert set(twice.observations[:, 0]) <= set(once.observations[:, 0])
    assert filter_top_fraction(once, 100).content_hash() == once.content_hash()


def test_split_examples():
    d = random_dataset(np.random.default_rng(0), n_traj=10)
    d_e, d_o = split(d, SplitSpec("main", 1.0))
    assert d_e.content_hash() == d.content_hash() and d_o.n_transitions == 0
    d_e, d_o = split(d, SplitSpec("mix", 0.3), seed=3)
    assert (d_e.n_trajectories, d_o.n_trajectories) == (3, 7)
    d_e, d_o = split(d, SplitSpec("mix", 0.3, True), seed=3)
    assert not d_o.has_action.any() and np.isnan(d_o.actions).all()
    merged, rest = split(d, SplitSpec("more", 0.3, True), seed=3)
    assert merged.n_transitions == d.n_transitions and rest.n_transitions == 0
    with pytest.raises(DatasetError):
        split(d, SplitSpec("mix", 0.01))
    with pytest.raises(ValueError):
        SplitSpec("mix", 0.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 1.0), st.booleans())
def test_mix_split_preserves_counts(seed, frac, strip):
    d = random_dataset(np.random.default_rng(seed), n_traj=8, length=3)
    d_e, d_o = split(d, SplitSpec("mix", frac, strip), seed=seed)
    assert d_e.n_transitions + d_o.n_transitions == d.n_transitions
    d_e.validate()
    d_o.validate()


def test_chaining_validation():
    d = random_dataset(np.random.default_rng(0))
    d.validate()
    broken = TrajectoryDataset(
        d.observations.copy(), d.actions.copy(), d.rewards.copy(), d.observations.copy(), d.dones.copy(),
        d.timeouts.copy(), d.has_action.copy(), d.starts.copy(),
    )
    with pytest.raises(DatasetError, match="chain"):
        broken.validate()


def test_non_finite_reward_rejected():
    with pytest.raises(DatasetError):
        TrajectoryDataset.from_trajectories([[Transition(np.zeros(1), np.zeros(1), math.inf, np.ones(1), True)]])


def test_binary_round_trip(tmp_path):
    d = random_dataset(np.random.default_rng(1))
    d = data.concat([d, d.without_actions()])
    data.save_dataset(d, tmp_path / "d.pord")
    back = data.load_dataset(tmp_path / "d.pord")
    assert back.content_hash() == d.content_hash()
    assert np.array_equal(back.has_action, d.has_action)


def test_truncated_and_corrupt_files():
    blob = data.to_bytes(random_dataset(np.random.default_rng(1)))
    with pytest.raises(CorruptDatasetError, match="offset"):
        data.from_bytes(blob[: len(blob) // 2])
    bad = bytearray(blob)
    bad[-20] ^= 0x01
    with pytest.raises(CorruptDatasetError, match="checksum mismatch at offset"):
        data.from_bytes(bytes(bad))


def test_csv_round_trip():
    d = random_dataset(np.random.default_rng(2))
    d = data.concat([d, d.without_actions()])
    back = data.from_csv(data.to_csv(d))
    np.testing.assert_array_equal(back.observations, d.observations)
    np.testing.assert_array_equal(back.has_action, d.has_action)
    np.testing.assert_array_equal(back.rewards, d.rewards)
    header = data.to_csv(d).splitlines()[0]
    assert header == "traj,step,s0,s1,s2,a0,a1,r,sp0,sp1,sp2,done"


def test_require_actions():
    d = random_dataset(np.random.default_rng(0)).without_actions()
    with pytest.raises(ActionFreeError):
        d.require_actions()


def test_normalization_round_trip():
    d = random_dataset(np.random.default_rng(3))
    mean, std = data.state_statistics(d)
    nd = data.normalize_states(d, mean, std)
    np.testing.assert_allclose(nd.observations * std + mean, d.observations, atol=1e-12)
