import numpy as np
import pytest

from porlab.data import TrajectoryDataset, Transition


def random_dataset(rng, n_traj=6, length=5, obs_dim=3, act_dim=2, done_last=True):
    trajs = []
    for _ in range(n_traj):
        s = rng.normal(size=obs_dim)
        traj = []
        for t in range(length):
            a = rng.normal(size=act_dim)
            s2 = s + 0.1 * rng.normal(size=obs_dim)
            traj.append(Transition(s, a, float(rng.normal()), s2, done_last and t == length - 1))
            s = s2
        trajs.append(traj)
    return TrajectoryDataset.from_trajectories(trajs, obs_dim, act_dim, metadata={"name": "random"})


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed after the run
CRITERIA: dict[str, str] = {}


@pytest.fixture
def criterion():
    def record(key: str, ok: bool, detail: str) -> bool:
        CRITERIA[key] = f"{'PASS' if ok else 'FAIL'}  criterion {key}: {detail}"
        print(CRITERIA[key])
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for key in sorted(CRITERIA, key=lambda k: int(k.split(".")[0])):
            terminalreporter.write_line(CRITERIA[key])
