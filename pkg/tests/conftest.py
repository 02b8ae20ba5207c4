import numpy as np
import pytest

from mbcal.data import BehaviorSpace, Dataset, Trajectory

# acceptance criteria register "PASS/FAIL ..." lines here; printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_dataset(n, T, n_users, n_items, n_behaviors, seed=0, k=None):
    r = np.random.default_rng(seed)
    space = BehaviorSpace(tuple(range(n_behaviors)))
    trajs = []
    for i in range(n):
        cands = None
        if k is not None:
            cands = np.stack([r.permutation(n_items)[:k] for _ in range(T)])
            actions = cands[np.arange(T), r.integers(0, k, T)]
        else:
            actions = r.integers(0, n_items, T)
        trajs.append(Trajectory(int(r.integers(n_users)), actions, r.integers(0, n_behaviors, T), candidates=cands, tid=f"t{i}"))
    return Dataset(space, T, trajs)
