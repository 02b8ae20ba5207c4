import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mbcal.data import (
    BehaviorSpace,
    Dataset,
    DatasetFormatError,
    Trajectory,
    apply_mask,
    load_dataset,
    mask_positions,
    reward_of,
    save_dataset,
)


def traj(T=4, **kw):
    return Trajectory(0, np.arange(10, 10 + T), np.arange(T) % 3, **kw)


def test_worked_mask_example():
    o = Trajectory(7, [11, 12, 13, 14], [1, 2, 3, 0])
    m = apply_mask(o, {2, 3})
    assert [s.masked for s in m.steps] == [False, True, True, False]
    mask_item = 99
    shown = [mask_item if s.masked else s.action for s in m.steps]
    assert shown == [11, mask_item, mask_item, 14]
    assert [s.behavior for s in m.steps] == [1, 2, 3, 0]


def test_masking_never_mutates_and_is_idempotent():
    o = traj()
    before = (o.actions.copy(), o.behaviors.copy(), o.masked.copy())
    once = apply_mask(o, {1, 4})
    assert np.array_equal(o.masked, before[2]) and np.array_equal(o.actions, before[0])
    assert apply_mask(once, {1, 4}) == once
    assert apply_mask(o, set()) == o
    with pytest.raises(IndexError):
        apply_mask(o, {5})


def test_mask_positions_extremes():
    rng = np.random.default_rng(0)
    o = traj(T=20)
    assert mask_positions(o, 0.0, rng) == set()
    assert mask_positions(o, 1.0, rng) == set(range(1, 21))


def test_mask_positions_mean():
    rng = np.random.default_rng(0)
    o = traj(T=20)
    sizes = [len(mask_positions(o, 0.2, rng)) for _ in range(100_000)]
    assert abs(np.mean(sizes) - 4.0) < 0.05


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 30), st.floats(0, 1), st.integers(0, 2**31))
def test_mask_positions_in_range(T, p, seed):
    pos = mask_positions(traj(T=T), p, np.random.default_rng(seed))
    assert all(1 <= t <= T for t in pos)


def test_reward_of():
    six = BehaviorSpace.ratings(6)
    assert reward_of(5, six) == 5.0 and reward_of(0, six) == 0.0
    twelve = BehaviorSpace(tuple(range(1, 13)))
    assert reward_of(11, twelve) == 12.0
    with pytest.raises(IndexError):
        reward_of(6, six)


def test_behavior_space_validation():
    with pytest.raises(ValueError):
        BehaviorSpace((1.0,))
    with pytest.raises(ValueError):
        BehaviorSpace((0, 1), ("a",))


def test_dataset_round_trip(tmp_path):
    space = BehaviorSpace.ratings(3)
    empty = Dataset(space, 4)
    save_dataset(empty, tmp_path / "e.jsonl")
    assert len(load_dataset(tmp_path / "e.jsonl")) == 0

    one = Dataset(space, 4, [apply_mask(traj(tid="a", policy="random", round=2, candidates=np.arange(8).reshape(4, 2) + 10), {3})])
    one.trajectories[0].actions[:] = [10, 12, 14, 17]
    save_dataset(one, tmp_path / "o.jsonl")
    back = load_dataset(tmp_path / "o.jsonl")
    assert back[0] == one[0] and back.space == space and back.horizon == 4


def test_dataset_append_mode(tmp_path):
    space = BehaviorSpace.ratings(3)
    path = tmp_path / "d.jsonl"
    save_dataset(Dataset(space, 4, [traj(tid="a")]), path)
    save_dataset(Dataset(space, 4, [traj(tid="b")]), path, append=True)
    assert load_dataset(path).ids() == {"a", "b"}


def test_truncated_record_names_line(tmp_path):
    path = tmp_path / "d.jsonl"
    save_dataset(Dataset(BehaviorSpace.ratings(3), 4, [traj(tid="a"), traj(tid="b")]), path)
    lines = path.read_text().splitlines()
    lines[2] = lines[2][: len(lines[2]) // 2]
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetFormatError, match=r"d\.jsonl:3"):
        load_dataset(path)


def test_dataset_rejects_wrong_length_and_behavior():
    space = BehaviorSpace.ratings(3)
    with pytest.raises(ValueError):
        Dataset(space, 5, [traj(T=4)])
    with pytest.raises(ValueError):
        Dataset(space, 2, [Trajectory(0, [1, 2], [0, 3])])


def test_arrays_and_totals():
    space = BehaviorSpace.ratings(3)
    d = Dataset(space, 4, [traj(), traj()])
    arr = d.arrays()
    assert arr["actions"].shape == (2, 4) and "candidates" not in arr
    assert list(d.total_rewards()) == [3.0, 3.0]
