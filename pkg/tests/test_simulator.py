import numpy as np
import pytest

from mbcal import agents as ag
from mbcal.simulator import ProtocolError, SessionEnded, SimConfig, UserSimulator, run_session, run_sessions, with_noise_removed

SMALL = SimConfig(n_items=30, n_users=20, k=5, horizon=6)


class FirstItem(ag.Policy):
    name = "first"

    def scores(self, state, candidates):
        return -candidates.astype(float)


def test_same_seed_same_simulator_and_different_seed_differs():
    a, b, c = UserSimulator(SMALL), UserSimulator(SMALL), UserSimulator(SimConfig(**{**SMALL.to_dict(), "seed": 1}))
    for name in a.lstm.names():
        assert np.array_equal(a.lstm[name], b.lstm[name])
    assert np.array_equal(a._features, b._features)
    assert not np.array_equal(a._features, c._features)


def test_rating_space():
    space = UserSimulator(SMALL).space
    assert space.size == 6 and space.rewards == (0, 1, 2, 3, 4, 5)


def test_candidate_sets():
    sim = UserSimulator(SimConfig(**{**SMALL.to_dict(), "k": 30}))
    state = sim.start(np.arange(4))
    cands = sim.candidate_set(state, np.random.default_rng(0))
    assert all(sorted(row) == list(range(30)) for row in cands)
    sim = UserSimulator(SMALL)
    c1 = sim.candidate_set(sim.start(np.arange(20)), np.random.default_rng(3))
    c2 = sim.candidate_set(sim.start(np.arange(20)), np.random.default_rng(3))
    assert np.array_equal(c1, c2)
    assert all(len(set(row)) == len(row) for row in c1)
    with pytest.raises(ValueError):
        SimConfig(n_items=3, k=5)


def test_zero_temperature_is_argmax():
    sim = UserSimulator(SimConfig(**{**SMALL.to_dict(), "temperature": 0.0}))
    state = sim.start(np.arange(10))
    cands = sim.candidate_set(state, np.random.default_rng(0))
    logits, _, _ = sim.logits(state, cands[:, 0])
    b, r, _ = sim.step(state, cands[:, 0], np.random.default_rng(1))
    assert np.array_equal(b, logits.argmax(axis=1))
    assert np.array_equal(r, sim.rewards[b])


def test_symmetric_logits_give_uniform_behaviors():
    flat = SimConfig(
        **{
            **SMALL.to_dict(),
            "user_bias_spread": 0.0,
            "appeal_weight": 0.0,
            "satisfaction_weight": 0.0,
            "random_readout": 0.0,
            "affinity_weight": 0.0,
            "recency_penalty": 0.0,
        }
    )
    sim = UserSimulator(flat)
    rng = np.random.default_rng(0)
    state = sim.start(rng.integers(0, 20, 10_000))
    cands = sim.candidate_set(state, rng)
    b, _, _ = sim.step(state, cands[:, 0], rng)
    counts = np.bincount(b, minlength=6)
    p = 1 / 6
    sigma = np.sqrt(10_000 * p * (1 - p))
    assert np.all(np.abs(counts - 10_000 * p) < 3 * sigma)


def test_same_seed_same_behaviors():
    sim = UserSimulator(SMALL)
    runs = [run_sessions(sim, ag.RandomPolicy(), np.arange(8), np.random.default_rng(5)) for _ in range(2)]
    assert all(x == y for x, y in zip(runs[0], runs[1]))


def test_session_length_and_determinism():
    sim = UserSimulator(SimConfig(n_items=40, n_users=10, k=5))
    traj = run_session(sim, ag.RandomPolicy(), 3, np.random.default_rng(0))
    assert len(traj) == 20
    first = run_session(sim, FirstItem(), 3, np.random.default_rng(9))
    again = run_session(sim, FirstItem(), 3, np.random.default_rng(9))
    assert first == again
    assert all(a == c.min() for a, c in zip(first.actions, first.candidates))


def test_zero_reward_space_gives_zero():
    sim = UserSimulator(SimConfig(**{**SMALL.to_dict(), "rewards": (0, 0, 0)}))
    data = run_sessions(sim, ag.RandomPolicy(), np.arange(5), np.random.default_rng(0))
    assert not data.total_rewards().any()


def test_protocol_errors():
    sim = UserSimulator(SMALL)
    state = sim.start(np.arange(2))
    with pytest.raises(ProtocolError):
        sim.step(state, np.array([0, 1]), np.random.default_rng(0))
    cands = sim.candidate_set(state, np.random.default_rng(0))
    outside = np.array([a for a in range(30) if a not in cands[0] and a not in cands[1]][:1] * 2)
    with pytest.raises(ProtocolError):
        sim.step(state, outside, np.random.default_rng(0))
    rng = np.random.default_rng(0)
    for _ in range(SMALL.horizon):
        cands = sim.candidate_set(state, rng)
        _, _, state = sim.step(state, cands[:, 0], rng)
    with pytest.raises(SessionEnded):
        sim.candidate_set(state, rng)
    with pytest.raises(IndexError):
        sim.start([99])


def test_noise_removed_config():
    quiet = with_noise_removed(SMALL)
    assert quiet.temperature == 0 and quiet.user_bias_spread == 0 and quiet.recency_penalty == 0
    # the catalog is unchanged by the noise settings
    assert np.array_equal(UserSimulator(quiet)._features, UserSimulator(SMALL)._features)


def test_quality_pays_off_later():
    """Showing high-quality items raises the rewards of later steps."""
    sim = UserSimulator(SimConfig(temperature=0.0, user_bias_spread=0.0))
    quality = sim._features[:, 1]
    best, worst = np.argsort(quality)[-10:], np.argsort(quality)[:10]
    probe = np.argsort(np.abs(quality))[:1]
    users = np.arange(100)

    def later_logits(items):
        state = sim.start(users)
        for a in items:
            state.candidates = np.full((len(users), 1), a)
            _, _, state = sim.step(state, np.full(len(users), a), np.random.default_rng(0))
        state.candidates = np.full((len(users), 1), probe[0])
        logits, _, _ = sim.logits(state, np.full(len(users), probe[0]))
        return (logits * sim.levels).sum()

    assert later_logits(best) > later_logits(worst)
