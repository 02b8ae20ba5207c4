"""Synthetic ground-truth users for evaluating recommendation agents.

Each user is an LSTM over the latent features of the items shown to them.
Agents never see those features: they receive only item ids and observed
behaviors. Two hand-placed LSTM units give the environment a long-term
structure on top of the random ones:

* a *satisfaction* unit with a near-one forget gate that integrates item
  quality, so good items raise the rewards of later steps;
* an *appeal* unit that forgets immediately and tracks the current item's
  instant attractiveness.

Appeal and quality are negatively correlated across the catalog, so the
greedy instant-reward choice is not the best choice over a session.
Per-user logit bias and sampling temperature supply feedback noise.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import nn
from .data import BehaviorSpace, Dataset, Trajectory

APPEAL, QUALITY = 0, 1


class ProtocolError(RuntimeError):
    pass


class SessionEnded(ProtocolError):
    pass


@dataclass(frozen=True)
class SimConfig:
    n_items: int = 200
    n_users: int = 500
    feature_dim: int = 8
    hidden: int = 16
    rewards: tuple[float, ...] = (0, 1, 2, 3, 4, 5)
    k: int = 10
    horizon: int = 20
    temperature: float = 1.0
    user_bias_spread: float = 0.5
    recency_penalty: float = 0.5
    appeal_weight: float = 1.5
    quality_weight: float = 0.5
    satisfaction_weight: float = 1.5
    appeal_quality_corr: float = -0.6
    affinity_weight: float = 0.5
    random_readout: float = 0.3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "rewards", tuple(float(r) for r in self.rewards))
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if self.k < 2:
            raise ValueError("candidate sets need at least two items")
        if self.k > self.n_items:
            raise ValueError(f"candidate set size {self.k} exceeds catalog size {self.n_items}")
        if min(self.n_items, self.n_users, self.feature_dim) < 1 or self.hidden < 2:
            raise ValueError("simulator sizes must be positive (hidden >= 2)")
        if self.feature_dim < 2:
            raise ValueError("feature_dim must be at least 2 (appeal and quality)")
        if self.temperature < 0 or self.user_bias_spread < 0:
            raise ValueError("temperature and bias spread must be non-negative")

    @property
    def space(self) -> BehaviorSpace:
        return BehaviorSpace(self.rewards)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rewards"] = list(self.rewards)
        return d


@dataclass
class SimState:
    """Hidden per-session state for a batch of sessions."""

    users: np.ndarray
    h: np.ndarray
    c: np.ndarray
    shown: np.ndarray
    step: int = 0
    candidates: np.ndarray | None = field(default=None, repr=False)


class UserSimulator:
    def __init__(self, config: SimConfig):
        self.config = c = config
        rng = np.random.default_rng(np.random.SeedSequence([c.seed, 0x5EED]))
        F = rng.normal(size=(c.n_items, c.feature_dim))
        rho = c.appeal_quality_corr
        F[:, QUALITY] = rho * F[:, APPEAL] + np.sqrt(1 - rho**2) * F[:, QUALITY]
        self._features = F
        self._user_latent = rng.normal(size=(c.n_users, c.feature_dim))
        # drawn unconditionally so the noise settings never shift the other draws
        self.user_bias = c.user_bias_spread * rng.normal(size=c.n_users)
        self._user_proj = rng.normal(scale=0.5, size=(c.feature_dim, c.hidden))

        H = c.hidden
        p = nn.Params()
        nn.lstm_params(p, "lstm", c.feature_dim, H, rng)
        W, U, b = p["lstm.W"], p["lstm.U"], p["lstm.b"]
        i_, f_, o_, g_ = 0, H, 2 * H, 3 * H
        for unit in (0, 1):
            for gate in (i_, f_, o_, g_):
                W[:, gate + unit] = 0.0
                U[:, gate + unit] = 0.0
            U[unit, :] = 0.0
        # satisfaction: keeps memory, integrates quality
        b[i_ + 0], b[f_ + 0], b[o_ + 0] = 6.0, 4.0, 6.0
        W[QUALITY, g_ + 0] = c.quality_weight
        # appeal: memoryless view of the current item
        b[i_ + 1], b[f_ + 1], b[o_ + 1] = 6.0, -8.0, 6.0
        W[APPEAL, g_ + 1] = 1.0
        self.lstm = p

        n = len(c.rewards)
        self.levels = np.linspace(-1.0, 1.0, n)
        readout = np.zeros(H)
        readout[0] = c.satisfaction_weight
        readout[1] = c.appeal_weight
        readout[2:] = rng.normal(scale=c.random_readout / np.sqrt(H), size=H - 2)
        self.readout = readout
        self.behavior_readout = rng.normal(scale=c.random_readout / np.sqrt(H), size=(H, n))
        self.rewards = np.asarray(c.rewards)

    @property
    def space(self) -> BehaviorSpace:
        return self.config.space

    # ------------------------------------------------------------ sessions

    def start(self, users) -> SimState:
        users = np.asarray(users, dtype=np.int64)
        if users.size and (users.min() < 0 or users.max() >= self.config.n_users):
            raise IndexError("unknown user id")
        h = np.tanh(self._user_latent[users] @ self._user_proj)
        h[:, :2] = 0.0
        return SimState(users, h, np.zeros_like(h), np.zeros((users.size, self.config.n_items), dtype=np.int64))

    def candidate_set(self, state: SimState, rng: np.random.Generator) -> np.ndarray:
        """``k`` distinct items per session, drawn without replacement."""
        c = self.config
        if state.step >= c.horizon:
            raise SessionEnded("session already has all of its steps")
        keys = rng.random((state.users.size, c.n_items))
        cands = np.argsort(keys, axis=1, kind="stable")[:, : c.k]
        state.candidates = cands
        return cands

    def logits(self, state: SimState, actions: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Behavior logits (before temperature and user bias) and the advanced LSTM state."""
        c = self.config
        x = self._features[actions]
        h, cell = nn.lstm_step(self.lstm, "lstm", state.h, state.c, x)
        affinity = np.einsum("bd,bd->b", self._user_latent[state.users, 2:], x[:, 2:]) / np.sqrt(max(c.feature_dim - 2, 1))
        repeats = state.shown[np.arange(actions.size), actions]
        score = h @ self.readout + c.affinity_weight * affinity - c.recency_penalty * repeats
        logits = score[:, None] * self.levels + h @ self.behavior_readout
        return logits, h, cell

    def step(
        self, state: SimState, actions, rng: np.random.Generator
    ) -> tuple[np.ndarray, np.ndarray, SimState]:
        """Show one item per session; return (behaviors, rewards, next state)."""
        c = self.config
        actions = np.asarray(actions, dtype=np.int64)
        if state.step >= c.horizon:
            raise SessionEnded(f"session already has {c.horizon} steps")
        if state.candidates is None:
            raise ProtocolError("step called without a candidate set")
        if not (state.candidates == actions[:, None]).any(axis=1).all():
            raise ProtocolError("action outside the current candidate set")
        logits, h, cell = self.logits(state, actions)
        if c.temperature == 0:
            behaviors = logits.argmax(axis=1)
        else:
            z = logits / c.temperature + self.user_bias[state.users, None] * self.levels
            probs = nn.softmax(z)
            u = rng.random(actions.size)
            behaviors = (probs.cumsum(axis=1) < u[:, None]).sum(axis=1)
            behaviors = np.minimum(behaviors, len(self.levels) - 1)
        shown = state.shown.copy()
        shown[np.arange(actions.size), actions] += 1
        nxt = SimState(state.users, h, cell, shown, state.step + 1)
        return behaviors, self.rewards[behaviors], nxt


def run_sessions(
    sim: UserSimulator,
    policy,
    users,
    rng: np.random.Generator,
    explore_rng: np.random.Generator | None = None,
    explore: bool = False,
    tids=None,
    policy_name: str = "",
    round_index: int = 0,
) -> Dataset:
    """Run full sessions for ``users`` in lockstep and log them as trajectories."""
    c = sim.config
    users = np.asarray(users, dtype=np.int64)
    B, T = users.size, c.horizon
    explore_rng = rng if explore_rng is None else explore_rng
    state = sim.start(users)
    pstate = policy.begin(users)
    actions = np.zeros((B, T), dtype=np.int64)
    behaviors = np.zeros((B, T), dtype=np.int64)
    cands = np.zeros((B, T, c.k), dtype=np.int64)
    for t in range(T):
        cand = sim.candidate_set(state, rng)
        choice = policy.select(pstate, cand, explore_rng, explore)
        act = cand[np.arange(B), choice]
        b, _, state = sim.step(state, act, rng)
        policy.observe(pstate, choice, b)
        actions[:, t], behaviors[:, t], cands[:, t] = act, b, cand
    tids = [f"s{i}" for i in range(B)] if tids is None else list(tids)
    trajs = [
        Trajectory(int(users[i]), actions[i], behaviors[i], candidates=cands[i], tid=tids[i], policy=policy_name, round=round_index)
        for i in range(B)
    ]
    return Dataset(sim.space, T, trajs, policy_name, round_index)


def run_session(sim: UserSimulator, policy, user: int, rng, explore_rng=None, explore: bool = False, tid: str = "s0") -> Trajectory:
    return run_sessions(sim, policy, [user], rng, explore_rng, explore, [tid])[0]


def with_noise_removed(config: SimConfig) -> SimConfig:
    """Same environment with deterministic behaviors, no user bias and no recency drift."""
    return replace(config, temperature=0.0, user_bias_spread=0.0, recency_penalty=0.0)
