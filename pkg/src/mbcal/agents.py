"""Recommendation policies: MBCAL, GRU4Rec, and Q-learning baselines.

Policies run a batch of sessions in lockstep through three calls:
``begin(users)`` opens per-session state, ``select(state, candidates, rng,
explore)`` returns the chosen column of each candidate row, and
``observe(state, choice, behaviors)`` feeds back the user's response.
Sequence-model policies encode the prefix once per step and score every
candidate from that shared state.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import nn
from .cfa import FutureAdvantageModel
from .data import Dataset, Trajectory
from .mem import MaskedEnvironmentModel, epochs_for, iterate_minibatches
from .models import EncoderConfig, SeqBatch, SequenceModel

AGENT_KINDS = ("mbcal", "mbcal_sfr", "gru4rec", "gru4rec_eps", "dqn", "ddqn", "mcpe")


def greedy_select(scores) -> np.ndarray | int:
    """Index of the best candidate; ties go to the lowest index."""
    scores = np.asarray(scores)
    if scores.shape[-1] == 0:
        raise ValueError("cannot select from an empty candidate set")
    idx = scores.argmax(axis=-1)
    return int(idx) if scores.ndim == 1 else idx


def epsilon_greedy(selection, n_candidates: int, epsilon: float, rng: np.random.Generator):
    """Replace each greedy index by a uniform random one with probability ``epsilon``."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must lie in [0, 1], got {epsilon}")
    selection = np.asarray(selection)
    explore = rng.random(selection.shape) < epsilon
    random_pick = rng.integers(0, n_candidates, size=selection.shape)
    out = np.where(explore, random_pick, selection)
    return int(out) if out.ndim == 0 else out


class Policy:
    name = "policy"
    epsilon = 0.0

    def begin(self, users) -> dict:
        return {"n": len(users)}

    def scores(self, state: dict, candidates: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def select(self, state: dict, candidates: np.ndarray, rng: np.random.Generator, explore: bool = False) -> np.ndarray:
        choice = greedy_select(self.scores(state, candidates))
        if explore and self.epsilon > 0:
            choice = epsilon_greedy(choice, candidates.shape[1], self.epsilon, rng)
        return choice

    def observe(self, state: dict, choice: np.ndarray, behaviors: np.ndarray) -> None:
        pass

    # single-trajectory conveniences
    def _replay(self, prefix: Trajectory) -> dict:
        state = self.begin(np.array([prefix.user]))
        if len(prefix):
            if prefix.candidates is None:
                # only the shown item matters for the prefix state
                cands = prefix.actions[:, None]
                choices = np.zeros(len(prefix), dtype=np.int64)
            else:
                cands = prefix.candidates
                choices = np.array([list(c).index(a) for c, a in zip(cands, prefix.actions)])
            for t in range(len(prefix)):
                self.scores(state, cands[t][None])
                self.observe(state, choices[t : t + 1], prefix.behaviors[t : t + 1])
        return state

    def score(self, prefix: Trajectory, candidates) -> np.ndarray:
        return self.scores(self._replay(prefix), np.asarray(candidates)[None])[0]

    def act(self, prefix: Trajectory, candidates, rng=None, explore: bool = False) -> int:
        candidates = np.asarray(candidates)
        state = self._replay(prefix)
        choice = self.select(state, candidates[None], rng or np.random.default_rng(0), explore)
        return int(candidates[int(np.asarray(choice).ravel()[0])])


class RandomPolicy(Policy):
    name = "random"
    epsilon = 1.0

    def select(self, state, candidates, rng, explore=False):
        return rng.integers(0, candidates.shape[1], size=candidates.shape[0])

    def scores(self, state, candidates):
        return np.zeros(candidates.shape)


def expected_reward_head(rewards: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
    return lambda logits: nn.softmax(logits) @ rewards


def scalar_head(out: np.ndarray) -> np.ndarray:
    return out[..., 0]


class SequencePolicy(Policy):
    """Sum of per-candidate scores from one or more sequence encoders."""

    def __init__(self, name: str, components: list[tuple[SequenceModel, Callable]], epsilon: float = 0.0):
        self.name = name
        self.components = components
        self.epsilon = epsilon

    def begin(self, users) -> dict:
        users = np.asarray(users, dtype=np.int64)
        enc = self.components[0][0]
        return {
            "h": [m.initial_state(users) for m, _ in self.components],
            "b": np.full(users.size, enc.start_token, dtype=np.int64),
            "pending": None,
        }

    def scores(self, state, candidates):
        total = 0.0
        pending = []
        for (model, head), h in zip(self.components, state["h"]):
            out, h_new = model.score_candidates(h, state["b"], candidates)
            total = total + head(out)
            pending.append(h_new)
        state["pending"] = pending
        return total

    def observe(self, state, choice, behaviors):
        rows = np.arange(len(choice))
        state["h"] = [h_new[rows, choice] for h_new in state["pending"]]
        state["b"] = np.asarray(behaviors, dtype=np.int64)
        state["pending"] = None


def mbcal_policy(mem: MaskedEnvironmentModel, fam: FutureAdvantageModel | None, epsilon: float = 0.1, name: str = "mbcal"):
    components = [(mem.encoder, expected_reward_head(mem.rewards))]
    if fam is not None:
        components.append((fam.encoder, scalar_head))
    return SequencePolicy(name, components, epsilon)


def gru4rec_policy(model: MaskedEnvironmentModel, epsilon: float = 0.0, name: str = "gru4rec"):
    """Greedy on predicted instant reward from a behavior classifier trained without masks."""
    return mbcal_policy(model, None, epsilon, name)


def mbcal_score(mem: MaskedEnvironmentModel, fam: FutureAdvantageModel, prefix: Trajectory, action: int) -> float:
    """r̂(prefix, a) + g(prefix, a)."""
    return float(mbcal_policy(mem, fam, 0.0).score(prefix, [action])[0])


# ---------------------------------------------------------------- Q learning


@dataclass
class QConfig:
    emb_dim: int = 32
    hidden: int = 32
    mlp_hidden: int = 32
    lr: float = 1e-3
    epochs: int = 3
    batch_size: int = 64
    min_updates: int = 0
    sync_every: int = 100
    seed: int = 2
    user_embedding: bool = True
    # MCPE: regress on the whole-session return (False) or on the return from step t (True)
    reward_to_go: bool = False


class QNetwork:
    """Online Q network with a periodically synchronized target copy."""

    def __init__(self, encoder: SequenceModel, lr: float = 1e-3, sync_every: int = 100):
        if encoder.config.out_dim != 1:
            raise ValueError("a Q network has one output")
        self.online = encoder
        self.target = encoder.copy()
        self.opt = nn.Adam(encoder.params, lr=lr)
        self.sync_every = sync_every
        self.updates = 0

    @classmethod
    def create(cls, n_users: int, n_items: int, n_behaviors: int, config: QConfig, rng=None):
        enc = EncoderConfig(
            n_users=n_users,
            n_items=n_items,
            n_behaviors=n_behaviors,
            out_dim=1,
            emb_dim=config.emb_dim,
            hidden=config.hidden,
            mlp_hidden=config.mlp_hidden,
            user_embedding=config.user_embedding,
        )
        rng = np.random.default_rng(config.seed) if rng is None else rng
        return cls(SequenceModel(enc, rng), config.lr, config.sync_every)

    def sync(self) -> None:
        self.target.params.load_from(self.online.params)

    def q_values(self, batch: SeqBatch, which: str = "online") -> np.ndarray:
        model = self.online if which == "online" else self.target
        return model.predict(batch)[..., 0]

    def _next_values(self, model: SequenceModel, batch: SeqBatch, next_candidates: np.ndarray) -> np.ndarray:
        """Q of next-step candidates ``(B, T-1, k)`` after each prefix, same shape."""
        hs = model.hidden_states(batch)
        B, T = batch.actions.shape
        k = next_candidates.shape[-1]
        out, _ = model.score_candidates(
            hs[:, 1:T].reshape(-1, hs.shape[-1]),
            batch.behaviors[:, : T - 1].ravel(),
            next_candidates.reshape(-1, k),
        )
        return out[..., 0].reshape(B, T - 1, k)

    def td_targets(self, batch: SeqBatch, candidates: np.ndarray, rewards: np.ndarray, gamma: float, double: bool = False):
        """r_t + γ max Q′(o_[1:t], a′) with r_T alone at the last step.

        With ``double`` the next action is chosen by the online network and
        valued by the target network.
        """
        targets = np.array(rewards, dtype=np.float64)
        if batch.actions.shape[1] > 1 and gamma != 0:
            nxt = np.asarray(candidates)[:, 1:]
            if double:
                pick = self._next_values(self.online, batch, nxt).argmax(axis=-1)
                # the target only has to value the chosen action
                chosen = np.take_along_axis(nxt, pick[..., None], axis=-1)
                boot = self._next_values(self.target, batch, chosen)[..., 0]
            else:
                boot = self._next_values(self.target, batch, nxt).max(axis=-1)
            targets[:, :-1] += gamma * boot
        return targets

    def regress(self, batch: SeqBatch, targets: np.ndarray) -> float:
        """One Adam step on the mean squared error to ``targets``; syncs the target every K steps."""
        pred = self.online.forward(batch)
        loss, grad = nn.mse_loss(pred[..., 0], targets)
        self.online.params.zero_grad()
        self.online.backward(grad[..., None])
        self.opt.step()
        self.updates += 1
        if self.updates % self.sync_every == 0:
            self.sync()
        return loss

    def policy(self, name: str, epsilon: float = 0.1) -> SequencePolicy:
        return SequencePolicy(name, [(self.online, scalar_head)], epsilon)


def dqn_update(qnet: QNetwork, batch: SeqBatch, candidates, rewards, gamma: float, double: bool = False) -> float:
    if batch.actions.shape[0] == 0:
        raise ValueError("empty batch")
    return qnet.regress(batch, qnet.td_targets(batch, candidates, rewards, gamma, double))


def ddqn_target(qnet: QNetwork, next_prefix: Trajectory | None, next_candidates, gamma: float, r: float) -> float:
    """Double-Q backup for one transition; ``next_prefix=None`` marks the terminal step."""
    if next_prefix is None:
        return float(r)
    online = SequencePolicy("online", [(qnet.online, scalar_head)])
    target = SequencePolicy("target", [(qnet.target, scalar_head)])
    pick = greedy_select(online.score(next_prefix, next_candidates))
    return float(r + gamma * target.score(next_prefix, next_candidates)[pick])


def dqn_target(qnet: QNetwork, next_prefix: Trajectory | None, next_candidates, gamma: float, r: float) -> float:
    if next_prefix is None:
        return float(r)
    target = SequencePolicy("target", [(qnet.target, scalar_head)])
    return float(r + gamma * np.max(target.score(next_prefix, next_candidates)))


def monte_carlo_targets(rewards: np.ndarray, reward_to_go: bool = False) -> np.ndarray:
    """Whole-session return at every step, or the return from each step onward."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if reward_to_go:
        return np.cumsum(rewards[..., ::-1], axis=-1)[..., ::-1].copy()
    return np.repeat(rewards.sum(axis=-1, keepdims=True), rewards.shape[-1], axis=-1)


def mcpe_update(qnet: QNetwork, batch: SeqBatch, rewards, reward_to_go: bool = False, horizon: int | None = None) -> float:
    if horizon is not None and batch.actions.shape[1] != horizon:
        raise ValueError(f"incomplete trajectories: {batch.actions.shape[1]} of {horizon} steps")
    return qnet.regress(batch, monte_carlo_targets(rewards, reward_to_go))


def train_q(
    dataset: Dataset,
    kind: str,
    config: QConfig,
    n_users: int,
    n_items: int,
    gamma: float,
    init: QNetwork | None = None,
) -> tuple[QNetwork, list[float]]:
    """Fit a DQN, DDQN or MCPE value network on complete logged sessions."""
    if kind not in ("dqn", "ddqn", "mcpe"):
        raise ValueError(f"unknown value-learning kind {kind!r}")
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    init_ss, order_ss = np.random.SeedSequence(config.seed).spawn(2)
    qnet = QNetwork.create(n_users, n_items, dataset.space.size, config, np.random.default_rng(init_ss))
    if init is not None:
        qnet.online.params.load_from(init.online.params)
        qnet.sync()
    rng = np.random.default_rng(order_ss)
    arrays = dataset.arrays()
    if kind != "mcpe" and "candidates" not in arrays:
        raise ValueError("TD learning needs the logged candidate sets")
    R = dataset.space.reward_array
    N = len(dataset)
    losses = []
    for _ in range(epochs_for(N, config.batch_size, config.epochs, config.min_updates)):
        total = 0.0
        for idx in iterate_minibatches(N, config.batch_size, rng):
            batch = SeqBatch(arrays["users"][idx], arrays["actions"][idx], arrays["behaviors"][idx], np.zeros_like(arrays["masked"][idx]))
            rewards = R[batch.behaviors]
            if kind == "mcpe":
                loss = mcpe_update(qnet, batch, rewards, config.reward_to_go, dataset.horizon)
            else:
                loss = dqn_update(qnet, batch, arrays["candidates"][idx], rewards, gamma, double=kind == "ddqn")
            total += loss * len(idx)
        losses.append(total / N)
    return qnet, losses
