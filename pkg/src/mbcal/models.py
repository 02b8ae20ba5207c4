"""The Emb/Concat/GRU/MLP stack shared by the environment, advantage and Q models.

Inputs are staggered: the step-``t`` input is the previous behavior (a start
token at ``t = 1``) concatenated with the action at ``t``, so the hidden state
after step ``t`` sees the prefix ``o_1..o_{t-1}`` plus the candidate ``a_t``
and the head reads the prediction for step ``t`` off it.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import nn


@dataclass(frozen=True)
class EncoderConfig:
    n_users: int
    n_items: int
    n_behaviors: int
    out_dim: int
    emb_dim: int = 32
    hidden: int = 32
    mlp_hidden: int = 32
    user_embedding: bool = True

    def __post_init__(self):
        for name in ("n_users", "n_items", "n_behaviors", "out_dim", "emb_dim", "hidden"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def param_count(self) -> int:
        E, H, M = self.emb_dim, self.hidden, self.mlp_hidden
        n = (self.n_items + 1) * E + (self.n_behaviors + 1) * E
        if self.user_embedding:
            n += self.n_users * H
        n += 2 * E * 3 * H + H * 3 * H + 3 * H
        if M:
            n += H * M + M + M * self.out_dim + self.out_dim
        else:
            n += H * self.out_dim + self.out_dim
        return n


@dataclass
class SeqBatch:
    users: np.ndarray
    actions: np.ndarray
    behaviors: np.ndarray
    masked: np.ndarray

    @classmethod
    def from_arrays(cls, arrays: dict, index=None, masked: np.ndarray | None = None) -> SeqBatch:
        sel = slice(None) if index is None else index
        return cls(
            arrays["users"][sel],
            arrays["actions"][sel],
            arrays["behaviors"][sel],
            arrays["masked"][sel] if masked is None else masked,
        )

    @classmethod
    def from_trajectories(cls, trajs) -> SeqBatch:
        return cls(
            np.array([t.user for t in trajs], dtype=np.int64),
            np.array([t.actions for t in trajs], dtype=np.int64),
            np.array([t.behaviors for t in trajs], dtype=np.int64),
            np.array([t.masked for t in trajs], dtype=bool),
        )


class SequenceModel:
    """GRU sequence encoder with an MLP head of ``out_dim`` outputs."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        self.config = config
        c = config
        p = nn.Params()
        if c.user_embedding:
            p.add("emb.user", nn.embedding_init(rng, c.n_users, c.hidden))
        # row n_behaviors is the start token, row n_items the mask item
        p.add("emb.behavior", nn.embedding_init(rng, c.n_behaviors + 1, c.emb_dim))
        p.add("emb.item", nn.embedding_init(rng, c.n_items + 1, c.emb_dim))
        nn.gru_params(p, "gru", 2 * c.emb_dim, c.hidden, rng)
        sizes = [c.hidden, c.mlp_hidden, c.out_dim] if c.mlp_hidden else [c.hidden, c.out_dim]
        nn.mlp_params(p, "mlp", sizes, rng)
        self.params = p
        self._tape = None

    @property
    def start_token(self) -> int:
        return self.config.n_behaviors

    @property
    def mask_item(self) -> int:
        return self.config.n_items

    def copy(self) -> SequenceModel:
        clone = object.__new__(SequenceModel)
        clone.config = self.config
        clone.params = self.params.copy()
        clone._tape = None
        return clone

    # ------------------------------------------------------------ inputs

    def initial_state(self, users) -> np.ndarray:
        users = np.asarray(users, dtype=np.int64)
        if self.config.user_embedding:
            return nn.embedding_lookup(self.params["emb.user"], users, "user embedding").copy()
        return np.zeros((users.size, self.config.hidden))

    def _check_items(self, items: np.ndarray) -> None:
        if items.size and (items.min() < 0 or items.max() > self.config.n_items):
            bad = items[(items < 0) | (items > self.config.n_items)].ravel()[0]
            raise IndexError(f"unknown item id {int(bad)} (catalog has {self.config.n_items} items)")

    def _inputs(self, batch: SeqBatch) -> tuple[np.ndarray, np.ndarray]:
        actions = np.where(batch.masked, self.mask_item, batch.actions)
        self._check_items(actions)
        prev_b = np.empty_like(batch.behaviors)
        prev_b[:, 0] = self.start_token
        prev_b[:, 1:] = batch.behaviors[:, :-1]
        return prev_b, actions

    def _embed(self, prev_b: np.ndarray, actions: np.ndarray) -> np.ndarray:
        eb = nn.embedding_lookup(self.params["emb.behavior"], prev_b, "behavior embedding")
        ea = nn.embedding_lookup(self.params["emb.item"], actions, "item embedding")
        return np.concatenate([eb, ea], axis=-1)

    def step_inputs(self, batch: SeqBatch) -> np.ndarray:
        """Concatenated (previous behavior, action) embeddings, shape (B, T, 2E)."""
        return self._embed(*self._inputs(batch))

    def embed_step(self, prev_behavior, action) -> np.ndarray:
        action = np.asarray(action)
        self._check_items(action)
        return self._embed(np.asarray(prev_behavior), action)

    def gru(self, h: np.ndarray, x: np.ndarray) -> np.ndarray:
        return nn.gru_step(self.params, "gru", h, x)

    def head(self, h: np.ndarray) -> np.ndarray:
        return nn.mlp_forward(self.params, "mlp", h)

    # ------------------------------------------------------------ training graph

    def forward(self, batch: SeqBatch) -> np.ndarray:
        """Head outputs ``(B, T, out_dim)``; records the tape for :meth:`backward`."""
        prev_b, actions = self._inputs(batch)
        x = self._embed(prev_b, actions)
        h = self.initial_state(batch.users)
        gru_tape: list = []
        hs = []
        for t in range(x.shape[1]):
            h = nn.gru_step(self.params, "gru", h, x[:, t], gru_tape)
            hs.append(h)
        H = np.stack(hs, axis=1)
        mlp_tape: list = []
        out = nn.mlp_forward(self.params, "mlp", H, mlp_tape)
        self._tape = (batch.users, prev_b, actions, gru_tape, mlp_tape[0])
        return out

    def backward(self, dout: np.ndarray) -> None:
        """Accumulate parameter gradients for upstream gradient ``dout`` (B, T, out_dim)."""
        if self._tape is None:
            raise nn.StateError("backward called before forward")
        users, prev_b, actions, gru_tape, acts = self._tape
        self._tape = None
        p = self.params
        dH = nn.mlp_backward(p, "mlp", acts, dout)
        E = self.config.emb_dim
        dx = np.empty((dH.shape[0], dH.shape[1], 2 * E))
        dh = np.zeros_like(dH[:, 0])
        for t in reversed(range(dH.shape[1])):
            dh = dh + dH[:, t]
            dh, dx[:, t] = nn.gru_step_backward(p, "gru", gru_tape[t], dh)
        nn.embedding_backward(p.grads["emb.behavior"], prev_b, dx[..., :E])
        nn.embedding_backward(p.grads["emb.item"], actions, dx[..., E:])
        if self.config.user_embedding:
            nn.embedding_backward(p.grads["emb.user"], users, dh)

    # ------------------------------------------------------------ inference

    def predict(self, batch: SeqBatch) -> np.ndarray:
        """Head outputs without recording a tape."""
        return self.head(self.hidden_states(batch)[:, 1:])

    def hidden_states(self, batch: SeqBatch) -> np.ndarray:
        """States ``(B, T + 1, H)``; index 0 is the initial state, index ``t`` follows step ``t``."""
        x = self.step_inputs(batch)
        h = self.initial_state(batch.users)
        hs = [h]
        for t in range(x.shape[1]):
            h = nn.gru_step(self.params, "gru", h, x[:, t])
            hs.append(h)
        return np.stack(hs, axis=1)

    def score_candidates(
        self, h_prev: np.ndarray, prev_behavior: np.ndarray, candidates: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        """Evaluate every candidate action against a shared encoded prefix.

        ``h_prev`` (B, H) is the state after the prefix, ``prev_behavior`` (B,)
        its last behavior (or the start token), ``candidates`` (B, k).
        Returns head outputs (B, k, out_dim) and candidate states (B, k, H).
        """
        candidates = np.asarray(candidates, dtype=np.int64)
        self._check_items(candidates)
        if candidates.ndim != 2:
            raise nn.ShapeError(f"candidates must be (B, k), got {candidates.shape}")
        eb = nn.embedding_lookup(self.params["emb.behavior"], np.asarray(prev_behavior), "behavior embedding")
        # project the small item table once and gather, instead of one product per candidate row
        W, E = self.params["gru.W"], self.config.emb_dim
        item_w = self.params["emb.item"] @ W[E:]
        xw = (eb @ W[:E] + self.params["gru.b"])[:, None, :] + item_w[candidates]
        h_new = nn.gru_step_projected(self.params, "gru", h_prev[:, None, :], xw)
        return nn.mlp_forward(self.params, "mlp", h_new), h_new

    def save(self, path, meta: dict | None = None) -> None:
        nn.save_params(self.params, path, {"encoder": asdict(self.config), **(meta or {})})

    @classmethod
    def load(cls, path) -> tuple[SequenceModel, dict]:
        params, meta = nn.load_params(path)
        model = object.__new__(cls)
        model.config = EncoderConfig(**meta["encoder"])
        model.params = params
        model._tape = None
        return model, meta


def prefix_batch(traj, t: int, action: int) -> SeqBatch:
    """Batch of one holding ``o_1..o_{t-1}`` followed by ``action`` at step ``t`` (1-based)."""
    actions = np.append(traj.actions[: t - 1], action)
    behaviors = np.append(traj.behaviors[: t - 1], 0)
    masked = np.append(traj.masked[: t - 1], False)
    return SeqBatch(np.array([traj.user]), actions[None], behaviors[None], masked[None])
