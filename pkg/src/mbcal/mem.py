"""Masked environment model: next-behavior distribution and learned reward."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .data import BehaviorSpace, Dataset, Trajectory
from .models import EncoderConfig, SeqBatch, SequenceModel


@dataclass
class MemConfig:
    emb_dim: int = 32
    hidden: int = 32
    mlp_hidden: int = 32
    p_mask: float = 0.2
    lr: float = 1e-3
    epochs: int = 3
    batch_size: int = 64
    min_updates: int = 0
    seed: int = 0
    user_embedding: bool = True
    # False draws the masked copy D_M once per training call instead of per epoch
    resample_masks: bool = True

    def __post_init__(self):
        if not 0.0 <= self.p_mask <= 1.0:
            raise ValueError(f"p_mask must lie in [0, 1], got {self.p_mask}")
        if min(self.emb_dim, self.hidden, self.batch_size) <= 0 or self.epochs < 0:
            raise ValueError("sizes must be positive")


class MaskedEnvironmentModel:
    def __init__(self, encoder: SequenceModel, space: BehaviorSpace):
        if encoder.config.out_dim != space.size:
            raise ValueError("head size must equal the number of behaviors")
        self.encoder = encoder
        self.space = space
        self.rewards = space.reward_array

    @classmethod
    def create(cls, space: BehaviorSpace, n_users: int, n_items: int, config: MemConfig, rng=None):
        enc = EncoderConfig(
            n_users=n_users,
            n_items=n_items,
            n_behaviors=space.size,
            out_dim=space.size,
            emb_dim=config.emb_dim,
            hidden=config.hidden,
            mlp_hidden=config.mlp_hidden,
            user_embedding=config.user_embedding,
        )
        rng = np.random.default_rng(config.seed) if rng is None else rng
        return cls(SequenceModel(enc, rng), space)

    @property
    def mask_item(self) -> int:
        return self.encoder.mask_item

    def behavior_probs(self, batch: SeqBatch) -> np.ndarray:
        return nn.softmax(self.encoder.predict(batch))

    def expected_rewards(self, batch: SeqBatch) -> np.ndarray:
        """r̂ at every step, shape (B, T)."""
        return self.behavior_probs(batch) @ self.rewards

    def candidate_rewards(self, h_prev, prev_behavior, candidates):
        logits, h_new = self.encoder.score_candidates(h_prev, prev_behavior, candidates)
        return nn.softmax(logits) @ self.rewards, h_new


def _prefix_batch(prefix: Trajectory, action: int) -> SeqBatch:
    return SeqBatch(
        np.array([prefix.user]),
        np.append(prefix.actions, action)[None],
        np.append(prefix.behaviors, 0)[None],
        np.append(prefix.masked, False)[None],
    )


def mem_forward(mem: MaskedEnvironmentModel, prefix: Trajectory, action: int) -> np.ndarray:
    """Distribution over behaviors after ``prefix`` when ``action`` is shown.

    ``prefix`` holds steps ``1..t-1`` (possibly empty); pass ``mem.mask_item``
    as the action for the counterfactual query.
    """
    return mem.behavior_probs(_prefix_batch(prefix, action))[0, -1]


def expected_reward(mem: MaskedEnvironmentModel, prefix: Trajectory, action: int) -> float:
    return float(mem_forward(mem, prefix, action) @ mem.rewards)


def iterate_minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def epochs_for(n: int, batch_size: int, epochs: int, min_updates: int) -> int:
    per_epoch = math.ceil(n / batch_size)
    return max(epochs, math.ceil(min_updates / per_epoch)) if per_epoch else 0


def train_mem(
    dataset: Dataset,
    config: MemConfig,
    n_users: int,
    n_items: int,
    masking: bool = True,
    init: MaskedEnvironmentModel | None = None,
) -> tuple[MaskedEnvironmentModel, list[float]]:
    """Fit the model by minimizing mean NLL of the logged behaviors on masked copies.

    The loss covers every position, masked or not. Mask positions and
    minibatch order come from separate streams, so ``p_mask = 0`` and
    ``masking=False`` give identical runs. ``init`` warm-starts from another
    model's parameters.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train the environment model on an empty dataset")
    root = np.random.SeedSequence(config.seed)
    init_ss, mask_ss, order_ss = root.spawn(3)
    mem = MaskedEnvironmentModel.create(dataset.space, n_users, n_items, config, np.random.default_rng(init_ss))
    if init is not None:
        mem.encoder.params.load_from(init.encoder.params)
    mask_rng = np.random.default_rng(mask_ss)
    order_rng = np.random.default_rng(order_ss)
    model = mem.encoder
    opt = nn.Adam(model.params, lr=config.lr)
    arrays = dataset.arrays()
    N, T = arrays["actions"].shape
    n_epochs = epochs_for(N, config.batch_size, config.epochs, config.min_updates)
    masks = None
    losses = []
    for epoch in range(n_epochs):
        if masks is None or config.resample_masks:
            draw = mask_rng.random((N, T)) < config.p_mask
            masks = arrays["masked"] | (draw if masking else False)
        total = 0.0
        for idx in iterate_minibatches(N, config.batch_size, order_rng):
            batch = SeqBatch.from_arrays(arrays, idx, masks[idx])
            probs = nn.softmax(model.forward(batch))
            labels = batch.behaviors
            total += nn.nll_loss(probs.reshape(-1, probs.shape[-1]), labels.ravel()) * len(idx)
            model.params.zero_grad()
            model.backward(nn.softmax_nll_grad(probs, labels) / labels.size)
            opt.step()
        losses.append(total / N)
    return mem, losses


def evaluate_mem(mem: MaskedEnvironmentModel, dataset: Dataset) -> dict:
    """Mean NLL and per-behavior F1 of argmax predictions on ``dataset``."""
    arrays = dataset.arrays()
    probs = mem.behavior_probs(SeqBatch.from_arrays(arrays))
    labels = arrays["behaviors"].ravel()
    flat = probs.reshape(-1, probs.shape[-1])
    pred = flat.argmax(axis=1)
    f1 = []
    for n in range(mem.space.size):
        tp = np.sum((pred == n) & (labels == n))
        fp = np.sum((pred == n) & (labels != n))
        fn = np.sum((pred != n) & (labels == n))
        f1.append(float(2 * tp / (2 * tp + fp + fn)) if tp + fp + fn else 0.0)
    return {"nll": nn.nll_loss(flat, labels), "f1": f1, "accuracy": float(np.mean(pred == labels))}
