"""Simulated future reward, counterfactual future advantage, and the advantage model."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .data import Dataset, Trajectory, apply_mask
from .mem import MaskedEnvironmentModel, epochs_for, iterate_minibatches
from .models import EncoderConfig, SeqBatch, SequenceModel

CFA = "cfa"
SFR_ONLY = "sfr"
LABEL_MODES = (CFA, SFR_ONLY)


def _check_step(t: int, horizon: int) -> None:
    if not 1 <= t <= horizon:
        raise IndexError(f"step {t} outside 1..{horizon}")


def discounted_tail(r: np.ndarray, gamma: float) -> np.ndarray:
    """``out[..., t-1] = Σ_{τ>t} γ^{τ−t} r[..., τ-1]`` for every step ``t``."""
    out = np.zeros_like(r, dtype=np.float64)
    acc = np.zeros(r.shape[:-1])
    for t in range(r.shape[-1] - 2, -1, -1):
        acc = gamma * (r[..., t + 1] + acc)
        out[..., t] = acc
    return out


def simulated_future_reward(mem: MaskedEnvironmentModel, traj: Trajectory, t: int, gamma: float) -> float:
    """Discounted MEM-predicted reward over steps ``t+1..T`` of the logged trajectory.

    The logged actions and behaviors (and any mask flags already on ``traj``)
    form every prefix; nothing is re-sampled.
    """
    _check_step(t, len(traj))
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"discount must lie in [0, 1], got {gamma}")
    r = mem.expected_rewards(SeqBatch.from_trajectories([traj]))[0]
    return float(discounted_tail(r, gamma)[t - 1])


def counterfactual_future_advantage(mem: MaskedEnvironmentModel, traj: Trajectory, t: int, gamma: float) -> float:
    return simulated_future_reward(mem, traj, t, gamma) - simulated_future_reward(
        mem, apply_mask(traj, {t}), t, gamma
    )


@dataclass
class CfaLabelSet:
    """Per (trajectory, step) future-reward labels.

    ``sfr_original[i, t-1]`` and ``sfr_masked[i, t-1]`` are the simulated future
    rewards of trajectory ``i`` without and with step ``t`` masked.
    """

    tids: list[str]
    sfr_original: np.ndarray
    sfr_masked: np.ndarray
    mode: str = CFA
    gamma: float = 0.95

    def __post_init__(self):
        if self.mode not in LABEL_MODES:
            raise ValueError(f"label mode must be one of {LABEL_MODES}, got {self.mode!r}")

    @property
    def cfa(self) -> np.ndarray:
        return self.sfr_original - self.sfr_masked

    @property
    def values(self) -> np.ndarray:
        return self.cfa if self.mode == CFA else self.sfr_original

    def __len__(self) -> int:
        return self.sfr_original.size

    def records(self):
        for i, tid in enumerate(self.tids):
            for t in range(self.sfr_original.shape[1]):
                yield {
                    "id": tid,
                    "t": t + 1,
                    "sfr": float(self.sfr_original[i, t]),
                    "sfr_masked": float(self.sfr_masked[i, t]),
                    "cfa": float(self.sfr_original[i, t] - self.sfr_masked[i, t]),
                    "mode": self.mode,
                }

    def save(self, path: str | Path) -> None:
        with Path(path).open("w", encoding="utf-8") as fh:
            fh.write(json.dumps({"format": "mbcal-labels", "version": 1, "mode": self.mode, "gamma": self.gamma}) + "\n")
            for rec in self.records():
                fh.write(json.dumps(rec) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> CfaLabelSet:
        with Path(path).open(encoding="utf-8") as fh:
            header = json.loads(fh.readline())
            if header.get("format") != "mbcal-labels" or header.get("version") != 1:
                raise ValueError(f"{path}: not a version-1 label file")
            rows: dict[str, dict[int, tuple[float, float]]] = {}
            for lineno, line in enumerate(fh, start=2):
                try:
                    rec = json.loads(line)
                    rows.setdefault(rec["id"], {})[int(rec["t"])] = (rec["sfr"], rec["sfr_masked"])
                except (json.JSONDecodeError, KeyError) as exc:
                    raise ValueError(f"{path}:{lineno}: malformed label record ({exc})") from None
        tids = list(rows)
        T = max(len(v) for v in rows.values()) if rows else 0
        orig = np.zeros((len(tids), T))
        masked = np.zeros((len(tids), T))
        for i, tid in enumerate(tids):
            if sorted(rows[tid]) != list(range(1, T + 1)):
                raise ValueError(f"{path}: trajectory {tid!r} lacks labels for some steps")
            for t, (a, b) in rows[tid].items():
                orig[i, t - 1], masked[i, t - 1] = a, b
        return cls(tids, orig, masked, header["mode"], header["gamma"])


def _future_rewards_masked(mem: MaskedEnvironmentModel, batch: SeqBatch) -> np.ndarray:
    """``out[i, t-1, τ-1]`` = r̂ at step τ > t with step ``t`` masked (zero elsewhere)."""
    enc = mem.encoder
    x = enc.step_inputs(batch)
    hs = enc.hidden_states(batch)
    B, T = batch.actions.shape
    prev_b = np.empty(B, dtype=np.int64)
    out = np.zeros((B, T, T))
    for t in range(T - 1):
        prev_b[:] = enc.start_token if t == 0 else batch.behaviors[:, t - 1]
        h = enc.gru(hs[:, t], enc.embed_step(prev_b, np.full(B, enc.mask_item)))
        for tau in range(t + 1, T):
            h = enc.gru(h, x[:, tau])
            out[:, t, tau] = nn.softmax(enc.head(h)) @ mem.rewards
    return out


def build_cfa_labels(
    mem: MaskedEnvironmentModel, dataset: Dataset, gamma: float, mode: str = CFA, chunk: int = 2048
) -> CfaLabelSet:
    """SFR of each logged trajectory with and without each single step masked."""
    if mode not in LABEL_MODES:
        raise ValueError(f"label mode must be one of {LABEL_MODES}, got {mode!r}")
    arrays = dataset.arrays()
    N, T = arrays["actions"].shape
    orig = np.zeros((N, T))
    masked = np.zeros((N, T))
    for start in range(0, N, chunk):
        sl = slice(start, start + chunk)
        batch = SeqBatch.from_arrays(arrays, sl)
        r = mem.expected_rewards(batch)
        orig[sl] = discounted_tail(r, gamma)
        # same recursion as the unmasked tail, so equal predictions give an exact zero
        tails = discounted_tail(_future_rewards_masked(mem, batch), gamma)
        masked[sl] = np.diagonal(tails, axis1=1, axis2=2)
    return CfaLabelSet([t.tid for t in dataset], orig, masked, mode, gamma)


# ---------------------------------------------------------------- advantage model


@dataclass
class FamConfig:
    emb_dim: int = 32
    hidden: int = 32
    mlp_hidden: int = 32
    lr: float = 1e-3
    epochs: int = 3
    batch_size: int = 64
    min_updates: int = 0
    seed: int = 1
    user_embedding: bool = True


class FutureAdvantageModel:
    """Same encoder layout as the environment model with a scalar head."""

    def __init__(self, encoder: SequenceModel):
        if encoder.config.out_dim != 1:
            raise ValueError("the advantage head must have one output")
        self.encoder = encoder

    @classmethod
    def create(cls, n_users: int, n_items: int, n_behaviors: int, config: FamConfig, rng=None):
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
        return cls(SequenceModel(enc, rng))

    def predict(self, batch: SeqBatch) -> np.ndarray:
        return self.encoder.predict(batch)[..., 0]

    def candidate_values(self, h_prev, prev_behavior, candidates):
        out, h_new = self.encoder.score_candidates(h_prev, prev_behavior, candidates)
        return out[..., 0], h_new


def fam_forward(fam: FutureAdvantageModel, prefix: Trajectory, action: int) -> float:
    batch = SeqBatch(
        np.array([prefix.user]),
        np.append(prefix.actions, action)[None],
        np.append(prefix.behaviors, 0)[None],
        np.append(prefix.masked, False)[None],
    )
    return float(fam.predict(batch)[0, -1])


def fit_regression(
    model: SequenceModel,
    arrays: dict,
    targets: np.ndarray,
    lr: float,
    epochs: int,
    batch_size: int,
    min_updates: int,
    rng: np.random.Generator,
) -> list[float]:
    """Minimize mean squared error between the scalar head and ``targets`` (N, T)."""
    opt = nn.Adam(model.params, lr=lr)
    N = targets.shape[0]
    losses = []
    for _ in range(epochs_for(N, batch_size, epochs, min_updates)):
        total = 0.0
        for idx in iterate_minibatches(N, batch_size, rng):
            pred = model.forward(SeqBatch.from_arrays(arrays, idx))
            loss, grad = nn.mse_loss(pred[..., 0], targets[idx])
            total += loss * len(idx)
            model.params.zero_grad()
            model.backward(grad[..., None])
            opt.step()
        losses.append(total / N)
    return losses


def train_fam(
    dataset: Dataset,
    labels: CfaLabelSet,
    config: FamConfig,
    n_users: int,
    n_items: int,
    init: FutureAdvantageModel | None = None,
) -> tuple[FutureAdvantageModel, list[float]]:
    """Regress the advantage model onto ``labels.values`` over the unmasked trajectories."""
    if labels.tids != [t.tid for t in dataset] or labels.sfr_original.shape != (len(dataset), dataset.horizon):
        raise ValueError("labels are not aligned with the dataset")
    init_ss, order_ss = np.random.SeedSequence(config.seed).spawn(2)
    fam = FutureAdvantageModel.create(n_users, n_items, dataset.space.size, config, np.random.default_rng(init_ss))
    if init is not None:
        fam.encoder.params.load_from(init.encoder.params)
    arrays = dataset.arrays()
    arrays["masked"] = np.zeros_like(arrays["masked"])
    losses = fit_regression(
        fam.encoder,
        arrays,
        labels.values,
        config.lr,
        config.epochs,
        config.batch_size,
        config.min_updates,
        np.random.default_rng(order_ss),
    )
    return fam, losses
