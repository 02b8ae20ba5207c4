"""Sessions, behavior spaces, masking, and the JSON-lines dataset format.

Step indices in the public API are 1-based (``t`` in ``1..T``), matching the
usual way trajectories are written down; arrays stay 0-based internally.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

FORMAT = "mbcal-dataset"
FORMAT_VERSION = 1


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class BehaviorSpace:
    rewards: tuple[float, ...]
    names: tuple[str, ...] = ()

    def __post_init__(self):
        rewards = tuple(float(r) for r in self.rewards)
        object.__setattr__(self, "rewards", rewards)
        if len(rewards) < 2:
            raise ValueError("a behavior space needs at least two behaviors")
        if not self.names:
            object.__setattr__(self, "names", tuple(f"B{n + 1}" for n in range(len(rewards))))
        elif len(self.names) != len(rewards):
            raise ValueError("names and rewards must have the same length")

    @property
    def size(self) -> int:
        return len(self.rewards)

    @property
    def reward_array(self) -> np.ndarray:
        return np.asarray(self.rewards, dtype=np.float64)

    @classmethod
    def ratings(cls, levels: int = 6) -> BehaviorSpace:
        """Star-rating style space: behavior n earns reward n."""
        return cls(tuple(range(levels)))


def reward_of(behavior: int, space: BehaviorSpace) -> float:
    if not 0 <= behavior < space.size:
        raise IndexError(f"behavior {behavior} not in a space of {space.size} behaviors")
    return space.rewards[behavior]


class Step(NamedTuple):
    action: int
    behavior: int
    masked: bool


@dataclass
class Trajectory:
    """One session of ``T`` (action, behavior) pairs.

    ``masked`` flags positions whose action is replaced by the mask item at
    model-input time; the logged action itself is kept.
    """

    user: int
    actions: np.ndarray
    behaviors: np.ndarray
    masked: np.ndarray | None = None
    candidates: np.ndarray | None = None
    tid: str = ""
    policy: str = ""
    round: int = 0

    def __post_init__(self):
        self.actions = np.asarray(self.actions, dtype=np.int64)
        self.behaviors = np.asarray(self.behaviors, dtype=np.int64)
        if self.actions.shape != self.behaviors.shape or self.actions.ndim != 1:
            raise ValueError("actions and behaviors must be 1-D and of equal length")
        if self.masked is None:
            self.masked = np.zeros(len(self.actions), dtype=bool)
        else:
            self.masked = np.asarray(self.masked, dtype=bool)
        if self.candidates is not None:
            self.candidates = np.asarray(self.candidates, dtype=np.int64)
            if len(self.candidates) != len(self.actions):
                raise ValueError("one candidate list per step is required")

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def steps(self) -> list[Step]:
        return [Step(int(a), int(b), bool(m)) for a, b, m in zip(self.actions, self.behaviors, self.masked)]

    def rewards(self, space: BehaviorSpace) -> np.ndarray:
        return space.reward_array[self.behaviors]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Trajectory):
            return NotImplemented
        same_cands = (self.candidates is None and other.candidates is None) or (
            self.candidates is not None
            and other.candidates is not None
            and np.array_equal(self.candidates, other.candidates)
        )
        return (
            self.user == other.user
            and np.array_equal(self.actions, other.actions)
            and np.array_equal(self.behaviors, other.behaviors)
            and np.array_equal(self.masked, other.masked)
            and same_cands
            and (self.tid, self.policy, self.round) == (other.tid, other.policy, other.round)
        )


def mask_positions(traj: Trajectory, p_mask: float, rng: np.random.Generator) -> set[int]:
    """Draw each step ``t`` in ``1..T`` independently with probability ``p_mask``."""
    if not 0.0 <= p_mask <= 1.0:
        raise ValueError(f"p_mask must lie in [0, 1], got {p_mask}")
    hits = rng.random(len(traj)) < p_mask
    return {int(t) + 1 for t in np.flatnonzero(hits)}


def apply_mask(traj: Trajectory, positions: Iterable[int]) -> Trajectory:
    masked = traj.masked.copy()
    for t in positions:
        if not 1 <= t <= len(traj):
            raise IndexError(f"mask position {t} outside 1..{len(traj)}")
        masked[t - 1] = True
    return replace(traj, masked=masked)


@dataclass
class Dataset:
    """Trajectories sharing one behavior space and horizon."""

    space: BehaviorSpace
    horizon: int
    trajectories: list[Trajectory] = field(default_factory=list)
    policy: str = ""
    round: int = 0

    def __post_init__(self):
        for traj in self.trajectories:
            self._check(traj)

    def _check(self, traj: Trajectory) -> None:
        if len(traj) != self.horizon:
            raise ValueError(f"trajectory {traj.tid!r} has {len(traj)} steps, expected {self.horizon}")
        if traj.behaviors.size and (traj.behaviors.min() < 0 or traj.behaviors.max() >= self.space.size):
            raise ValueError(f"trajectory {traj.tid!r} has a behavior outside the behavior space")

    def __len__(self) -> int:
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    def __getitem__(self, i):
        return self.trajectories[i]

    def append(self, traj: Trajectory) -> None:
        self._check(traj)
        self.trajectories.append(traj)

    def extend(self, other: Dataset) -> None:
        if other.space != self.space or other.horizon != self.horizon:
            raise ValueError("datasets disagree on behavior space or horizon")
        for traj in other:
            self.append(traj)

    def subset(self, index) -> Dataset:
        return Dataset(self.space, self.horizon, [self.trajectories[i] for i in index], self.policy, self.round)

    def ids(self) -> set[str]:
        return {t.tid for t in self.trajectories}

    def arrays(self) -> dict[str, np.ndarray]:
        """Stacked ``users`` (N,), ``actions``/``behaviors``/``masked`` (N, T), ``candidates`` (N, T, k)."""
        trajs = self.trajectories
        out = {
            "users": np.array([t.user for t in trajs], dtype=np.int64),
            "actions": np.array([t.actions for t in trajs], dtype=np.int64).reshape(len(trajs), self.horizon),
            "behaviors": np.array([t.behaviors for t in trajs], dtype=np.int64).reshape(len(trajs), self.horizon),
            "masked": np.array([t.masked for t in trajs], dtype=bool).reshape(len(trajs), self.horizon),
        }
        if trajs and all(t.candidates is not None for t in trajs):
            out["candidates"] = np.stack([t.candidates for t in trajs])
        return out

    def total_rewards(self) -> np.ndarray:
        R = self.space.reward_array
        return np.array([R[t.behaviors].sum() for t in self.trajectories])


# ---------------------------------------------------------------- storage


def _header(dataset: Dataset) -> dict:
    return {
        "format": FORMAT,
        "version": FORMAT_VERSION,
        "n_behaviors": dataset.space.size,
        "rewards": list(dataset.space.rewards),
        "names": list(dataset.space.names),
        "horizon": dataset.horizon,
    }


def _record(traj: Trajectory) -> dict:
    rec = {
        "id": traj.tid,
        "user": int(traj.user),
        "steps": [{"a": int(a), "b": int(b)} for a, b in zip(traj.actions, traj.behaviors)],
        "policy": traj.policy,
        "round": int(traj.round),
    }
    if traj.masked.any():
        rec["masked"] = [int(t) + 1 for t in np.flatnonzero(traj.masked)]
    if traj.candidates is not None:
        rec["candidates"] = traj.candidates.tolist()
    return rec


def save_dataset(dataset: Dataset, path: str | Path, append: bool = False) -> None:
    """Write one header line, then one session per line.

    With ``append=True`` the lines are added to an existing file; readers
    accept repeated headers as long as they agree.
    """
    path = Path(path)
    with path.open("a" if append else "w", encoding="utf-8") as fh:
        fh.write(json.dumps(_header(dataset)) + "\n")
        for traj in dataset:
            fh.write(json.dumps(_record(traj)) + "\n")


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    header = None
    dataset = None
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"{path}:{lineno}: malformed record ({exc.msg})") from None
            if "format" in rec:
                if rec.get("format") != FORMAT:
                    raise DatasetFormatError(f"{path}:{lineno}: unknown format {rec.get('format')!r}")
                if rec.get("version") != FORMAT_VERSION:
                    raise DatasetFormatError(
                        f"{path}:{lineno}: format version {rec.get('version')} is not supported (expected {FORMAT_VERSION})"
                    )
                if header is None:
                    header = rec
                    space = BehaviorSpace(tuple(rec["rewards"]), tuple(rec.get("names", ())))
                    if space.size != rec["n_behaviors"]:
                        raise DatasetFormatError(f"{path}:{lineno}: reward map does not match behavior count")
                    dataset = Dataset(space, int(rec["horizon"]))
                elif {k: rec.get(k) for k in ("n_behaviors", "rewards", "horizon")} != {
                    k: header.get(k) for k in ("n_behaviors", "rewards", "horizon")
                }:
                    raise DatasetFormatError(f"{path}:{lineno}: header disagrees with the first header")
                continue
            if dataset is None:
                raise DatasetFormatError(f"{path}:{lineno}: session record before header")
            try:
                steps = rec["steps"]
                traj = Trajectory(
                    user=int(rec["user"]),
                    actions=[s["a"] for s in steps],
                    behaviors=[s["b"] for s in steps],
                    candidates=rec.get("candidates"),
                    tid=str(rec.get("id", "")),
                    policy=str(rec.get("policy", "")),
                    round=int(rec.get("round", 0)),
                )
                if "masked" in rec:
                    traj = apply_mask(traj, rec["masked"])
                dataset.append(traj)
            except (KeyError, TypeError, ValueError, IndexError) as exc:
                raise DatasetFormatError(f"{path}:{lineno}: invalid session record ({exc})") from None
    if dataset is None:
        raise DatasetFormatError(f"{path}: missing header line")
    return dataset
