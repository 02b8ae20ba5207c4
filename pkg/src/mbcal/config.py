"""Experiment configuration and its YAML file format.

A config file is a YAML mapping; every key is optional. Example::

    protocol: growing-batch        # or: batch
    agents: [mbcal, gru4rec, dqn]
    repeats: 3                     # run r uses agent_seed + r and exploration_seed + r
    rounds: 10
    train_sessions: 2000
    test_sessions: 1000
    log_sessions: 2000             # batch protocol: size of the static log
    logging_policy: random         # batch protocol: random or any agent kind
    gamma: 0.95
    epsilon: 0.1
    accumulate: true               # train on all rounds pooled (false: latest round only)
    warm_start: false              # start each round from the previous round's parameters
    simulator_seed: 0
    agent_seed: 0
    exploration_seed: 0
    simulator: {n_items: 200, temperature: 1.0, ...}
    mem: {epochs: 3, batch_size: 64, ...}
    fam: {...}
    q: {sync_every: 100, ...}
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .agents import AGENT_KINDS, QConfig
from .cfa import FamConfig
from .mem import MemConfig
from .simulator import SimConfig

PROTOCOLS = ("batch", "growing-batch")


@dataclass
class ExperimentConfig:
    protocol: str = "growing-batch"
    agents: tuple[str, ...] = AGENT_KINDS
    repeats: int = 3
    rounds: int = 10
    train_sessions: int = 2000
    test_sessions: int = 1000
    log_sessions: int = 2000
    logging_policy: str = "random"
    gamma: float = 0.95
    epsilon: float = 0.1
    accumulate: bool = True
    warm_start: bool = False
    simulator_seed: int = 0
    agent_seed: int = 0
    exploration_seed: int = 0
    simulator: SimConfig = field(default_factory=SimConfig)
    mem: MemConfig = field(default_factory=MemConfig)
    fam: FamConfig = field(default_factory=FamConfig)
    q: QConfig = field(default_factory=QConfig)

    def __post_init__(self):
        self.agents = tuple(self.agents)
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"protocol must be one of {PROTOCOLS}, got {self.protocol!r}")
        unknown = [a for a in self.agents if a not in AGENT_KINDS]
        if unknown:
            raise ValueError(f"unknown agent kinds {unknown}; choose from {AGENT_KINDS}")
        if self.logging_policy != "random" and self.logging_policy not in AGENT_KINDS:
            raise ValueError(f"unknown logging policy {self.logging_policy!r}")
        if not 1 <= self.rounds <= 40:
            raise ValueError("rounds must lie in 1..40")
        if min(self.repeats, self.train_sessions, self.test_sessions, self.log_sessions) < 1:
            raise ValueError("session counts and repeats must be positive")
        if not 0.0 <= self.gamma <= 1.0 or not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("gamma and epsilon must lie in [0, 1]")

    def seeds(self, repeat: int) -> dict[str, int]:
        return {
            "simulator": self.simulator_seed,
            "agent": self.agent_seed + repeat,
            "exploration": self.exploration_seed + repeat,
        }

    def to_dict(self) -> dict:
        d = asdict(self)
        d["agents"] = list(self.agents)
        d["simulator"] = self.simulator.to_dict()
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> ExperimentConfig:
        raw = dict(raw or {})
        known = {f.name for f in fields(cls)}
        extra = set(raw) - known
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        nested = {"simulator": SimConfig, "mem": MemConfig, "fam": FamConfig, "q": QConfig}
        for key, typ in nested.items():
            if key in raw:
                sub = dict(raw[key] or {})
                allowed = {f.name for f in fields(typ)}
                bad = set(sub) - allowed
                if bad:
                    raise ValueError(f"unknown keys in {key}: {sorted(bad)}")
                if key == "simulator" and "rewards" in sub:
                    sub["rewards"] = tuple(sub["rewards"])
                raw[key] = typ(**sub)
        return cls(**raw)

    def with_overrides(self, **changes) -> ExperimentConfig:
        return replace(self, **changes)


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    return ExperimentConfig.from_dict(yaml.safe_load(Path(path).read_text()) or {})


def dump_config(config: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=False))
