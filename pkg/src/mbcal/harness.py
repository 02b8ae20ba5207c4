"""Batch-RL and Growing Batch-RL evaluation against the synthetic users."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import agents as ag
from .cfa import CFA, SFR_ONLY, FutureAdvantageModel, build_cfa_labels, train_fam
from .config import ExperimentConfig
from .data import BehaviorSpace, Dataset
from .mem import MaskedEnvironmentModel, train_mem
from .models import SeqBatch, SequenceModel
from .simulator import UserSimulator, run_sessions

log = logging.getLogger(__name__)

CSV_COLUMNS = (
    "agent",
    "seed",
    "round",
    "avg_reward",
    "std_reward",
    "train_sessions",
    "test_sessions",
    "interactions",
    "mse_objective",
    "mem_nll",
)

_PHASES = {"log": 0, "train": 1, "test": 2, "pilot": 3}
_COMPONENTS = {"mem": 0, "fam": 1, "q": 2}


class ProtocolViolation(RuntimeError):
    pass


@dataclass
class RoundMetrics:
    agent: str
    seed: int
    round: int
    avg_reward: float
    std_reward: float
    train_sessions: int
    test_sessions: int
    interactions: int
    mse_objective: float | None = None
    mem_nll: float | None = None
    wall_clock: float = 0.0

    def row(self) -> dict:
        return {k: getattr(self, k) for k in CSV_COLUMNS}


@dataclass
class TrainedAgent:
    kind: str
    policy: ag.Policy
    mem: object = None
    fam: object = None
    qnet: ag.QNetwork | None = None
    diagnostics: dict = field(default_factory=dict)


@dataclass
class ProtocolAudit:
    """Bookkeeping for data hygiene and interaction budgets."""

    train_ids: set = field(default_factory=set)
    test_ids: set = field(default_factory=set)
    interactions: int = 0

    def record_training(self, dataset: Dataset) -> None:
        self.train_ids |= dataset.ids()

    def record_test(self, dataset: Dataset) -> None:
        self.test_ids |= dataset.ids()

    def check(self) -> None:
        leaked = self.train_ids & self.test_ids
        if leaked:
            raise ProtocolViolation(f"{len(leaked)} test trajectories entered training, e.g. {sorted(leaked)[:3]}")


def average_reward_per_session(testset: Dataset, space: BehaviorSpace | None = None) -> float:
    if len(testset) == 0:
        raise ValueError("average reward of an empty test set")
    space = space or testset.space
    R = space.reward_array
    return float(np.mean([R[t.behaviors].sum() for t in testset]))


def _seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def _env_rng(config: ExperimentConfig, repeat: int, round_index: int, phase: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([config.simulator_seed, repeat, round_index, _PHASES[phase]]))


def _tids(prefix: str, n: int) -> list[str]:
    return [f"{prefix}-{i}" for i in range(n)]


# ---------------------------------------------------------------- policy update


def policy_update(
    kind: str,
    dataset: Dataset,
    config: ExperimentConfig,
    n_users: int,
    n_items: int,
    seed: int,
    previous: TrainedAgent | None = None,
) -> TrainedAgent:
    """Train ``kind`` on ``dataset`` and return its ε-greedy-capable policy."""
    init = previous if config.warm_start else None
    mem_cfg = replace(config.mem, seed=_seed(seed, _COMPONENTS["mem"]))
    fam_cfg = replace(config.fam, seed=_seed(seed, _COMPONENTS["fam"]))
    q_cfg = replace(config.q, seed=_seed(seed, _COMPONENTS["q"]))
    if kind in ("mbcal", "mbcal_sfr"):
        mem, fam, diag = policy_update_mbcal(
            dataset,
            config,
            n_users,
            n_items,
            CFA if kind == "mbcal" else SFR_ONLY,
            mem_cfg,
            fam_cfg,
            init,
        )
        return TrainedAgent(kind, ag.mbcal_policy(mem, fam, config.epsilon, kind), mem=mem, fam=fam, diagnostics=diag)
    if kind in ("gru4rec", "gru4rec_eps"):
        mem, losses = train_mem(dataset, mem_cfg, n_users, n_items, masking=False, init=init.mem if init else None)
        eps = config.epsilon if kind == "gru4rec_eps" else 0.0
        return TrainedAgent(kind, ag.gru4rec_policy(mem, eps, kind), mem=mem, diagnostics={"mem_loss": losses})
    if kind in ("dqn", "ddqn", "mcpe"):
        qnet, losses = ag.train_q(dataset, kind, q_cfg, n_users, n_items, config.gamma, init=init.qnet if init else None)
        return TrainedAgent(kind, qnet.policy(kind, config.epsilon), qnet=qnet, diagnostics={"q_loss": losses})
    raise ValueError(f"unknown agent kind {kind!r}")


def policy_update_mbcal(
    dataset: Dataset,
    config: ExperimentConfig,
    n_users: int,
    n_items: int,
    mode: str = CFA,
    mem_cfg=None,
    fam_cfg=None,
    previous: TrainedAgent | None = None,
):
    """Masked environment model, then future-reward labels, then the advantage model."""
    mem_cfg = mem_cfg or config.mem
    fam_cfg = fam_cfg or config.fam
    mem, mem_losses = train_mem(dataset, mem_cfg, n_users, n_items, init=previous.mem if previous else None)
    labels = build_cfa_labels(mem, dataset, config.gamma, mode)
    fam, fam_losses = train_fam(dataset, labels, fam_cfg, n_users, n_items, init=previous.fam if previous else None)
    return mem, fam, {"mem_loss": mem_losses, "fam_loss": fam_losses, "labels": labels}


def _final(diag: dict, key: str) -> float | None:
    curve = diag.get(key)
    return float(curve[-1]) if curve else None


def _objective(agent: TrainedAgent) -> float | None:
    key = "fam_loss" if "fam_loss" in agent.diagnostics else "q_loss"
    return _final(agent.diagnostics, key)


def _check_finite(metrics: RoundMetrics) -> None:
    for name in ("avg_reward", "std_reward", "mse_objective", "mem_nll"):
        value = getattr(metrics, name)
        if value is not None and not math.isfinite(value):
            raise FloatingPointError(f"non-finite {name} for agent {metrics.agent} round {metrics.round}: {value}")


# ---------------------------------------------------------------- protocols


@dataclass
class RunResult:
    metrics: list[RoundMetrics]
    agent: TrainedAgent | None
    test_log: Dataset | None
    audit: ProtocolAudit


def _test_round(sim, agent, config, repeat, round_index, audit, tag) -> Dataset:
    rng = _env_rng(config, repeat, round_index, "test")
    users = rng.integers(0, sim.config.n_users, config.test_sessions)
    test = run_sessions(
        sim,
        agent.policy,
        users,
        rng,
        explore=False,
        tids=_tids(f"{tag}-test", config.test_sessions),
        policy_name=agent.kind,
        round_index=round_index,
    )
    audit.record_test(test)
    audit.interactions += config.test_sessions * sim.config.horizon
    return test


def _metrics(agent: TrainedAgent, test: Dataset, seed: int, round_index: int, train_n: int, audit, started) -> RoundMetrics:
    totals = test.total_rewards()
    m = RoundMetrics(
        agent=agent.kind,
        seed=seed,
        round=round_index,
        avg_reward=average_reward_per_session(test),
        std_reward=float(totals.std()),
        train_sessions=train_n,
        test_sessions=len(test),
        interactions=audit.interactions,
        mse_objective=_objective(agent),
        mem_nll=_final(agent.diagnostics, "mem_loss"),
        wall_clock=time.perf_counter() - started,
    )
    _check_finite(m)
    return m


def collect_log(sim: UserSimulator, config: ExperimentConfig, repeat: int, audit: ProtocolAudit) -> Dataset:
    """Static log for the batch protocol, gathered by the configured logging policy."""
    n, c = config.log_sessions, sim.config
    seeds = config.seeds(repeat)
    policy: ag.Policy = ag.RandomPolicy()
    if config.logging_policy != "random":
        rng = _env_rng(config, repeat, 0, "pilot")
        pilot = run_sessions(sim, policy, rng.integers(0, c.n_users, n), rng, tids=_tids(f"pilot-r{repeat}", n), policy_name="random")
        audit.interactions += n * c.horizon
        audit.record_training(pilot)
        policy = policy_update(config.logging_policy, pilot, config, c.n_users, c.n_items, _seed(seeds["agent"], 9999)).policy
    rng = _env_rng(config, repeat, 0, "log")
    explore_rng = np.random.default_rng(_seed(seeds["exploration"], 0))
    users = rng.integers(0, c.n_users, n)
    data = run_sessions(sim, policy, users, rng, explore_rng, explore=True, tids=_tids(f"log-r{repeat}", n), policy_name=policy.name)
    audit.interactions += n * c.horizon
    return data


def run_batch_rl(
    config: ExperimentConfig, kind: str, repeat: int = 0, log_data: Dataset | None = None, sim: UserSimulator | None = None
) -> RunResult:
    """Train once on a static log, then run one greedy test round."""
    started = time.perf_counter()
    sim = sim or UserSimulator(replace(config.simulator, seed=config.simulator_seed))
    audit = ProtocolAudit()
    if log_data is None:
        log_data = collect_log(sim, config, repeat, audit)
    if len(log_data) == 0:
        raise ValueError("batch protocol needs a non-empty static log")
    seeds = config.seeds(repeat)
    audit.record_training(log_data)
    agent = policy_update(kind, log_data, config, sim.config.n_users, sim.config.n_items, _seed(seeds["agent"], 1))
    test = _test_round(sim, agent, config, repeat, 1, audit, f"{kind}-r{repeat}-batch")
    audit.check()
    metrics = _metrics(agent, test, seeds["agent"], 1, len(log_data), audit, started)
    return RunResult([metrics], agent, test, audit)


def run_growing_batch_rl(config: ExperimentConfig, kind: str, repeat: int = 0, sim: UserSimulator | None = None) -> RunResult:
    """Alternate ε-greedy collection, policy update, and a greedy test round."""
    sim = sim or UserSimulator(replace(config.simulator, seed=config.simulator_seed))
    c = sim.config
    seeds = config.seeds(repeat)
    audit = ProtocolAudit()
    explore_rng = np.random.default_rng(_seed(seeds["exploration"], 1))
    behavior_policy: ag.Policy = ag.RandomPolicy()
    buffer = Dataset(c.space, c.horizon)
    agent = None
    out = []
    test = None
    for k in range(1, config.rounds + 1):
        started = time.perf_counter()
        rng = _env_rng(config, repeat, k, "train")
        users = rng.integers(0, c.n_users, config.train_sessions)
        collected = run_sessions(
            sim,
            behavior_policy,
            users,
            rng,
            explore_rng,
            explore=True,
            tids=_tids(f"{kind}-r{repeat}-k{k}-train", config.train_sessions),
            policy_name=behavior_policy.name,
            round_index=k,
        )
        audit.interactions += config.train_sessions * c.horizon
        if config.accumulate:
            buffer.extend(collected)
        else:
            buffer = collected
        audit.record_training(buffer)
        agent = policy_update(kind, buffer, config, c.n_users, c.n_items, _seed(seeds["agent"], k), agent)
        behavior_policy = agent.policy
        test = _test_round(sim, agent, config, repeat, k, audit, f"{kind}-r{repeat}-k{k}")
        audit.check()
        m = _metrics(agent, test, seeds["agent"], k, len(buffer), audit, started)
        log.info("%s repeat %d round %d: avg reward %.3f (%.1fs)", kind, repeat, k, m.avg_reward, m.wall_clock)
        out.append(m)
    expected = config.rounds * (config.train_sessions + config.test_sessions) * c.horizon
    if audit.interactions != expected:
        raise ProtocolViolation(f"consumed {audit.interactions} interactions, budget is {expected}")
    return RunResult(out, agent, test, audit)


def run_experiment(config: ExperimentConfig, csv_path: str | Path | None = None) -> tuple[list[RoundMetrics], ProtocolAudit]:
    """Every configured agent over every repeat; optionally writes the metrics CSV."""
    sim = UserSimulator(replace(config.simulator, seed=config.simulator_seed))
    audit = ProtocolAudit()
    metrics: list[RoundMetrics] = []
    for repeat in range(config.repeats):
        shared_log = None
        if config.protocol == "batch":
            shared_log = collect_log(sim, config, repeat, audit)
        for kind in config.agents:
            if config.protocol == "batch":
                res = run_batch_rl(config, kind, repeat, shared_log, sim)
            else:
                res = run_growing_batch_rl(config, kind, repeat, sim)
            metrics.extend(res.metrics)
            audit.train_ids |= res.audit.train_ids
            audit.test_ids |= res.audit.test_ids
            audit.interactions += res.audit.interactions
    audit.check()
    if csv_path is not None:
        emit_metrics(metrics, csv_path)
    return metrics, audit


# ---------------------------------------------------------------- diagnostics


def objective_mse(agent: TrainedAgent, test_log: Dataset, gamma: float) -> float | None:
    """The agent's own regression objective evaluated on ``test_log``."""
    arrays = test_log.arrays()
    batch = SeqBatch(arrays["users"], arrays["actions"], arrays["behaviors"], np.zeros_like(arrays["masked"]))
    rewards = test_log.space.reward_array[batch.behaviors]
    if agent.fam is not None:
        labels = build_cfa_labels(agent.mem, test_log, gamma, CFA if agent.kind == "mbcal" else SFR_ONLY)
        pred = agent.fam.predict(batch)
        return float(np.mean((pred - labels.values) ** 2))
    if agent.qnet is not None:
        if agent.kind == "mcpe":
            targets = ag.monte_carlo_targets(rewards)
        else:
            targets = agent.qnet.td_targets(batch, arrays["candidates"], rewards, gamma, double=agent.kind == "ddqn")
        return float(np.mean((agent.qnet.q_values(batch) - targets) ** 2))
    return None


def mse_analysis(trained: dict[str, TrainedAgent], test_log: Dataset, gamma: float) -> dict[str, float | None]:
    table = {}
    for kind, agent in trained.items():
        if agent is None:
            log.warning("mse analysis: agent %s missing, skipped", kind)
            continue
        table[kind] = objective_mse(agent, test_log, gamma)
        if table[kind] is None:
            log.info("mse analysis: %s has no regression objective", kind)
    return table


def run_mse_report(config: ExperimentConfig, kinds=("mbcal", "mbcal_sfr", "dqn", "mcpe"), repeat: int = 0) -> dict:
    """Batch-protocol agents trained on one static log, scored on the first agent's test-round log."""
    sim = UserSimulator(replace(config.simulator, seed=config.simulator_seed))
    audit = ProtocolAudit()
    log_data = collect_log(sim, config, repeat, audit)
    trained = {}
    test_log = None
    for kind in kinds:
        res = run_batch_rl(config, kind, repeat, log_data, sim)
        trained[kind] = res.agent
        if test_log is None:
            test_log = res.test_log
    return mse_analysis(trained, test_log, config.gamma)


def emit_metrics(metrics: list[RoundMetrics], path: str | Path, append: bool = False) -> None:
    """CSV with one row per (agent, seed, round) in ``CSV_COLUMNS`` order."""
    path = Path(path)
    write_header = not (append and path.exists() and path.stat().st_size > 0)
    with path.open("a" if append else "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if write_header:
            writer.writerow(CSV_COLUMNS)
        for m in metrics:
            writer.writerow(["" if v is None else repr(v) if isinstance(v, float) else v for v in m.row().values()])


# ---------------------------------------------------------------- checkpoints

_PARTS = {"mem": "mem.json", "fam": "fam.json", "qnet": "q.json"}


def save_agent(agent: TrainedAgent, directory: str | Path) -> None:
    """One parameter checkpoint per trained component plus ``agent.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if agent.mem is not None:
        agent.mem.encoder.save(directory / _PARTS["mem"], {"rewards": agent.mem.space.rewards})
    if agent.fam is not None:
        agent.fam.encoder.save(directory / _PARTS["fam"])
    if agent.qnet is not None:
        agent.qnet.online.save(directory / _PARTS["qnet"])
    manifest = {"kind": agent.kind, "epsilon": agent.policy.epsilon}
    (directory / "agent.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_agent(directory: str | Path) -> TrainedAgent:
    directory = Path(directory)
    manifest = json.loads((directory / "agent.json").read_text())
    kind, eps = manifest["kind"], manifest["epsilon"]
    if kind in ("dqn", "ddqn", "mcpe"):
        enc, _ = SequenceModel.load(directory / _PARTS["qnet"])
        qnet = ag.QNetwork(enc)
        return TrainedAgent(kind, qnet.policy(kind, eps), qnet=qnet)
    enc, meta = SequenceModel.load(directory / _PARTS["mem"])
    mem = MaskedEnvironmentModel(enc, BehaviorSpace(tuple(meta["rewards"])))
    if kind in ("gru4rec", "gru4rec_eps"):
        return TrainedAgent(kind, ag.gru4rec_policy(mem, eps, kind), mem=mem)
    fam = FutureAdvantageModel(SequenceModel.load(directory / _PARTS["fam"])[0])
    return TrainedAgent(kind, ag.mbcal_policy(mem, fam, eps, kind), mem=mem, fam=fam)


def evaluate_agent(agent: TrainedAgent, config: ExperimentConfig, repeat: int = 0, sim: UserSimulator | None = None):
    """One greedy test round for an already trained agent."""
    started = time.perf_counter()
    sim = sim or UserSimulator(replace(config.simulator, seed=config.simulator_seed))
    audit = ProtocolAudit()
    test = _test_round(sim, agent, config, repeat, 1, audit, f"{agent.kind}-r{repeat}-eval")
    return _metrics(agent, test, config.seeds(repeat)["agent"], 1, 0, audit, started), test
