"""Command-line entry point: ``mbcal <command> [--config FILE] [--set key=value ...]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from . import agents as ag
from .cfa import LABEL_MODES, build_cfa_labels
from .config import ExperimentConfig, dump_config, load_config
from .data import load_dataset, save_dataset
from .harness import (
    ProtocolViolation,
    emit_metrics,
    evaluate_agent,
    load_agent,
    policy_update,
    run_experiment,
    run_mse_report,
    save_agent,
)
from .mem import evaluate_mem
from .simulator import UserSimulator, run_sessions

log = logging.getLogger("mbcal")


def _apply_override(raw: dict, item: str) -> None:
    if "=" not in item:
        raise argparse.ArgumentTypeError(f"override {item!r} is not key=value")
    key, value = item.split("=", 1)
    node = raw
    parts = key.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = yaml.safe_load(value)


def build_config(args) -> ExperimentConfig:
    raw = load_config(args.config).to_dict()
    for item in args.set or []:
        _apply_override(raw, item)
    return ExperimentConfig.from_dict(raw)


def _simulator(config: ExperimentConfig) -> UserSimulator:
    return UserSimulator(replace(config.simulator, seed=config.simulator_seed))


def cmd_simulate(args, config):
    sim = _simulator(config)
    rng = np.random.default_rng(np.random.SeedSequence([config.simulator_seed, args.repeat, 0, 0]))
    users = rng.integers(0, sim.config.n_users, args.sessions)
    tids = [f"sim-r{args.repeat}-{i}" for i in range(args.sessions)]
    data = run_sessions(sim, ag.RandomPolicy(), users, rng, explore=True, tids=tids, policy_name="random")
    save_dataset(data, args.out)
    print(f"wrote {len(data)} sessions to {args.out} (avg reward {data.total_rewards().mean():.3f})")


def cmd_train(args, config):
    data = load_dataset(args.data)
    c = config.simulator
    agent = policy_update(args.agent, data, config, c.n_users, c.n_items, config.agent_seed)
    save_agent(agent, args.out)
    print(f"trained {args.agent} on {len(data)} sessions; checkpoints in {args.out}")


def cmd_labels(args, config):
    agent = load_agent(args.agent_dir)
    if agent.mem is None:
        raise SystemExit(f"{args.agent_dir} has no environment model")
    labels = build_cfa_labels(agent.mem, load_dataset(args.data), config.gamma, args.mode)
    labels.save(args.out)
    vals = labels.values
    print(f"wrote {len(labels)} {args.mode} labels to {args.out} (mean {vals.mean():.4f}, std {vals.std():.4f})")


def cmd_evaluate(args, config):
    metrics, test = evaluate_agent(load_agent(args.agent_dir), config, args.repeat)
    if args.save_log:
        save_dataset(test, args.save_log)
    print(json.dumps(metrics.row()))


def cmd_mem_eval(args, config):
    agent = load_agent(args.agent_dir)
    if agent.mem is None:
        raise SystemExit(f"{args.agent_dir} has no environment model")
    print(json.dumps(evaluate_mem(agent.mem, load_dataset(args.data))))


def _run_protocol(protocol: str):
    def run(args, config):
        config = replace(config, protocol=protocol)
        metrics, audit = run_experiment(config, args.out)
        print(f"{len(metrics)} rows to {args.out}; {audit.interactions} simulator interactions")
        for kind in config.agents:
            last = max(m.round for m in metrics if m.agent == kind)
            vals = [m.avg_reward for m in metrics if m.agent == kind and m.round == last]
            print(f"{kind:12s} round {last}: {np.mean(vals):.3f} +/- {np.std(vals):.3f}")

    return run


def cmd_mse_report(args, config):
    kinds = args.agents.split(",") if args.agents else ("mbcal", "mbcal_sfr", "dqn", "mcpe")
    table = run_mse_report(config, kinds, args.repeat)
    for kind, value in table.items():
        print(f"{kind:12s} {'n/a' if value is None else f'{value:.4f}'}")


def cmd_dump_config(args, config):
    if args.out:
        dump_config(config, args.out)
    else:
        print(yaml.safe_dump(config.to_dict(), sort_keys=False), end="")


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override, e.g. --set mem.epochs=5")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="mbcal", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="log random-policy sessions to JSONL")
    s.add_argument("--sessions", type=int, default=2000)
    s.add_argument("--repeat", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train", parents=[common], help="train one agent on a logged dataset")
    s.add_argument("--agent", choices=ag.AGENT_KINDS, default="mbcal")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="checkpoint directory")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("labels", parents=[common], help="future-reward labels from a trained environment model")
    s.add_argument("--agent-dir", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--mode", choices=LABEL_MODES, default="cfa")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_labels)

    s = sub.add_parser("evaluate", parents=[common], help="greedy test round for a trained agent")
    s.add_argument("--agent-dir", required=True)
    s.add_argument("--repeat", type=int, default=0)
    s.add_argument("--save-log", help="write the test sessions to this JSONL file")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("mem-eval", parents=[common], help="NLL and per-behavior F1 of an environment model")
    s.add_argument("--agent-dir", required=True)
    s.add_argument("--data", required=True)
    s.set_defaults(func=cmd_mem_eval)

    for name, protocol in (("batch", "batch"), ("growing-batch", "growing-batch")):
        s = sub.add_parser(name, parents=[common], help=f"run the {name} protocol for every configured agent")
        s.add_argument("--out", default="metrics.csv")
        s.set_defaults(func=_run_protocol(protocol))

    s = sub.add_parser("mse-report", parents=[common], help="regression MSE of each agent on one test-round log")
    s.add_argument("--agents", help="comma-separated agent kinds")
    s.add_argument("--repeat", type=int, default=0)
    s.set_defaults(func=cmd_mse_report)

    s = sub.add_parser("config", parents=[common], help="print or write the effective config")
    s.add_argument("--out")
    s.set_defaults(func=cmd_dump_config)
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = build_config(args)
        args.func(args, config)
    except ProtocolViolation as exc:
        print(f"protocol violation: {exc}", file=sys.stderr)
        return 3
    except (ValueError, IndexError, FloatingPointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
