"""End-to-end acceptance criteria; each test records one PASS/FAIL line."""
import time
from dataclasses import replace

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from gradcheck import max_relative_error, mse_objective, nll_objective, random_instance
from toy import exact_q, hand_sfr_cfa, toy_mdp_dataset, toy_mem
from mbcal import agents as ag
from mbcal.cfa import build_cfa_labels, counterfactual_future_advantage, simulated_future_reward
from mbcal.config import ExperimentConfig
from mbcal.data import Dataset, Trajectory, apply_mask
from mbcal.harness import ProtocolAudit, run_experiment, run_mse_report
from mbcal.models import SeqBatch

SEEDS = 3


def report(number: int, title: str, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"[{'PASS' if passed else 'FAIL'}] {number}. {title}: {detail}")


def test_1_gradient_suite():
    start = time.perf_counter()
    worst_mem = worst_fam = 0.0
    for seed in range(20):
        model, batch, _ = random_instance(seed)
        worst_mem = max(worst_mem, max_relative_error(model, *nll_objective(model, batch)))
        model, batch, r = random_instance(1000 + seed, out_dim=1)
        targets = r.normal(size=batch.actions.shape)
        worst_fam = max(worst_fam, max_relative_error(model, *mse_objective(model, batch, targets)))
    elapsed = time.perf_counter() - start
    ok = worst_mem < 1e-4 and worst_fam < 1e-4 and elapsed < 60
    report(1, "gradient suite", ok, f"max rel err MEM {worst_mem:.2e}, FAM {worst_fam:.2e} over 20+20 instances, {elapsed:.1f}s")
    assert ok


def test_2_masking_contract():
    o = Trajectory(0, [101, 102, 103, 104], [1, 2, 3, 4])
    snapshot = (o.actions.copy(), o.behaviors.copy(), o.masked.copy())
    m = apply_mask(o, {2, 3})
    a_m = -1
    seen = [x for s in m.steps for x in ((a_m if s.masked else s.action), s.behavior)]
    worked = seen == [101, 1, a_m, 2, a_m, 3, 104, 4]
    untouched = all(np.array_equal(x, y) for x, y in zip(snapshot, (o.actions, o.behaviors, o.masked)))

    mem = toy_mem()
    traj = Trajectory(0, [1, 0], [0, 1])
    last_zero = counterfactual_future_advantage(mem, traj, 2, 0.95) == 0.0
    mem.encoder.params["emb.item"][...] = 0.0
    blind = all(counterfactual_future_advantage(mem, replace(traj, actions=np.array(a)), t, 0.95) == 0.0 for a in ([0, 1], [1, 1]) for t in (1, 2))
    ok = worked and untouched and last_zero and blind
    report(2, "masking contract", ok, f"worked example {worked}, no mutation {untouched}, CFA(T)=0 {last_zero}, action-blind CFA=0 {blind}")
    assert ok


def test_3_toy_mdp():
    start = time.perf_counter()
    gamma = 0.9
    data = toy_mdp_dataset()
    cfg = ag.QConfig(emb_dim=8, hidden=16, mlp_hidden=16, lr=1e-2, batch_size=18, min_updates=3000, seed=0)
    qnet, _ = ag.train_q(data, "dqn", cfg, 2, 3, gamma)
    q1, q2 = exact_q(gamma)
    pred = qnet.q_values(SeqBatch.from_arrays(data.arrays()))
    q_err = max(max(abs(pred[i, 0] - q1[t.user, t.actions[0]]), abs(pred[i, 1] - q2[(t.user, *t.actions)])) for i, t in enumerate(data))

    mem = toy_mem()
    label_err = 0.0
    trajs = [Trajectory(0, a, b) for a in ([0, 0], [0, 1], [1, 0], [1, 1]) for b in ([0, 0], [0, 1], [1, 0], [1, 1])]
    labels = build_cfa_labels(mem, Dataset(mem.space, 2, trajs), gamma)
    for i, o in enumerate(trajs):
        sfr, cfa = hand_sfr_cfa(list(o.actions), list(o.behaviors), gamma)
        for t in (1, 2):
            label_err = max(
                label_err,
                abs(simulated_future_reward(mem, o, t, gamma) - sfr[t - 1]),
                abs(counterfactual_future_advantage(mem, o, t, gamma) - cfa[t - 1]),
                abs(labels.cfa[i, t - 1] - cfa[t - 1]),
                abs(labels.sfr_original[i, t - 1] - sfr[t - 1]),
            )
    elapsed = time.perf_counter() - start
    ok = q_err < 0.05 and label_err < 1e-10 and elapsed < 60
    report(3, "toy enumerable MDP", ok, f"max |Q - VI| {q_err:.4f}, max SFR/CFA error {label_err:.1e}, {elapsed:.1f}s")
    assert ok


def test_4_variance_ordering():
    start = time.perf_counter()
    config = ExperimentConfig(protocol="batch")
    tables = [run_mse_report(config, ("mbcal", "mbcal_sfr", "dqn", "mcpe"), repeat) for repeat in range(SEEDS)]
    elapsed = time.perf_counter() - start
    cfa_wins = all(t["mbcal"] < t["mbcal_sfr"] for t in tables)
    dqn_wins = all(t["dqn"] < t["mcpe"] for t in tables)
    ok = cfa_wins and dqn_wins and elapsed < 15 * 60
    detail = "; ".join(
        f"seed {i}: CFA {t['mbcal']:.3f} SFR {t['mbcal_sfr']:.3f} DQN {t['dqn']:.3f} MCPE {t['mcpe']:.3f}" for i, t in enumerate(tables)
    )
    report(4, "MSE ordering on the noisy simulator", ok, f"{detail}; {elapsed:.0f}s")
    assert ok


@pytest.fixture(scope="module")
def growing_batch(tmp_path_factory):
    config = ExperimentConfig(protocol="growing-batch", repeats=SEEDS, rounds=10, train_sessions=2000)
    path = tmp_path_factory.mktemp("growing") / "metrics.csv"
    start = time.perf_counter()
    metrics, audit = run_experiment(config, path)
    return config, metrics, audit, time.perf_counter() - start


def _final_means(config, metrics):
    out = {}
    for kind in config.agents:
        rows = [m for m in metrics if m.agent == kind]
        out[kind] = {r: np.mean([m.avg_reward for m in rows if m.round == r]) for r in (1, config.rounds)}
    return out


def test_5_growing_batch_ordering(growing_batch):
    config, metrics, _, elapsed = growing_batch
    means = _final_means(config, metrics)
    final = {k: v[config.rounds] for k, v in means.items()}
    beats = all(final["mbcal"] >= v for k, v in final.items() if k != "mbcal")
    improves = means["mbcal"][config.rounds] > means["mbcal"][1]
    ok = beats and improves and elapsed < 60 * 60
    table = ", ".join(f"{k} {v:.2f}" for k, v in sorted(final.items(), key=lambda kv: -kv[1]))
    report(
        5,
        "growing batch ordering",
        ok,
        f"final-round means {table}; MBCAL round 1 {means['mbcal'][1]:.2f} -> round {config.rounds} {means['mbcal'][config.rounds]:.2f}; {elapsed / 60:.1f} min",
    )
    assert ok


def test_6_determinism(tmp_path):
    config = ExperimentConfig.from_dict(
        {
            "repeats": 2,
            "rounds": 2,
            "train_sessions": 60,
            "test_sessions": 30,
            "simulator": {"n_items": 40, "n_users": 30},
            "mem": {"epochs": 1},
            "fam": {"epochs": 1},
            "q": {"epochs": 1},
        }
    )
    run_experiment(config, tmp_path / "a.csv")
    run_experiment(config, tmp_path / "b.csv")
    a, b = (tmp_path / "a.csv").read_bytes(), (tmp_path / "b.csv").read_bytes()
    ok = a == b and len(a.splitlines()) == 1 + len(config.agents) * config.rounds * config.repeats
    report(6, "determinism", ok, f"{len(a.splitlines()) - 1} metric rows, byte-identical {a == b}")
    assert ok


def test_7_protocol_hygiene(growing_batch):
    _, _, audit, _ = growing_batch
    batch_config = ExperimentConfig.from_dict(
        {"protocol": "batch", "repeats": 2, "log_sessions": 100, "test_sessions": 50, "logging_policy": "gru4rec", "mem": {"epochs": 1}, "fam": {"epochs": 1}, "q": {"epochs": 1}}
    )
    _, batch_audit = run_experiment(batch_config)
    combined = ProtocolAudit(audit.train_ids | batch_audit.train_ids, audit.test_ids | batch_audit.test_ids)
    leaked = combined.train_ids & combined.test_ids
    ok = not leaked and bool(combined.train_ids) and bool(combined.test_ids)
    report(7, "protocol hygiene", ok, f"{len(combined.train_ids)} training ids, {len(combined.test_ids)} test ids, {len(leaked)} shared")
    assert ok
