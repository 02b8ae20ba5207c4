"""Tiny hand-checkable worlds shared by the unit and acceptance tests."""
import itertools
import math

import numpy as np

from mbcal.data import BehaviorSpace, Dataset, Trajectory
from mbcal.mem import MaskedEnvironmentModel
from mbcal.models import EncoderConfig, SequenceModel

# ---------------------------------------------------------------- 2-step MEM

TOY_PARAMS = {
    "eb": [0.3, -0.6, 0.9],  # behaviors 0, 1, start token
    "ea": [0.8, -1.1, 0.25],  # items 0, 1, mask item
    "W": [[0.5, -0.4, 0.7], [1.2, 0.3, -0.9]],  # rows: behavior, item; cols: z, r, c
    "U": [[0.6, -0.8, 1.1]],
    "b": [0.1, -0.2, 0.05],
    "head_W": [[0.4, -1.3]],
    "head_b": [0.2, -0.1],
}


def toy_mem() -> MaskedEnvironmentModel:
    """Scalar GRU, linear head, 2 behaviors with rewards (0, 1), 2 items, no user embedding."""
    cfg = EncoderConfig(n_users=1, n_items=2, n_behaviors=2, out_dim=2, emb_dim=1, hidden=1, mlp_hidden=0, user_embedding=False)
    enc = SequenceModel(cfg, np.random.default_rng(0))
    p, q = enc.params, TOY_PARAMS
    p["emb.behavior"][:, 0] = q["eb"]
    p["emb.item"][:, 0] = q["ea"]
    p["gru.W"][...] = q["W"]
    p["gru.U"][...] = q["U"]
    p["gru.b"][...] = q["b"]
    p["mlp.W0"][...] = q["head_W"]
    p["mlp.b0"][...] = q["head_b"]
    return MaskedEnvironmentModel(enc, BehaviorSpace((0.0, 1.0)))


def _sig(v):
    return 1.0 / (1.0 + math.exp(-v))


def hand_expected_rewards(actions, behaviors, masked):
    """Scalar re-derivation of r̂ at steps 1 and 2."""
    q = TOY_PARAMS
    h, out = 0.0, []
    prev = 2
    for a, b, m in zip(actions, behaviors, masked):
        xb, xa = q["eb"][prev], q["ea"][2 if m else a]
        pre = [xb * q["W"][0][j] + xa * q["W"][1][j] + q["b"][j] for j in range(3)]
        z = _sig(pre[0] + h * q["U"][0][0])
        r = _sig(pre[1] + h * q["U"][0][1])
        c = math.tanh(pre[2] + r * h * q["U"][0][2])
        h = (1 - z) * h + z * c
        l0 = h * q["head_W"][0][0] + q["head_b"][0]
        l1 = h * q["head_W"][0][1] + q["head_b"][1]
        out.append(math.exp(l1) / (math.exp(l0) + math.exp(l1)))
        prev = b
    return out


def hand_sfr_cfa(actions, behaviors, gamma):
    """(SFR, CFA) at t = 1 and t = 2 for a 2-step trajectory."""
    r = hand_expected_rewards(actions, behaviors, [False, False])
    rm = hand_expected_rewards(actions, behaviors, [True, False])
    sfr = [gamma * r[1], 0.0]
    cfa = [gamma * (r[1] - rm[1]), 0.0]
    return sfr, cfa


# ---------------------------------------------------------------- enumerable MDP

N_USERS, N_ITEMS, T = 2, 3, 2
REWARDS = (0.0, 1.0, 2.0)


def toy_behavior(user, history, item):
    """Deterministic response; step 2 depends on the step-1 item."""
    if not history:
        return (user + item) % 3
    return (user + history[0] * item + 1) % 3


def toy_mdp_dataset() -> Dataset:
    space = BehaviorSpace(REWARDS)
    cands = np.tile(np.arange(N_ITEMS), (T, 1))
    trajs = []
    for u, a1, a2 in itertools.product(range(N_USERS), range(N_ITEMS), range(N_ITEMS)):
        b1 = toy_behavior(u, [], a1)
        b2 = toy_behavior(u, [a1], a2)
        trajs.append(Trajectory(u, [a1, a2], [b1, b2], candidates=cands, tid=f"u{u}-{a1}{a2}"))
    return Dataset(space, T, trajs)


def exact_q(gamma):
    """Value iteration on the enumerable MDP: {(u, a1): Q1} and {(u, a1, a2): Q2}."""
    q2 = {(u, a1, a2): REWARDS[toy_behavior(u, [a1], a2)] for u in range(N_USERS) for a1 in range(N_ITEMS) for a2 in range(N_ITEMS)}
    q1 = {
        (u, a1): REWARDS[toy_behavior(u, [], a1)] + gamma * max(q2[u, a1, a2] for a2 in range(N_ITEMS))
        for u in range(N_USERS)
        for a1 in range(N_ITEMS)
    }
    return q1, q2
