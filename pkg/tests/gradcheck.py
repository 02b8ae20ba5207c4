"""Central finite-difference check of SequenceModel gradients."""
import numpy as np

from mbcal import nn
from mbcal.models import EncoderConfig, SeqBatch, SequenceModel


def random_instance(seed: int, out_dim=None):
    r = np.random.default_rng(seed)
    n_items, n_users, n_beh = int(r.integers(2, 9)), int(r.integers(1, 6)), int(r.integers(2, 7))
    cfg = EncoderConfig(
        n_users=n_users,
        n_items=n_items,
        n_behaviors=n_beh,
        out_dim=n_beh if out_dim is None else out_dim,
        emb_dim=int(r.integers(1, 9)),
        hidden=int(r.integers(1, 9)),
        mlp_hidden=int(r.integers(0, 9)),
        user_embedding=bool(r.integers(2)),
    )
    model = SequenceModel(cfg, r)
    # larger than the init scale so every block carries signal
    for name in model.params.names():
        model.params[name][...] = r.normal(scale=0.5, size=model.params[name].shape)
    B, T = int(r.integers(1, 4)), int(r.integers(1, 6))
    batch = SeqBatch(
        r.integers(0, n_users, B),
        r.integers(0, n_items, (B, T)),
        r.integers(0, n_beh, (B, T)),
        r.random((B, T)) < 0.3,
    )
    return model, batch, r


def nll_objective(model, batch):
    def loss():
        p = nn.softmax(model.predict(batch))
        return nn.nll_loss(p.reshape(-1, p.shape[-1]), batch.behaviors.ravel())

    def grad():
        p = nn.softmax(model.forward(batch))
        model.params.zero_grad()
        model.backward(nn.softmax_nll_grad(p, batch.behaviors) / batch.behaviors.size)

    return loss, grad


def mse_objective(model, batch, targets):
    def loss():
        return nn.mse_loss(model.predict(batch)[..., 0], targets)[0]

    def grad():
        pred = model.forward(batch)
        model.params.zero_grad()
        model.backward(nn.mse_loss(pred[..., 0], targets)[1][..., None])

    return loss, grad


def max_relative_error(model, loss, grad, step=1e-4, floor=1e-6) -> float:
    """Largest |analytic − numeric| / max(|analytic|, |numeric|, floor) over every parameter entry."""
    grad()
    worst = 0.0
    for name in model.params.names():
        v = model.params[name]
        g = model.params.grads[name].copy()
        for idx in np.ndindex(v.shape):
            old = v[idx]
            v[idx] = old + step
            up = loss()
            v[idx] = old - step
            down = loss()
            v[idx] = old
            fd = (up - down) / (2 * step)
            worst = max(worst, abs(g[idx] - fd) / max(abs(g[idx]), abs(fd), floor))
    return worst
