"""Small dense neural-network engine on numpy.

Everything runs in float64 with hand-written reverse-mode gradients for the
fixed layer types used by the recommendation models: embedding tables, GRU
and LSTM cells, a tanh MLP, softmax + NLL, squared error, and Adam.

Batched arrays use the row convention ``x @ W``: a layer with ``n_in`` inputs
and ``n_out`` outputs stores ``W`` with shape ``(n_in, n_out)``.
"""
from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

NLL_FLOOR = 1e-12
CHECKPOINT_FORMAT = "mbcal-params"
CHECKPOINT_VERSION = 1

_nll_floor_hits = 0


class ShapeError(ValueError):
    pass


class StateError(RuntimeError):
    pass


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, block: str, detail: str):
        super().__init__(f"non-finite gradient in parameter block {block!r}: {detail}")
        self.block = block


class Params:
    """Named parameter blocks, each paired with a gradient buffer of the same shape."""

    def __init__(self) -> None:
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.values:
            raise KeyError(f"duplicate parameter block {name!r}")
        value = np.array(value, dtype=np.float64)
        self.values[name] = value
        self.grads[name] = np.zeros_like(value)
        return value

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def names(self) -> list[str]:
        return list(self.values)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def count(self) -> int:
        return sum(v.size for v in self.values.values())

    def copy(self) -> Params:
        out = Params()
        for name, value in self.values.items():
            out.add(name, value.copy())
        return out

    def load_from(self, other: Params) -> None:
        """Copy values from ``other`` in place (shapes must agree)."""
        for name, value in self.values.items():
            src = other.values[name]
            if src.shape != value.shape:
                raise ShapeError(f"{name}: shape {src.shape} != {value.shape}")
            value[...] = src

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.values.items()}


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def embedding_init(rng: np.random.Generator, rows: int, dim: int) -> np.ndarray:
    return rng.uniform(-0.01, 0.01, size=(rows, dim))


# ---------------------------------------------------------------- primitives


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 + 0.5 * np.tanh(0.5 * np.asarray(x, dtype=np.float64))


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if logits.size == 0 or logits.shape[axis] == 0:
        raise ValueError("softmax of an empty vector")
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def embedding_lookup(table: np.ndarray, ids, name: str = "table") -> np.ndarray:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        bad = ids[(ids < 0) | (ids >= table.shape[0])].ravel()[0]
        raise IndexError(f"id {int(bad)} out of range for {name} with {table.shape[0]} rows")
    return table[ids]


def embedding_backward(grad_table: np.ndarray, ids, grad_out: np.ndarray) -> None:
    """Scatter-add ``grad_out`` into the looked-up rows of ``grad_table``."""
    ids = np.asarray(ids).ravel()
    # a one-hot product is far faster than np.add.at for these table sizes
    onehot = np.zeros((ids.size, grad_table.shape[0]))
    onehot[np.arange(ids.size), ids] = 1.0
    grad_table += onehot.T @ grad_out.reshape(ids.size, -1)


def nll_loss(probs: np.ndarray, labels) -> float:
    """Mean negative log-likelihood of ``labels`` under row distributions ``probs``.

    Probabilities below ``NLL_FLOOR`` are clamped; each clamp increments the
    counter returned by :func:`nll_floor_hits`.
    """
    global _nll_floor_hits
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels))
    if labels.min() < 0 or labels.max() >= probs.shape[-1]:
        raise IndexError(f"label out of range for {probs.shape[-1]} classes")
    picked = probs[np.arange(labels.size), labels]
    low = picked < NLL_FLOOR
    if low.any():
        _nll_floor_hits += int(low.sum())
        picked = np.maximum(picked, NLL_FLOOR)
    return float(-np.log(picked).mean())


def nll_floor_hits() -> int:
    return _nll_floor_hits


def softmax_nll_grad(probs: np.ndarray, labels) -> np.ndarray:
    """Gradient of the summed NLL w.r.t. the logits that produced ``probs``."""
    g = np.array(probs, dtype=np.float64)
    labels = np.asarray(labels)
    flat = g.reshape(-1, g.shape[-1])
    flat[np.arange(labels.size), labels.ravel()] -= 1.0
    return g


def mse_loss(pred, target) -> tuple[float, np.ndarray]:
    """Mean squared error and its gradient w.r.t. ``pred``."""
    pred = np.asarray(pred, dtype=np.float64)
    diff = pred - np.asarray(target, dtype=np.float64)
    return float(np.mean(diff**2)), 2.0 * diff / max(diff.size, 1)


# ---------------------------------------------------------------- GRU


def gru_params(params: Params, prefix: str, n_in: int, n_hidden: int, rng: np.random.Generator) -> None:
    """Register ``W`` (n_in, 3H), ``U`` (H, 3H), ``b`` (3H); gate order z, r, c."""
    W = np.concatenate([glorot(rng, n_in, n_hidden) for _ in range(3)], axis=1)
    U = np.concatenate([glorot(rng, n_hidden, n_hidden) for _ in range(3)], axis=1)
    params.add(f"{prefix}.W", W)
    params.add(f"{prefix}.U", U)
    params.add(f"{prefix}.b", np.zeros(3 * n_hidden))


def _check_rnn_shapes(W: np.ndarray, U: np.ndarray, h: np.ndarray, x: np.ndarray, what: str) -> None:
    if h.shape[-1] != U.shape[0]:
        raise ShapeError(f"{what}: hidden size {h.shape[-1]} != {U.shape[0]}")
    if x.shape[-1] != W.shape[0]:
        raise ShapeError(f"{what}: input size {x.shape[-1]} != {W.shape[0]}")


def gru_step(params: Params, prefix: str, h_prev: np.ndarray, x: np.ndarray, cache: list | None = None) -> np.ndarray:
    """One GRU step for a batch of rows.

    z = σ(x W_z + h U_z + b_z), r = σ(x W_r + h U_r + b_r),
    c = tanh(x W_c + (r ⊙ h) U_c + b_c), h' = (1 − z) ⊙ h + z ⊙ c.
    When ``cache`` is a list, the intermediates for backward are appended to it.
    """
    W, U, b = params[f"{prefix}.W"], params[f"{prefix}.U"], params[f"{prefix}.b"]
    _check_rnn_shapes(W, U, h_prev, x, "gru_step")
    lead = np.broadcast_shapes(h_prev.shape[:-1], x.shape[:-1])
    if x.shape[:-1] != lead:
        x = np.broadcast_to(x, (*lead, x.shape[-1]))
    x = x.reshape(-1, x.shape[-1])
    # 2-D products hit BLAS; batched 3-D matmul does not
    xw = (x @ W + b).reshape(*lead, W.shape[1])
    h, saved = _gru_core(U, h_prev, xw)
    if cache is not None:
        cache.append((x, *saved))
    return h


def gru_step_projected(params: Params, prefix: str, h_prev: np.ndarray, xw: np.ndarray) -> np.ndarray:
    """Inference-only GRU step from a precomputed input projection ``x W + b`` (..., 3H)."""
    U = params[f"{prefix}.U"]
    if xw.shape[-1] != U.shape[1] or h_prev.shape[-1] != U.shape[0]:
        raise ShapeError(f"gru_step_projected: shapes {h_prev.shape}, {xw.shape} do not match U {U.shape}")
    return _gru_core(U, h_prev, xw)[0]


def _gru_core(U: np.ndarray, h_prev: np.ndarray, xw: np.ndarray):
    H = U.shape[0]
    lead = np.broadcast_shapes(h_prev.shape[:-1], xw.shape[:-1])
    # h_prev may be shared across a broadcast axis (candidate scoring): project it once
    hu = (h_prev.reshape(-1, H) @ U[:, : 2 * H]).reshape(*h_prev.shape[:-1], 2 * H)
    if h_prev.shape[:-1] != lead:
        hu = np.broadcast_to(hu, (*lead, 2 * H))
        h_prev = np.broadcast_to(h_prev, (*lead, H))
    if xw.shape[:-1] != lead:
        xw = np.broadcast_to(xw, (*lead, 3 * H))
    hu, h_prev, xw = hu.reshape(-1, 2 * H), h_prev.reshape(-1, H), xw.reshape(-1, 3 * H)
    zr = sigmoid(xw[:, : 2 * H] + hu)
    z, r = zr[:, :H], zr[:, H:]
    rh = r * h_prev
    c = np.tanh(xw[:, 2 * H :] + rh @ U[:, 2 * H :])
    h = h_prev + z * (c - h_prev)
    return h.reshape(*lead, H), (h_prev, z, r, rh, c, lead)


def gru_step_backward(params: Params, prefix: str, saved, dh: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Accumulate parameter gradients; return (d h_prev, d x)."""
    x, h_prev, z, r, rh, c, lead = saved
    W, U = params[f"{prefix}.W"], params[f"{prefix}.U"]
    gW, gU, gb = params.grads[f"{prefix}.W"], params.grads[f"{prefix}.U"], params.grads[f"{prefix}.b"]
    H = U.shape[0]
    dh = dh.reshape(-1, H)

    dz = dh * (c - h_prev)
    dc = dh * z
    dh_prev = dh * (1.0 - z)
    dac = dc * (1.0 - c * c)
    drh = dac @ U[:, 2 * H :].T
    dr = drh * h_prev
    dh_prev += drh * r
    dzr = np.concatenate([dz * z * (1.0 - z), dr * r * (1.0 - r)], axis=-1)
    dall = np.concatenate([dzr, dac], axis=-1)

    gW += x.T @ dall
    gb += dall.sum(axis=0)
    gU[:, : 2 * H] += h_prev.T @ dall[:, : 2 * H]
    gU[:, 2 * H :] += rh.T @ dall[:, 2 * H :]
    dh_prev += dzr @ U[:, : 2 * H].T
    dx = dall @ W.T
    return dh_prev.reshape(*lead, H), dx.reshape(*lead, x.shape[-1])


# ---------------------------------------------------------------- LSTM


def lstm_params(params: Params, prefix: str, n_in: int, n_hidden: int, rng: np.random.Generator) -> None:
    """Register ``W`` (n_in, 4H), ``U`` (H, 4H), ``b`` (4H); gate order i, f, o, g."""
    W = np.concatenate([glorot(rng, n_in, n_hidden) for _ in range(4)], axis=1)
    U = np.concatenate([glorot(rng, n_hidden, n_hidden) for _ in range(4)], axis=1)
    params.add(f"{prefix}.W", W)
    params.add(f"{prefix}.U", U)
    params.add(f"{prefix}.b", np.zeros(4 * n_hidden))


def lstm_step(
    params: Params, prefix: str, h_prev: np.ndarray, c_prev: np.ndarray, x: np.ndarray, cache: list | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Standard LSTM: c' = f ⊙ c + i ⊙ g, h' = o ⊙ tanh(c')."""
    W, U, b = params[f"{prefix}.W"], params[f"{prefix}.U"], params[f"{prefix}.b"]
    _check_rnn_shapes(W, U, h_prev, x, "lstm_step")
    if c_prev.shape != h_prev.shape:
        raise ShapeError(f"lstm_step: cell shape {c_prev.shape} != hidden shape {h_prev.shape}")
    H = U.shape[0]
    pre = x @ W + h_prev @ U + b
    ifo = sigmoid(pre[..., : 3 * H])
    i, f, o = ifo[..., :H], ifo[..., H : 2 * H], ifo[..., 2 * H :]
    g = np.tanh(pre[..., 3 * H :])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    if cache is not None:
        cache.append((x, h_prev, c_prev, i, f, o, g, tc))
    return h, c


def lstm_step_backward(params: Params, prefix: str, saved, dh: np.ndarray, dc: np.ndarray):
    """Accumulate parameter gradients; return (d h_prev, d c_prev, d x)."""
    x, h_prev, c_prev, i, f, o, g, tc = saved
    W, U = params[f"{prefix}.W"], params[f"{prefix}.U"]
    H = U.shape[0]
    dc = dc + dh * o * (1.0 - tc * tc)
    do = dh * tc
    di = dc * g
    df = dc * c_prev
    dg = dc * i
    dpre = np.concatenate(
        [di * i * (1 - i), df * f * (1 - f), do * o * (1 - o), dg * (1 - g * g)], axis=-1
    )
    d2 = dpre.reshape(-1, 4 * H)
    params.grads[f"{prefix}.W"] += x.reshape(-1, x.shape[-1]).T @ d2
    params.grads[f"{prefix}.U"] += h_prev.reshape(-1, H).T @ d2
    params.grads[f"{prefix}.b"] += d2.sum(axis=0)
    return dpre @ U.T, dc * f, dpre @ W.T


# ---------------------------------------------------------------- MLP


def mlp_params(params: Params, prefix: str, sizes: list[int], rng: np.random.Generator) -> None:
    for k, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        params.add(f"{prefix}.W{k}", glorot(rng, n_in, n_out))
        params.add(f"{prefix}.b{k}", np.zeros(n_out))


def mlp_layers(params: Params, prefix: str) -> int:
    n = 0
    while f"{prefix}.W{n}" in params:
        n += 1
    return n


def mlp_forward(params: Params, prefix: str, x: np.ndarray, cache: list | None = None) -> np.ndarray:
    """Affine layers with tanh between them and no final nonlinearity."""
    n = mlp_layers(params, prefix)
    if x.shape[-1] != params[f"{prefix}.W0"].shape[0]:
        raise ShapeError(f"mlp_forward: input size {x.shape[-1]} != {params[f'{prefix}.W0'].shape[0]}")
    lead = x.shape[:-1]
    x = x.reshape(-1, x.shape[-1])
    acts = [x]
    for k in range(n):
        x = x @ params[f"{prefix}.W{k}"] + params[f"{prefix}.b{k}"]
        if k < n - 1:
            x = np.tanh(x)
        acts.append(x)
    if cache is not None:
        cache.append(acts)
    return x.reshape(*lead, x.shape[-1])


def mlp_backward(params: Params, prefix: str, acts: list[np.ndarray], dout: np.ndarray) -> np.ndarray:
    n = len(acts) - 1
    lead = dout.shape[:-1]
    d = dout.reshape(-1, dout.shape[-1])
    for k in reversed(range(n)):
        if k < n - 1:
            d = d * (1.0 - acts[k + 1] ** 2)
        params.grads[f"{prefix}.W{k}"] += acts[k].T @ d
        params.grads[f"{prefix}.b{k}"] += d.sum(axis=0)
        d = d @ params[f"{prefix}.W{k}"].T
    return d.reshape(*lead, d.shape[-1])


# ---------------------------------------------------------------- Adam


class Adam:
    """Adam with bias correction; moments are keyed by parameter block name."""

    def __init__(self, params: Params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.values.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.values.items()}

    def step(self) -> None:
        grads = self.params.grads
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
                raise NonFiniteGradientError(name, f"{bad} of {g.size} entries are NaN/Inf")
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, value in self.params.values.items():
            g = grads[name]
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------- checkpoints


def save_params(params: Params, path: str | Path, meta: dict | None = None) -> None:
    """Write a JSON checkpoint ``{format, version, meta, blocks: {name: {shape, values}}}``.

    Values are row-major; ``repr``-exact floats keep the round trip bit-identical.
    """
    blocks = {
        name: {"shape": list(v.shape), "values": v.ravel().tolist()} for name, v in params.values.items()
    }
    doc = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "meta": meta or {}, "blocks": blocks}
    Path(path).write_text(json.dumps(doc))


def load_params(path: str | Path) -> tuple[Params, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a parameter checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: checkpoint version {doc.get('version')} != {CHECKPOINT_VERSION}")
    params = Params()
    for name, block in doc["blocks"].items():
        params.add(name, np.array(block["values"], dtype=np.float64).reshape(block["shape"]))
    return params, doc.get("meta", {})
