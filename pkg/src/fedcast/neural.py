"""Recurrent forecasters and their training math.

Single-layer LSTM and GRU cells with a dense readout head, implemented
directly on numpy float64 arrays. Includes the plain and exponentially
weighted squared-error losses, full backpropagation through time, and the
minibatch SGD loop run on each client between aggregation rounds.

Parameters live in plain ``dict[str, np.ndarray]`` keyed by tensor name;
``tensor_order`` fixes the canonical (alphabetical) ordering used for
initialization, aggregation, and serialization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericFault

CELL_TYPES = ("lstm", "gru")

_LSTM_GATES = ("f", "g", "i", "o")
_GRU_GATES = ("h", "r", "z")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture of one forecaster."""

    cell: str
    hidden_size: int
    lookback: int
    horizon: int
    input_size: int = 1

    def __post_init__(self):
        if self.cell not in CELL_TYPES:
            raise ConfigError(f"cell must be one of {CELL_TYPES}, got {self.cell!r}")
        for name in ("hidden_size", "lookback", "horizon", "input_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")


@dataclass(frozen=True)
class SgdConfig:
    """Local-update hyperparameters (one client, one round)."""

    learning_rate: float
    batch_size: int
    local_epochs: int
    ew_base: float = 1.0

    def __post_init__(self):
        if not self.learning_rate > 0.0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.local_epochs < 1:
            raise ConfigError("local_epochs must be >= 1")
        if not self.ew_base >= 1.0:
            raise ConfigError("ew_base must be >= 1")


def tensor_order(cell: str) -> tuple[str, ...]:
    """Canonical tensor names for a cell type, in fixed alphabetical order."""
    if cell == "lstm":
        gates = _LSTM_GATES
    elif cell == "gru":
        gates = _GRU_GATES
    else:
        raise ConfigError(f"unknown cell type {cell!r}")
    names = [f"W_{g}" for g in gates] + ["W_out"]
    names += [f"b_{g}" for g in gates] + ["b_out"]
    return tuple(sorted(names))


def tensor_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    concat = cfg.hidden_size + cfg.input_size
    shapes: dict[str, tuple[int, ...]] = {}
    for name in tensor_order(cfg.cell):
        if name == "W_out":
            shapes[name] = (cfg.horizon, cfg.hidden_size)
        elif name == "b_out":
            shapes[name] = (cfg.horizon,)
        elif name.startswith("W_"):
            shapes[name] = (cfg.hidden_size, concat)
        else:
            shapes[name] = (cfg.hidden_size,)
    return shapes


def param_count(cfg: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in tensor_shapes(cfg).values())


def init_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Fresh parameters: weights uniform in +-1/sqrt(hidden), biases zero.

    The LSTM forget-gate bias starts at 1 so early gradients pass through
    the cell state. Tensors are drawn in canonical order, so equal seeds
    give bit-identical parameters.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    bound = 1.0 / math.sqrt(cfg.hidden_size)
    params: dict[str, np.ndarray] = {}
    for name, shape in tensor_shapes(cfg).items():
        if name.startswith("W_"):
            params[name] = rng.uniform(-bound, bound, size=shape)
        elif name == "b_f" and cfg.cell == "lstm":
            params[name] = np.ones(shape, dtype=np.float64)
        else:
            params[name] = np.zeros(shape, dtype=np.float64)
    return params


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _check_params(cfg: ModelConfig, params: dict[str, np.ndarray]) -> None:
    expected = tensor_shapes(cfg)
    if set(params) != set(expected):
        raise ConfigError(
            f"parameter names {sorted(params)} do not match cell "
            f"{cfg.cell!r} ({sorted(expected)})"
        )
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ConfigError(
                f"tensor {name}: expected shape {shape}, got {params[name].shape}"
            )


def _forward_cached(cfg, params, X):
    """Run the recurrence, keeping per-step activations for backprop."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != cfg.lookback:
        raise ConfigError(f"inputs must be (batch, {cfg.lookback}), got {X.shape}")
    B = X.shape[0]
    hid = cfg.hidden_size
    h = np.zeros((B, hid))
    cache: list[dict[str, np.ndarray]] = []
    if cfg.cell == "lstm":
        c = np.zeros((B, hid))
        for t in range(cfg.lookback):
            x_t = X[:, t : t + 1]
            zcat = np.concatenate([h, x_t], axis=1)
            f = _sigmoid(zcat @ params["W_f"].T + params["b_f"])
            i = _sigmoid(zcat @ params["W_i"].T + params["b_i"])
            g = np.tanh(zcat @ params["W_g"].T + params["b_g"])
            c_new = f * c + i * g
            o = _sigmoid(zcat @ params["W_o"].T + params["b_o"])
            tanh_c = np.tanh(c_new)
            h = o * tanh_c
            cache.append(
                {"zcat": zcat, "f": f, "i": i, "g": g, "o": o,
                 "c_prev": c, "tanh_c": tanh_c}
            )
            c = c_new
    else:
        for t in range(cfg.lookback):
            x_t = X[:, t : t + 1]
            zcat = np.concatenate([h, x_t], axis=1)
            z = _sigmoid(zcat @ params["W_z"].T + params["b_z"])
            r = _sigmoid(zcat @ params["W_r"].T + params["b_r"])
            hcat = np.concatenate([r * h, x_t], axis=1)
            cand = np.tanh(hcat @ params["W_h"].T + params["b_h"])
            h_new = z * h + (1.0 - z) * cand
            cache.append({"zcat": zcat, "hcat": hcat, "z": z, "r": r,
                          "cand": cand, "h_prev": h})
            h = h_new
    pred = h @ params["W_out"].T + params["b_out"]
    return pred, h, cache


def forward(cfg: ModelConfig, params: dict[str, np.ndarray], X: np.ndarray) -> np.ndarray:
    """Multi-step forecast for a batch of input windows; shape (batch, horizon)."""
    _check_params(cfg, params)
    pred, _, _ = _forward_cached(cfg, params, X)
    return pred


def _step_weights(horizon: int, base: float) -> np.ndarray:
    if not base >= 1.0:
        raise ValueError(f"ew base must be >= 1, got {base}")
    return np.power(float(base), np.arange(horizon, dtype=np.float64))


def mse(pred: np.ndarray, target: np.ndarray) -> float:
    """Squared error averaged over horizon steps, then over the batch."""
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return float(np.mean((target - pred) ** 2, axis=1).mean())


def ew_mse(pred: np.ndarray, target: np.ndarray, base: float) -> float:
    """Squared error with weight base**k on horizon step k, averaged as mse().

    Later steps carry geometrically larger weights, steering training toward
    the hardest (furthest-ahead) predictions. base == 1 reduces exactly to
    mse().
    """
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    w = _step_weights(pred.shape[1], base)
    per_sample = (w * (target - pred) ** 2).sum(axis=1) / pred.shape[1]
    return float(per_sample.mean())


def loss_and_grads(
    cfg: ModelConfig,
    params: dict[str, np.ndarray],
    X: np.ndarray,
    Y: np.ndarray,
    ew_base: float = 1.0,
) -> tuple[float, dict[str, np.ndarray]]:
    """Weighted squared-error loss and its exact gradients via BPTT.

    Returns the batch loss (matching ``ew_mse(forward(...), Y, ew_base)``)
    and one gradient array per parameter tensor.
    """
    _check_params(cfg, params)
    Y = np.asarray(Y, dtype=np.float64)
    pred, h_last, cache = _forward_cached(cfg, params, X)
    if Y.shape != pred.shape:
        raise ConfigError(f"targets must be {pred.shape}, got {Y.shape}")
    B, H = pred.shape
    hid = cfg.hidden_size
    w = _step_weights(H, ew_base)
    err = pred - Y
    loss = float(((w * err**2).sum(axis=1) / H).mean())

    grads = {name: np.zeros_like(arr) for name, arr in params.items()}
    dpred = (2.0 / (B * H)) * w * err
    grads["W_out"] = dpred.T @ h_last
    grads["b_out"] = dpred.sum(axis=0)
    dh = dpred @ params["W_out"]

    if cfg.cell == "lstm":
        dc_next = np.zeros((B, hid))
        for step in reversed(cache):
            f, i, g, o = step["f"], step["i"], step["g"], step["o"]
            do = dh * step["tanh_c"]
            dc = dh * o * (1.0 - step["tanh_c"] ** 2) + dc_next
            da_o = do * o * (1.0 - o)
            da_f = dc * step["c_prev"] * f * (1.0 - f)
            da_i = dc * g * i * (1.0 - i)
            da_g = dc * i * (1.0 - g**2)
            zcat = step["zcat"]
            grads["W_f"] += da_f.T @ zcat
            grads["W_i"] += da_i.T @ zcat
            grads["W_g"] += da_g.T @ zcat
            grads["W_o"] += da_o.T @ zcat
            grads["b_f"] += da_f.sum(axis=0)
            grads["b_i"] += da_i.sum(axis=0)
            grads["b_g"] += da_g.sum(axis=0)
            grads["b_o"] += da_o.sum(axis=0)
            dzcat = (
                da_f @ params["W_f"]
                + da_i @ params["W_i"]
                + da_g @ params["W_g"]
                + da_o @ params["W_o"]
            )
            dh = dzcat[:, :hid]
            dc_next = dc * f
    else:
        for step in reversed(cache):
            z, r, cand, h_prev = step["z"], step["r"], step["cand"], step["h_prev"]
            da_z = dh * (h_prev - cand) * z * (1.0 - z)
            da_h = dh * (1.0 - z) * (1.0 - cand**2)
            grads["W_h"] += da_h.T @ step["hcat"]
            grads["b_h"] += da_h.sum(axis=0)
            drh = (da_h @ params["W_h"])[:, :hid]
            da_r = drh * h_prev * r * (1.0 - r)
            zcat = step["zcat"]
            grads["W_z"] += da_z.T @ zcat
            grads["W_r"] += da_r.T @ zcat
            grads["b_z"] += da_z.sum(axis=0)
            grads["b_r"] += da_r.sum(axis=0)
            dh = (
                dh * z
                + drh * r
                + (da_z @ params["W_z"])[:, :hid]
                + (da_r @ params["W_r"])[:, :hid]
            )
    return loss, grads


def sgd_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    learning_rate: float,
) -> dict[str, np.ndarray]:
    """One plain gradient-descent update; returns new arrays."""
    return {name: params[name] - learning_rate * grads[name] for name in params}


@dataclass(frozen=True)
class TrainStats:
    """What a client reports back after its local epochs."""

    mean_loss: float
    n_samples: int
    n_batches: int


def train_local(
    cfg: ModelConfig,
    params: dict[str, np.ndarray],
    X: np.ndarray,
    Y: np.ndarray,
    sgd: SgdConfig,
    seed: int,
) -> tuple[dict[str, np.ndarray], TrainStats]:
    """Minibatch SGD for ``local_epochs`` passes over one client's samples.

    Each epoch reshuffles with the given seed's stream; the last short batch
    is kept. Returns updated parameters and the mean per-batch loss across
    the whole call. Raises NumericFault if the loss ever leaves the finite
    range (e.g. a divergent learning rate).
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    n = X.shape[0]
    if n == 0:
        raise ConfigError("cannot train on an empty dataset")
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    current = {name: arr.astype(np.float64, copy=True) for name, arr in params.items()}
    losses: list[float] = []
    for epoch in range(sgd.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, sgd.batch_size):
            batch = order[start : start + sgd.batch_size]
            # divergence is detected below, so the overflow that precedes it
            # is expected; keep it out of the warning stream
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grads = loss_and_grads(cfg, current, X[batch], Y[batch], sgd.ew_base)
            if not math.isfinite(loss):
                raise NumericFault(
                    "non-finite training loss",
                    step=f"epoch {epoch}, batch {start // sgd.batch_size}",
                )
            current = sgd_step(current, grads, sgd.learning_rate)
            losses.append(loss)
    return current, TrainStats(
        mean_loss=float(np.mean(losses)), n_samples=n, n_batches=len(losses)
    )
