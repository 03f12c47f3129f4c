"""Adam with a step schedule, decoupled weight decay, max-norm and lambda projection.

Constraints applied after every optimizer step:

* max-norm on every output unit's weight vector of the backbone/head weight
  matrices (rows of ``W1`` and ``head.W``, columns of ``W2``);
* BiN branch weights clamped at zero;
* TABL attention weight clipped to ``[0, 1]`` and the attention diagonal
  reset to ``1/H``.
"""
from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .backbone import (
    ModelParams,
    ModelSpec,
    TablLayerParams,
    commit_forward_state,
    init_params,
    model_backward,
    model_forward,
    predict,
)
from .layers import BinParams, BnInputParams, bin_project
from .lob import LabeledDataset
from .metrics import classification_report, rmse
from .series import fit_static

log = logging.getLogger(__name__)

PROB_EPS = 1e-12


class NonFiniteGradientError(FloatingPointError):
    pass


class TrainingDiverged(RuntimeError):
    """Loss or gradients became non-finite; ``last_good`` holds the parameters before the bad step."""

    def __init__(self, msg, last_good=None, history=None):
        super().__init__(msg)
        self.last_good = last_good
        self.history = history


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 80
    lr: float = 1e-3
    drops: tuple = ((11, 0.1), (71, 0.1))
    weight_decay: float = 1e-4
    max_norm: float = 10.0
    batch_size: int = 256
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    setting: int = 1
    w_reg: float = 1.0
    decay_normalizer: bool = False
    standardize_horizon: bool = False

    def __post_init__(self):
        object.__setattr__(self, "drops", tuple((int(e), float(f)) for e, f in self.drops))
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if any(not 0 < f <= 1 for _, f in self.drops):
            raise ValueError("schedule factors must lie in (0, 1]")
        if not self.max_norm > 0:
            raise ValueError("max_norm must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.setting not in (1, 2):
            raise ValueError("setting must be 1 or 2")


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    """Learning rate in effect during ``epoch`` (1-based); a drop applies from its own epoch on."""
    if not 1 <= epoch <= cfg.epochs:
        raise ValueError(f"epoch {epoch} outside 1..{cfg.epochs}")
    lr = cfg.lr
    for at, factor in cfg.drops:
        if epoch >= at:
            lr *= factor
    return lr


# ---------------------------------------------------------------------------
# Adam and projections
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_update(tensors: dict, grads: dict, state: AdamState, lr: float, cfg: TrainConfig, decay=()):
    """One bias-corrected Adam step on a ``name -> array`` dict; pure.

    Names in ``decay`` additionally get decoupled weight decay
    ``p -= lr * weight_decay * p``.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for {name}")
    t = state.t + 1
    b1, b2 = cfg.beta1, cfg.beta2
    new, m_new, v_new = {}, {}, {}
    for name, p in tensors.items():
        g = grads[name]
        m = b1 * state.m.get(name, np.zeros_like(p)) + (1 - b1) * g
        v = b2 * state.v.get(name, np.zeros_like(p)) + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        q = p - lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
        if name in decay and cfg.weight_decay:
            q = q - lr * cfg.weight_decay * p
        new[name], m_new[name], v_new[name] = q, m, v
    return new, AdamState(t, m_new, v_new)


def max_norm_project(W: np.ndarray, c: float) -> np.ndarray:
    """Scale every row whose Euclidean norm exceeds ``c`` back onto the ball of radius ``c``."""
    if not c > 0:
        raise ValueError("max-norm cap must be positive")
    W = np.asarray(W, dtype=np.float64)
    rows = W.reshape(1, -1) if W.ndim == 1 else W
    norms = np.sqrt((rows * rows).sum(axis=1, keepdims=True))
    # rows already scaled onto the sphere may read one ulp above c; leaving them keeps the map idempotent
    over = norms > c * (1 + 1e-12)
    if not over.any():
        return W
    scale = np.where(over, c / np.where(over, norms, 1.0), 1.0)
    return (rows * scale).reshape(W.shape)


def constrained_units(params: ModelParams) -> dict:
    """``name -> matrix whose rows are the max-norm constrained unit vectors`` (views)."""
    out = {}
    for i, layer in enumerate(params.layers):
        out[f"layer{i}.W1"] = layer.W1
        out[f"layer{i}.W2"] = layer.W2.T
    out["head.W"] = params.head.W
    if params.head.Wr is not None:
        out["head.Wr"] = params.head.Wr.reshape(1, -1)
    return out


def apply_constraints(params: ModelParams, max_norm: float) -> None:
    """Project ``params`` in place onto the feasible set."""
    for name, rows in constrained_units(params).items():
        rows[...] = max_norm_project(rows, max_norm)
    for layer in params.layers:
        if isinstance(layer, TablLayerParams):
            np.fill_diagonal(layer.W, 1.0 / layer.W.shape[0])
            layer.lam[...] = np.clip(layer.lam, 0.0, 1.0)
    if isinstance(params.norm, BinParams):
        projected = bin_project(params.norm)
        params.norm.lam_a[...] = projected.lam_a
        params.norm.lam_b[...] = projected.lam_b


def decay_names(params: ModelParams, cfg: TrainConfig) -> set:
    names = {n for n in constrained_units(params)}
    if cfg.decay_normalizer:
        names |= {n for n in params.tensors() if n.startswith("norm.")}
    return names


def adam_step(params: ModelParams, grads: dict, state: AdamState, lr: float, cfg: TrainConfig):
    """Adam update with weight decay followed by all projections; returns ``(params', state')``."""
    out = copy.deepcopy(params)
    tensors = out.tensors()
    new, state = adam_update(tensors, grads, state, lr, cfg, decay_names(params, cfg))
    for name, arr in tensors.items():
        arr[...] = new[name]
    apply_constraints(out, cfg.max_norm)
    return out, state


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def loss_setting1(probs, labels):
    """Mean cross-entropy and its gradient w.r.t. the logits (``(p - onehot) / N``).

    Accepts a single probability vector with an int label, or a batch.
    """
    probs = np.asarray(probs, dtype=np.float64)
    single = probs.ndim == 1
    P = probs[None] if single else probs
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    N = P.shape[0]
    loss = float(-np.log(np.maximum(P[np.arange(N), y], PROB_EPS)).mean())
    d = P.copy()
    d[np.arange(N), y] -= 1.0
    d /= N
    return loss, (d[0] if single else d)


def loss_setting2(probs, direction, h_hat, h, w_reg: float = 1.0):
    """Cross-entropy on the direction plus ``w_reg * (h_hat - h)^2``, batch-averaged.

    Returns ``(loss, dlogits, dh_hat)``.
    """
    ce, dlogits = loss_setting1(probs, direction)
    h_hat = np.asarray(h_hat, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    N = max(h_hat.size, 1)
    resid = h_hat - h
    loss = ce + w_reg * float(np.mean(resid**2))
    return loss, dlogits, 2.0 * w_reg * resid / N


def batch_loss(spec: ModelSpec, params: ModelParams, X, y, h=None, cfg: Optional[TrainConfig] = None, train=True):
    """Forward, loss and backward on one batch. Returns ``(loss, grads, output)``."""
    cfg = cfg or TrainConfig()
    out = model_forward(spec, params, X, train=train)
    if cfg.setting == 1:
        loss, dlogits = loss_setting1(out.probs, y)
        dh = None
    else:
        loss, dlogits, dh = loss_setting2(out.probs, y, out.horizon, h, cfg.w_reg)
    grads, _ = model_backward(spec, params, out, dlogits, dh)
    return loss, grads, out


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainHistory:
    rows: list = field(default_factory=list)
    wall_clock: list = field(default_factory=list)

    def __len__(self):
        return len(self.rows)


@dataclass
class TrainResult:
    params: ModelParams
    history: TrainHistory
    state: AdamState
    epoch: int
    horizon_scale: float = 1.0

    def __iter__(self):
        return iter((self.params, self.history))


def evaluate(spec: ModelSpec, params: ModelParams, ds: LabeledDataset, horizon_scale: float = 1.0) -> dict:
    out = predict(spec, params, ds.X)
    rep = classification_report(out.probs.argmax(axis=1), ds.labels, ds.n_classes)
    metrics = rep.as_dict()
    metrics["loss"], _ = loss_setting1(out.probs, ds.labels)
    if ds.setting == 2 and out.horizon is not None:
        metrics["rmse"] = rmse(out.horizon * horizon_scale, ds.horizons)
    return metrics


def _batches(n, batch_size, rng, min_size):
    perm = rng.permutation(n)
    for i in range(0, n, batch_size):
        idx = perm[i : i + batch_size]
        if len(idx) >= min_size:
            yield idx


def train(
    spec: ModelSpec,
    dataset: LabeledDataset,
    cfg: TrainConfig,
    test: Optional[LabeledDataset] = None,
    params: Optional[ModelParams] = None,
) -> TrainResult:
    """Mini-batch training; deterministic given ``cfg.seed``.

    Static normalizer statistics are fitted on ``dataset`` and frozen. For
    input batch normalization, a trailing mini-batch of size 1 is skipped.
    """
    if len(dataset) == 0:
        raise ValueError("empty training set")
    if (dataset.D, dataset.H) != spec.input_shape:
        raise ValueError(f"dataset windows are {(dataset.D, dataset.H)}, model expects {spec.input_shape}")
    if dataset.setting != cfg.setting or spec.n_classes != dataset.n_classes:
        raise ValueError("dataset setting, model head and training setting disagree")
    if params is None:
        static = fit_static(spec.normalizer, dataset.X) if spec.normalizer in ("zscore", "minmax") else None
        params = init_params(spec, cfg.seed, static)
    horizon_scale = 1.0
    if cfg.setting == 2 and cfg.standardize_horizon:
        horizon_scale = float(np.std(dataset.horizons)) or 1.0
    targets_h = None if dataset.horizons is None else dataset.horizons / horizon_scale
    rng = np.random.default_rng([cfg.seed, 0x5EED])
    state = AdamState()
    history = TrainHistory()
    min_batch = 2 if isinstance(params.norm, BnInputParams) else 1
    for epoch in range(1, cfg.epochs + 1):
        started = time.perf_counter()
        lr = lr_at(cfg, epoch)
        losses, sizes = [], []
        for idx in _batches(len(dataset), cfg.batch_size, rng, min_batch):
            h = None if targets_h is None else targets_h[idx]
            loss, grads, out = batch_loss(spec, params, dataset.X[idx], dataset.labels[idx], h, cfg, train=True)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss became non-finite in epoch {epoch}", params, history)
            try:
                new_params, state = adam_step(params, grads, state, lr, cfg)
            except NonFiniteGradientError as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}", params, history) from exc
            commit_forward_state(new_params, out)
            params = new_params
            losses.append(loss)
            sizes.append(len(idx))
        row = {"epoch": epoch, "lr": lr, "epoch_loss": float(np.average(losses, weights=sizes)) if losses else float("nan")}
        for k, v in evaluate(spec, params, dataset, horizon_scale).items():
            if k != "confusion":
                row[f"train_{k}"] = v
        if test is not None and len(test):
            for k, v in evaluate(spec, params, test, horizon_scale).items():
                if k != "confusion":
                    row[f"test_{k}"] = v
        history.rows.append(row)
        history.wall_clock.append(time.perf_counter() - started)
        log.info("epoch %d lr=%.2g loss=%.4f train_f1=%.4f", epoch, lr, row["epoch_loss"], row["train_f1"])
    return TrainResult(params, history, state, cfg.epochs, horizon_scale)
