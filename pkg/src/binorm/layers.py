"""Learnable input normalization layers: BiN, DAIN and input batch normalization.

Every forward accepts one ``D x H`` sample or an ``(N, D, H)`` batch and
returns an output of the same shape plus a cache. Backward passes return a
:class:`LayerGrads` whose ``params`` has the same type and shapes as the
layer's parameters (gradients are summed over the batch) and whose ``dX``
matches the input.

Standard deviations are population (divide-by-count) statistics. BiN divides
by ``sqrt(var + EPS**2)``: a constant slice maps to zero instead of NaN,
while for any non-degenerate slice the guard vanishes below float
resolution, so standardized outputs keep unit spread and stay invariant to
rescaling. DAIN adds ``EPS`` to its learned scale.
"""
from __future__ import annotations

from dataclasses import dataclass, fields, replace
from typing import Any, Literal

import numpy as np

from .series import ValidationError, as_batch

EPS = 1e-8


@dataclass
class LayerGrads:
    dX: np.ndarray
    params: Any


def _tensors(p) -> dict:
    return {f.name: getattr(p, f.name) for f in fields(p) if isinstance(getattr(p, f.name), np.ndarray)}


def _unbatch(out, single):
    return out[0] if single else out


def _check_upstream(d, like):
    d = np.asarray(d, dtype=np.float64)
    if d.ndim == 2:
        d = d[None]
    if d.shape != like.shape:
        raise ValidationError(f"upstream gradient shape {d.shape} does not match {like.shape}")
    return d


# ---------------------------------------------------------------------------
# BiN
# ---------------------------------------------------------------------------


@dataclass
class BinParams:
    gamma2: np.ndarray  # (D,) temporal-branch scale
    beta2: np.ndarray  # (D,)
    gamma1: np.ndarray  # (H,) feature-branch scale
    beta1: np.ndarray  # (H,)
    lam_a: np.ndarray  # 0-d, weight of the temporal branch
    lam_b: np.ndarray  # 0-d, weight of the feature branch

    @classmethod
    def init(cls, D: int, H: int) -> "BinParams":
        return cls(np.ones(D), np.zeros(D), np.ones(H), np.zeros(H), np.array(0.5), np.array(0.5))

    @property
    def shape(self):
        return self.gamma2.shape[0], self.gamma1.shape[0]

    def tensors(self) -> dict:
        return _tensors(self)


@dataclass
class BinCache:
    X: np.ndarray
    col_mean: np.ndarray  # (N, D) mean temporal slice
    sigma_t: np.ndarray  # (N, D) guarded std along time
    row_mean: np.ndarray  # (N, H) mean feature series
    sigma_f: np.ndarray  # (N, H) guarded std along features
    za: np.ndarray  # standardized along time, pre gamma2/beta2
    zb: np.ndarray  # standardized along features, pre gamma1/beta1
    A: np.ndarray
    B: np.ndarray
    single: bool


def _standardize(x, axis):
    mu = x.mean(axis=axis, keepdims=True)
    u = x - mu
    # second pass removes the rounding left in mu when offsets dwarf the spread
    r = u.mean(axis=axis, keepdims=True)
    u = u - r
    mu = mu + r
    sigma = np.sqrt((u * u).mean(axis=axis, keepdims=True) + EPS**2)
    return u, mu, sigma, u / sigma


def _standardize_backward(dz, u, sigma, axis):
    """Reverse-mode of ``z = (x - mean(x)) / sqrt(var(x) + EPS**2)`` along ``axis``."""
    n = u.shape[axis]
    dsigma = -(dz * u).sum(axis=axis, keepdims=True) / sigma**2
    du = dz / sigma + (dsigma / (n * sigma)) * u
    return du - du.mean(axis=axis, keepdims=True)


def bin_forward(X, p: BinParams):
    """Bilinear input normalization.

    The temporal branch standardizes each feature series over its window and
    applies ``gamma2``/``beta2`` per feature; the feature branch standardizes
    each time step across features and applies ``gamma1``/``beta1`` per time
    step. The output blends them: ``lam_a * A + lam_b * B``.
    """
    single = np.ndim(X) == 2
    X = as_batch(X)
    D, H = p.shape
    if X.shape[1:] != (D, H):
        raise ValidationError(f"input is {X.shape[1:]}, BiN parameters expect {(D, H)}")
    ua, col_mean, sigma_t, za = _standardize(X, axis=2)
    ub, row_mean, sigma_f, zb = _standardize(X, axis=1)
    A = p.gamma2[:, None] * za + p.beta2[:, None]
    B = p.gamma1[None, :] * zb + p.beta1[None, :]
    T = p.lam_a * A + p.lam_b * B
    cache = BinCache(X, col_mean[..., 0], sigma_t[..., 0], row_mean[:, 0], sigma_f[:, 0], za, zb, A, B, single)
    return _unbatch(T, single), cache


def bin_backward(cache: BinCache, p: BinParams, dT) -> LayerGrads:
    dT = _check_upstream(dT, cache.X)
    dA = p.lam_a * dT
    dB = p.lam_b * dT
    grads = BinParams(
        gamma2=(dA * cache.za).sum(axis=(0, 2)),
        beta2=dA.sum(axis=(0, 2)),
        gamma1=(dB * cache.zb).sum(axis=(0, 1)),
        beta1=dB.sum(axis=(0, 1)),
        lam_a=np.array((dT * cache.A).sum()),
        lam_b=np.array((dT * cache.B).sum()),
    )
    X = cache.X
    ua = X - cache.col_mean[..., None]
    ub = X - cache.row_mean[:, None, :]
    dX = _standardize_backward(dA * p.gamma2[:, None], ua, cache.sigma_t[..., None], axis=2)
    dX = dX + _standardize_backward(dB * p.gamma1[None, :], ub, cache.sigma_f[:, None, :], axis=1)
    return LayerGrads(_unbatch(dX, cache.single), grads)


def bin_project(p: BinParams) -> BinParams:
    """Clamp the branch weights at zero (projected-gradient step for ``lam >= 0``)."""
    return replace(p, lam_a=np.maximum(p.lam_a, 0.0), lam_b=np.maximum(p.lam_b, 0.0))


# ---------------------------------------------------------------------------
# DAIN
# ---------------------------------------------------------------------------


@dataclass
class DainParams:
    Wa: np.ndarray  # (D, D) shift
    Wb: np.ndarray  # (D, D) scale
    Wc: np.ndarray  # (D, D) gate
    Wd: np.ndarray  # (D,) gate bias

    @classmethod
    def init(cls, D: int) -> "DainParams":
        return cls(np.eye(D), np.eye(D), np.zeros((D, D)), np.zeros(D))

    @property
    def D(self):
        return self.Wd.shape[0]

    def tensors(self) -> dict:
        return _tensors(self)


@dataclass
class DainCache:
    X: np.ndarray
    col_mean: np.ndarray  # (N, D)
    y: np.ndarray  # (N, D, H) shifted
    sigma: np.ndarray  # (N, D)
    scale: np.ndarray  # (N, D) Wb @ sigma + EPS
    z: np.ndarray  # (N, D, H) scaled
    z_mean: np.ndarray  # (N, D)
    gate: np.ndarray  # (N, D)
    single: bool


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def dain_forward(X, p: DainParams):
    """Adaptive shift, scale and sigmoid gating along the temporal mode."""
    single = np.ndim(X) == 2
    X = as_batch(X)
    if X.shape[1] != p.D:
        raise ValidationError(f"input has D={X.shape[1]}, DAIN parameters expect D={p.D}")
    col_mean = X.mean(axis=2)
    y = X - (col_mean @ p.Wa.T)[..., None]
    sigma = np.sqrt((y * y).mean(axis=2))
    scale = sigma @ p.Wb.T + EPS
    z = y / scale[..., None]
    z_mean = z.mean(axis=2)
    gate = _sigmoid(z_mean @ p.Wc.T + p.Wd)
    T = z * gate[..., None]
    return _unbatch(T, single), DainCache(X, col_mean, y, sigma, scale, z, z_mean, gate, single)


def dain_backward(cache: DainCache, p: DainParams, dT) -> LayerGrads:
    dT = _check_upstream(dT, cache.X)
    H = cache.X.shape[2]
    g = cache.gate
    dz = dT * g[..., None]
    dpre = (dT * cache.z).sum(axis=2) * g * (1.0 - g)  # (N, D)
    dWc = dpre.T @ cache.z_mean
    dWd = dpre.sum(axis=0)
    dz = dz + (dpre @ p.Wc)[..., None] / H

    y, s = cache.y, cache.scale
    dy = dz / s[..., None]
    ds = -(dz * y).sum(axis=2) / s**2
    dWb = ds.T @ cache.sigma
    dsigma = ds @ p.Wb
    safe = np.where(cache.sigma > 0, cache.sigma, 1.0)
    dy = dy + np.where(cache.sigma > 0, dsigma / (H * safe), 0.0)[..., None] * y

    dsum = dy.sum(axis=2)  # gradient flowing into the subtracted shift
    dWa = -dsum.T @ cache.col_mean
    dX = dy + (-(dsum @ p.Wa) / H)[..., None]
    grads = DainParams(Wa=dWa, Wb=dWb, Wc=dWc, Wd=dWd)
    return LayerGrads(_unbatch(dX, cache.single), grads)


# ---------------------------------------------------------------------------
# Batch normalization applied to the input
# ---------------------------------------------------------------------------


@dataclass
class BnInputParams:
    """Each of the ``D*H`` positions is normalized as an independent feature."""

    scale: np.ndarray  # (D, H)
    shift: np.ndarray  # (D, H)
    running_mean: np.ndarray  # (D, H), not trained
    running_var: np.ndarray  # (D, H), not trained
    momentum: float = 0.9
    mode: Literal["train", "eval"] = "train"

    @classmethod
    def init(cls, D: int, H: int, momentum: float = 0.9) -> "BnInputParams":
        return cls(np.ones((D, H)), np.zeros((D, H)), np.zeros((D, H)), np.ones((D, H)), momentum)

    def tensors(self) -> dict:
        return {"scale": self.scale, "shift": self.shift}


@dataclass
class BnCache:
    X: np.ndarray
    xhat: np.ndarray
    inv_std: np.ndarray
    mode: str
    # running statistics after this call; commit with bn_commit
    running_mean: np.ndarray
    running_var: np.ndarray


def bn_input_forward(batch, p: BnInputParams, mode=None):
    """Normalize every ``(d, h)`` position with batch statistics (train) or running ones (eval).

    The forward is pure: updated running statistics are returned in the
    cache and must be written back with :func:`bn_commit`.
    """
    X = as_batch(batch)
    mode = mode or p.mode
    if X.shape[1:] != p.scale.shape:
        raise ValidationError(f"input is {X.shape[1:]}, BN parameters expect {p.scale.shape}")
    if mode == "train":
        if X.shape[0] < 2:
            raise ValidationError("batch normalization needs a batch of at least 2 samples in train mode")
        mean = X.mean(axis=0)
        var = X.var(axis=0)
        m = p.momentum
        run_mean = m * p.running_mean + (1 - m) * mean
        run_var = m * p.running_var + (1 - m) * var
    elif mode == "eval":
        mean, var = p.running_mean, p.running_var
        run_mean, run_var = p.running_mean, p.running_var
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + EPS)
    xhat = (X - mean) * inv_std
    out = p.scale * xhat + p.shift
    return out, BnCache(X, xhat, inv_std, mode, run_mean, run_var)


def bn_commit(p: BnInputParams, cache: BnCache) -> BnInputParams:
    return replace(p, running_mean=cache.running_mean, running_var=cache.running_var)


def bn_input_backward(cache: BnCache, p: BnInputParams, d_out) -> LayerGrads:
    d_out = np.asarray(d_out, dtype=np.float64)
    if d_out.shape != cache.X.shape:
        raise ValidationError(f"upstream gradient shape {d_out.shape} does not match batch {cache.X.shape}")
    grads = BnInputParams(
        scale=(d_out * cache.xhat).sum(axis=0),
        shift=d_out.sum(axis=0),
        running_mean=np.zeros_like(p.running_mean),
        running_var=np.zeros_like(p.running_var),
        momentum=p.momentum,
        mode=p.mode,
    )
    dxhat = d_out * p.scale
    if cache.mode == "eval":
        dX = dxhat * cache.inv_std
    else:
        dX = cache.inv_std * (
            dxhat - dxhat.mean(axis=0) - cache.xhat * (dxhat * cache.xhat).mean(axis=0)
        )
    return LayerGrads(dX, grads)
