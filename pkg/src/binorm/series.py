"""Sample representation, sliding windows and static (non-learnable) normalizers.

A sample is a ``D x H`` float64 array: rows are features, columns are time
steps, the most recent event sits in the last column. Batches stack samples
along a leading axis, ``(N, D, H)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Optional, Sequence

import numpy as np

STATIC_EPS = 1e-8

StaticKind = Literal["zscore", "minmax", "none"]


class EmptyStreamError(ValueError):
    """Raised when a stream is too short to yield a single window."""


class ValidationError(ValueError):
    """Raised on malformed numeric input (non-finite entries, bad shapes)."""


def as_sample(x) -> np.ndarray:
    """Validate ``x`` as a single ``D x H`` sample and return it as float64."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValidationError(f"expected a non-empty D x H matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("sample contains non-finite entries")
    return arr


def as_batch(x) -> np.ndarray:
    """Accept a single sample or a stack of samples; always return ``(N, D, H)``."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or min(arr.shape) < 1:
        raise ValidationError(f"expected (D, H) or (N, D, H), got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("input contains non-finite entries")
    return arr


@dataclass(frozen=True)
class SampleStream:
    """Event-major matrix: ``values`` is ``T x D`` (one row per event).

    ``days`` optionally tags each event with a non-decreasing day id, used for
    chronological day-based splits. ``mids`` optionally carries the mid-price
    of each event when the feature columns alone do not determine it.
    """

    values: np.ndarray
    timestamps: Optional[np.ndarray] = None
    days: Optional[np.ndarray] = None
    mids: Optional[np.ndarray] = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValidationError(f"stream must be 2-D (T x D), got shape {values.shape}")
        object.__setattr__(self, "values", values)
        for name in ("timestamps", "days", "mids"):
            col = getattr(self, name)
            if col is None:
                continue
            col = np.asarray(col)
            if col.shape != (values.shape[0],):
                raise ValidationError(f"{name} must have one entry per event")
            if name != "mids" and np.any(np.diff(col) < 0):
                raise ValidationError(f"{name} must be non-decreasing")
            object.__setattr__(self, name, col)

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def D(self) -> int:
        return self.values.shape[1]


def window_count(T: int, window: int, stride: int) -> int:
    if T < window:
        return 0
    return (T - window) // stride + 1


def sliding_windows(stream, window: int, stride: int = 1) -> np.ndarray:
    """Cut a ``T x D`` stream into ``(N, D, window)`` samples.

    Sample ``i`` holds events ``[i*stride, i*stride + window)`` transposed so
    that the most recent event is the last column.
    """
    values = stream.values if isinstance(stream, SampleStream) else np.asarray(stream, dtype=np.float64)
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be positive")
    if values.ndim != 2:
        raise ValidationError(f"stream must be 2-D (T x D), got shape {values.shape}")
    if not np.all(np.isfinite(values)):
        raise ValidationError("stream contains non-finite entries")
    T = values.shape[0]
    if T < window:
        raise EmptyStreamError(f"stream has {T} events, fewer than window length {window}")
    view = np.lib.stride_tricks.sliding_window_view(values, window, axis=0)  # (T-w+1, D, w)
    return np.ascontiguousarray(view[::stride])


@dataclass(frozen=True)
class StaticNormalizer:
    """Per-feature statistics frozen from the training set.

    ``loc``/``spread`` hold (mean, std) for zscore or (min, max - min) for
    minmax; both are ``None`` for ``kind == "none"``.
    """

    kind: StaticKind
    loc: Optional[np.ndarray] = None
    spread: Optional[np.ndarray] = None
    fitted: bool = False

    @property
    def D(self) -> Optional[int]:
        return None if self.loc is None else self.loc.shape[0]


def fit_static(kind: StaticKind, samples) -> StaticNormalizer:
    """Fit per-feature statistics over every time step of every training sample."""
    if kind not in ("zscore", "minmax", "none"):
        raise ValueError(f"unknown static normalizer {kind!r}")
    batch = as_batch(samples)
    if kind == "none":
        return StaticNormalizer("none", fitted=True)
    flat = batch.transpose(1, 0, 2).reshape(batch.shape[1], -1)  # D x (N*H)
    if kind == "zscore":
        mean = flat.mean(axis=1)
        std = np.sqrt(((flat - mean[:, None]) ** 2).mean(axis=1))
        return StaticNormalizer("zscore", mean, std, True)
    lo = flat.min(axis=1)
    hi = flat.max(axis=1)
    return StaticNormalizer("minmax", lo, hi - lo, True)


def guarded(spread):
    """``sqrt(spread**2 + STATIC_EPS**2)``: equals ``spread`` to float precision unless it is ~0."""
    return np.sqrt(np.square(spread) + STATIC_EPS**2)


def apply_static(norm: StaticNormalizer, samples) -> np.ndarray:
    """Apply frozen statistics. Accepts ``(D, H)`` or ``(N, D, H)``; shape is preserved."""
    if not norm.fitted:
        raise ValueError("static normalizer has not been fitted")
    x = np.asarray(samples, dtype=np.float64)
    if norm.kind == "none":
        return x
    if x.shape[-2] != norm.D:
        raise ValidationError(f"sample has D={x.shape[-2]}, normalizer was fitted with D={norm.D}")
    return (x - norm.loc[:, None]) / guarded(norm.spread)[:, None]


def stack(samples: Sequence) -> np.ndarray:
    return np.stack([as_sample(s) for s in samples])
