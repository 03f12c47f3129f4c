"""Limit order book ingestion, mid-price movement labels, datasets and synthetic regime data."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Literal, Optional, Sequence

import numpy as np

from .series import SampleStream, ValidationError, sliding_windows


class Movement(enum.IntEnum):
    UP = 0
    STATIONARY = 1
    DOWN = 2


class Direction(enum.IntEnum):
    UP = 0
    DOWN = 1


# ---------------------------------------------------------------------------
# Order book events and mid-prices
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LobEvent:
    """One book snapshot: ``levels[l] = (ask price, ask volume, bid price, bid volume)``."""

    levels: np.ndarray
    timestamp: Optional[float] = None

    def __post_init__(self):
        lv = np.asarray(self.levels, dtype=np.float64)
        if lv.ndim == 1:
            if lv.size % 4:
                raise ValidationError("flat event vector length must be a multiple of 4")
            lv = lv.reshape(-1, 4)
        if lv.ndim != 2 or lv.shape[1] != 4 or lv.shape[0] < 1:
            raise ValidationError(f"expected L x 4 levels, got shape {lv.shape}")
        ask, ask_v, bid, bid_v = lv.T
        if np.any(ask <= 0) or np.any(bid <= 0):
            raise ValidationError("prices must be positive")
        if np.any(ask_v < 0) or np.any(bid_v < 0):
            raise ValidationError("volumes must be non-negative")
        if ask[0] < bid[0]:
            raise ValidationError("best ask is below best bid")
        if np.any(np.diff(ask) < 0) or np.any(np.diff(bid) > 0):
            raise ValidationError("ask prices must rise and bid prices fall with depth")
        object.__setattr__(self, "levels", lv)

    @property
    def best_ask(self) -> float:
        return float(self.levels[0, 0])

    @property
    def best_bid(self) -> float:
        return float(self.levels[0, 2])


def mid_price(event, tick_factor: Optional[int] = None) -> float:
    """Average of the best bid and best ask.

    ``event`` is a :class:`LobEvent` or a ``(bid, ask)`` pair. With
    ``tick_factor`` set, prices are rounded to integer ticks first so the
    average is formed exactly and only rounded once at the end.
    """
    if isinstance(event, LobEvent):
        bid, ask = event.best_bid, event.best_ask
    else:
        try:
            bid, ask = event
        except (TypeError, ValueError):
            raise ValidationError("mid_price needs level-1 bid and ask") from None
        if bid is None or ask is None:
            raise ValidationError("mid_price needs level-1 bid and ask")
    if tick_factor:
        b = round(Fraction(str(bid)) * tick_factor)
        a = round(Fraction(str(ask)) * tick_factor)
        return float(Fraction(a + b, 2 * tick_factor))
    return (float(bid) + float(ask)) / 2.0


def mid_prices(values: np.ndarray, ask_col: int = 0, bid_col: int = 2, tick_factor: Optional[int] = None) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if tick_factor:
        a = np.rint(values[:, ask_col] * tick_factor)
        b = np.rint(values[:, bid_col] * tick_factor)
        return (a + b) / (2.0 * tick_factor)
    return (values[:, ask_col] + values[:, bid_col]) / 2.0


# ---------------------------------------------------------------------------
# Labels
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LabelConfig:
    """``horizon`` is the prediction horizon in events (not the window length).

    ``rule="forward"`` labels with ``(mean(p[t+1..t+k]) - p[t]) / p[t]``;
    ``rule="symmetric"`` uses ``(m_plus - m_minus) / m_minus`` where
    ``m_minus`` is the mean of ``p[t-k+1..t]``.
    """

    horizon: int = 10
    threshold: float = 1e-5
    smoothing: int = 1
    max_horizon: int = 1000
    rule: Literal["forward", "symmetric"] = "forward"

    def __post_init__(self):
        if self.horizon < 1 or self.smoothing < 1 or self.max_horizon < 1:
            raise ValueError("horizon, smoothing and max_horizon must be >= 1")
        if not self.threshold > 0:
            raise ValueError("threshold must be positive")
        if self.rule not in ("forward", "symmetric"):
            raise ValueError(f"unknown label rule {self.rule!r}")


def _classify(ret: float, alpha: float) -> Movement:
    if ret > alpha:
        return Movement.UP
    if ret < -alpha:
        return Movement.DOWN
    return Movement.STATIONARY


def label_movement(mids, t: int, cfg: LabelConfig) -> Optional[Movement]:
    """Three-way label of the smoothed return over the next ``cfg.horizon`` events.

    Returns ``None`` when the future (or, for the symmetric rule, the past)
    does not fit inside ``mids``; such samples are dropped.
    """
    k = cfg.horizon
    if t < 0 or t + k >= len(mids):
        return None
    m_plus = float(np.mean(mids[t + 1 : t + k + 1]))
    if cfg.rule == "forward":
        ref = float(mids[t])
    else:
        if t - k + 1 < 0:
            return None
        ref = float(np.mean(mids[t - k + 1 : t + 1]))
    return _classify((m_plus - ref) / ref, cfg.threshold)


def label_next_move(mids, t: int, cfg: LabelConfig):
    """First ``j`` in ``1..max_horizon`` where the smoothed return leaves ``[-alpha, alpha]``.

    The smoothed price at step ``j`` is ``mean(p[t+j .. t+j+smoothing-1])``.
    Returns ``(Direction, j)`` or ``None`` when no crossing happens in range.
    """
    p_t = float(mids[t])
    s = cfg.smoothing
    n = len(mids)
    for j in range(1, cfg.max_horizon + 1):
        if t + j + s > n:
            return None
        ret = (float(np.mean(mids[t + j : t + j + s])) - p_t) / p_t
        if ret > cfg.threshold:
            return Direction.UP, j
        if ret < -cfg.threshold:
            return Direction.DOWN, j
    return None


def _forward_returns(mids: np.ndarray, k: int) -> np.ndarray:
    """Vectorized forward smoothed return for every t with t + k < len(mids)."""
    n = len(mids) - k
    if n <= 0:
        return np.empty(0)
    c = np.concatenate([[0.0], np.cumsum(mids)])
    m_plus = (c[k + 1 : k + 1 + n] - c[1 : 1 + n]) / k
    return (m_plus - mids[:n]) / mids[:n]


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


@dataclass
class LabeledDataset:
    """Windows with one target each.

    Setting 1: ``labels`` in {0: up, 1: stationary, 2: down}.
    Setting 2: ``labels`` in {0: up, 1: down} and ``horizons`` >= 1.
    ``end_index`` is the stream index of each window's most recent event.
    """

    X: np.ndarray
    labels: np.ndarray
    setting: int = 1
    horizons: Optional[np.ndarray] = None
    end_index: Optional[np.ndarray] = None
    split: str = "train"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.X.ndim != 3 or self.X.shape[0] != self.labels.shape[0]:
            raise ValidationError("need one label per (D x H) sample")
        if self.end_index is None:
            self.end_index = np.arange(len(self.labels), dtype=np.int64)
        self.end_index = np.asarray(self.end_index, dtype=np.int64)
        if self.setting == 2:
            if self.horizons is None:
                raise ValidationError("setting 2 datasets need horizon targets")
            self.horizons = np.asarray(self.horizons, dtype=np.int64)

    def __len__(self):
        return self.labels.shape[0]

    @property
    def D(self) -> int:
        return self.X.shape[1]

    @property
    def H(self) -> int:
        return self.X.shape[2]

    @property
    def n_classes(self) -> int:
        return 3 if self.setting == 1 else 2

    def class_counts(self) -> dict:
        names = [m.name.lower() for m in (Movement if self.setting == 1 else Direction)]
        counts = np.bincount(self.labels, minlength=len(names))
        return {name: int(c) for name, c in zip(names, counts)}

    def subset(self, idx, split=None) -> "LabeledDataset":
        return LabeledDataset(
            self.X[idx],
            self.labels[idx],
            self.setting,
            None if self.horizons is None else self.horizons[idx],
            self.end_index[idx],
            split or self.split,
            dict(self.meta),
        )


def split_boundary(T: int, days=None, train_days: int = 7, train_fraction: float = 0.7) -> int:
    """First event index belonging to the test period."""
    if days is not None:
        uniq = np.unique(days)
        if len(uniq) <= train_days:
            raise ValidationError(f"need more than {train_days} days for a day-based split, got {len(uniq)}")
        return int(np.searchsorted(days, uniq[train_days], side="left"))
    return int(np.floor(train_fraction * T))


def build_dataset(
    stream: SampleStream,
    cfg: LabelConfig,
    window: int,
    setting: int = 1,
    train_days: int = 7,
    train_fraction: float = 0.7,
    ask_col: int = 0,
    bid_col: int = 2,
):
    """Window a stream (stride 1), label each window at its last event and split it.

    Returns ``(train, test)``. Train windows end before the split boundary,
    test windows start at or after it; windows straddling it are dropped.
    The boundary comes from the day markers when present (first
    ``train_days`` days train) or from ``train_fraction`` of the events.
    """
    if setting not in (1, 2):
        raise ValueError("setting must be 1 or 2")
    X = sliding_windows(stream, window, 1)
    mids = stream.mids if stream.mids is not None else mid_prices(stream.values, ask_col, bid_col)
    T = stream.T
    end = np.arange(window - 1, T)
    keep = []
    labels = []
    horizons = []
    if setting == 1:
        if cfg.rule == "forward":
            rets = _forward_returns(mids, cfg.horizon)
        for i, t in enumerate(end):
            if cfg.rule == "forward":
                if t >= len(rets):
                    break
                lab = _classify(rets[t], cfg.threshold)
            else:
                lab = label_movement(mids, int(t), cfg)
                if lab is None:
                    continue
            keep.append(i)
            labels.append(int(lab))
    else:
        for i, t in enumerate(end):
            res = label_next_move(mids, int(t), cfg)
            if res is None:
                continue
            keep.append(i)
            labels.append(int(res[0]))
            horizons.append(res[1])
    if not keep:
        raise ValidationError(
            f"no labeled samples: stream of {T} events is too short for window {window} and horizon {cfg.horizon}"
        )
    keep = np.asarray(keep)
    full = LabeledDataset(X[keep], labels, setting, horizons if setting == 2 else None, end[keep])
    b = split_boundary(T, stream.days, train_days, train_fraction)
    start = full.end_index - (window - 1)
    train = full.subset(np.flatnonzero(full.end_index < b), "train")
    test = full.subset(np.flatnonzero(start >= b), "test")
    for ds in (train, test):
        ds.meta["split_boundary"] = b
    return train, test


# ---------------------------------------------------------------------------
# Delimited table loading
# ---------------------------------------------------------------------------


class TableIOError(OSError):
    pass


class TableParseError(ValueError):
    def __init__(self, msg, row=None, col=None):
        super().__init__(msg)
        self.row = row
        self.col = col


class TableShapeError(ValueError):
    pass


@dataclass(frozen=True)
class TableLayout:
    """How to read a delimited numeric file.

    ``orientation="rows"``: one event per line. ``"columns"``: one event per
    column (the FI-2010 publication layout), so row indices below refer to
    file lines. ``feature_columns`` selects the features kept in the stream
    (default: all); ``ask_column``/``bid_column`` locate level-1 prices for
    mid-prices; ``day_column`` optionally holds a day id per event.
    """

    delimiter: str = ","
    orientation: Literal["rows", "columns"] = "rows"
    feature_columns: Optional[Sequence[int]] = None
    ask_column: int = 0
    bid_column: int = 2
    day_column: Optional[int] = None
    timestamp_column: Optional[int] = None
    tick_factor: Optional[int] = None
    skip_rows: int = 0


def _split_line(line: str, delimiter: str):
    if delimiter in (" ", "whitespace"):
        return line.split()
    return [c.strip() for c in line.split(delimiter)]


def read_matrix(path, delimiter=",", skip_rows=0) -> np.ndarray:
    try:
        with open(path, "r") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise TableIOError(f"cannot read {path}: {exc}") from exc
    rows = []
    for r, line in enumerate(lines[skip_rows:], start=skip_rows + 1):
        if not line.strip():
            continue
        cells = _split_line(line, delimiter)
        row = []
        for c, cell in enumerate(cells, start=1):
            try:
                v = float(cell)
            except ValueError:
                raise TableParseError(f"{path}: non-numeric cell {cell!r} at row {r}, column {c}", r, c) from None
            if not np.isfinite(v):
                raise TableParseError(f"{path}: non-finite cell {cell!r} at row {r}, column {c}", r, c)
            row.append(v)
        if rows and len(row) != len(rows[0]):
            raise TableShapeError(f"{path}: row {r} has {len(row)} cells, expected {len(rows[0])}")
        rows.append(row)
    if not rows:
        raise TableShapeError(f"{path}: no data rows")
    return np.asarray(rows, dtype=np.float64)


def load_table(path, layout: TableLayout = TableLayout(), day: Optional[int] = None) -> SampleStream:
    """Load a delimited file as an event-major :class:`SampleStream`.

    ``day`` tags every event with a fixed day id (one file per day).
    """
    m = read_matrix(path, layout.delimiter, layout.skip_rows)
    if layout.orientation == "columns":
        m = m.T
    elif layout.orientation != "rows":
        raise ValueError(f"unknown orientation {layout.orientation!r}")
    width = m.shape[1]
    cols = list(range(width)) if layout.feature_columns is None else list(layout.feature_columns)
    for c in cols + [layout.ask_column, layout.bid_column]:
        if not 0 <= c < width:
            raise TableShapeError(f"{path}: column {c} out of range for {width} columns")
    days = None
    if layout.day_column is not None:
        days = m[:, layout.day_column].astype(np.int64)
    elif day is not None:
        days = np.full(m.shape[0], day, dtype=np.int64)
    ts = None if layout.timestamp_column is None else m[:, layout.timestamp_column]
    mids = mid_prices(m, layout.ask_column, layout.bid_column, layout.tick_factor)
    return SampleStream(m[:, cols], timestamps=ts, days=days, mids=mids)


def concat_streams(streams: Sequence[SampleStream]) -> SampleStream:
    def cat(name):
        cols = [getattr(s, name) for s in streams]
        return None if any(c is None for c in cols) else np.concatenate(cols)

    return SampleStream(
        np.concatenate([s.values for s in streams]), cat("timestamps"), cat("days"), cat("mids")
    )


# ---------------------------------------------------------------------------
# Synthetic regime-shift data
# ---------------------------------------------------------------------------

REGIME_GAP = 50.0
OFFSET_WIDTH = 10.0


def pattern_templates(H: int, n_classes: int = 3) -> np.ndarray:
    """Rising, falling and flat temporal templates in ``[-1, 1]``."""
    ramp = np.linspace(-1.0, 1.0, H)
    return np.stack([ramp, -ramp, np.zeros(H)])[:n_classes]


def synth_regime_data(seed: int, n_regimes: int, samples_per_regime: int, D: int, H: int, noise: float = 0.5):
    """Class-dependent temporal patterns under regime-wise affine shifts.

    Each window is ``offset_r + scale_r * (loading * template_c + noise * e)``
    with per-feature offsets/scales redrawn for every regime. Offsets of
    regime ``r`` lie in ``[r * REGIME_GAP, r * REGIME_GAP + OFFSET_WIDTH]`` and
    the noise is clipped at 3 standard deviations, so raw value ranges of
    different regimes never overlap while per-window shapes are preserved.

    Returns ``(stream, labels)``: the stream concatenates the windows
    (``H`` events each) with the regime index as day marker; ``labels[i]`` is
    the pattern class of window ``i`` (events ``[i*H, (i+1)*H)``).
    """
    if min(n_regimes, samples_per_regime, D, H) < 1:
        raise ValueError("all counts must be >= 1")
    rng = np.random.default_rng(seed)
    templates = pattern_templates(H)
    loading = rng.uniform(0.5, 1.5, size=D)
    n = n_regimes * samples_per_regime
    labels = rng.integers(0, len(templates), size=n)
    windows = np.empty((n, D, H))
    for r in range(n_regimes):
        offset = rng.uniform(r * REGIME_GAP, r * REGIME_GAP + OFFSET_WIDTH, size=D)
        scale = rng.uniform(0.5, 2.0, size=D)
        sl = slice(r * samples_per_regime, (r + 1) * samples_per_regime)
        eps = np.clip(rng.standard_normal((samples_per_regime, D, H)), -3.0, 3.0)
        shape = loading[None, :, None] * templates[labels[sl]][:, None, :] + noise * eps
        windows[sl] = offset[None, :, None] + scale[None, :, None] * shape
    values = windows.transpose(0, 2, 1).reshape(n * H, D)
    days = np.repeat(np.arange(n_regimes), samples_per_regime * H)
    return SampleStream(values, days=days), labels


def synth_dataset(seed, n_regimes, samples_per_regime, D, H, noise=0.5, n_train=None):
    """Synthetic windows as (train, test) datasets, split chronologically at ``n_train``."""
    stream, labels = synth_regime_data(seed, n_regimes, samples_per_regime, D, H, noise)
    X = sliding_windows(stream, H, H)
    n = len(labels)
    n_train = int(round(n * 2 / 3)) if n_train is None else int(n_train)
    if not 0 < n_train < n:
        raise ValueError(f"n_train must be in (0, {n})")
    full = LabeledDataset(X, labels, 1, end_index=np.arange(n) * H + H - 1)
    return full.subset(np.arange(n_train), "train"), full.subset(np.arange(n_train, n), "test")
