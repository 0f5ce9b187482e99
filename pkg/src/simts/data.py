"""Dataset ingestion, chronological splitting, normalization, windowing,
and synthetic series generation.

CSV format: UTF-8, comma separated, one header row, optional datetime
column (ISO-8601 or "YYYY-MM-DD HH:MM:SS"), every other column real-valued.
"""

import csv
import math
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from simts.errors import DataError


@dataclass
class TimeSeries:
    """A C x T matrix of feature rows over time, plus feature names."""

    values: np.ndarray
    feature_names: list
    timestamps: Optional[list] = None

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DataError(f"TimeSeries values must be 2-D, got {self.values.shape}")
        if self.values.shape[0] != len(self.feature_names):
            raise DataError(
                f"{len(self.feature_names)} feature names for "
                f"{self.values.shape[0]} rows"
            )

    @property
    def n_features(self):
        return self.values.shape[0]

    @property
    def length(self):
        return self.values.shape[1]


@dataclass
class SplitSpec:
    train_ratio: float = 0.6
    val_ratio: float = 0.2
    test_ratio: float = 0.2

    def __post_init__(self):
        ratios = (self.train_ratio, self.val_ratio, self.test_ratio)
        if any(r <= 0 for r in ratios):
            raise DataError(f"split ratios must be positive, got {ratios}")
        if abs(sum(ratios) - 1.0) > 1e-9:
            raise DataError(f"split ratios must sum to 1, got {sum(ratios)}")


@dataclass
class WindowSample:
    """One training sample: an aligned (history, future) pair of segments."""

    history: np.ndarray
    future: np.ndarray
    origin_index: int


@dataclass
class NormStats:
    """Per-feature mean/std fitted on the training split only."""

    mean: np.ndarray
    std: np.ndarray


def load_csv(path, datetime_column="auto", target_column=None):
    """Read a CSV into a TimeSeries (features in header order).

    `datetime_column`: "auto" treats the first column as timestamps when its
    first data cell does not parse as a number; a column name selects that
    column explicitly; None means every column is numeric.
    `target_column`: keep only this feature (univariate mode).
    """
    if not os.path.exists(path):
        raise DataError(f"dataset file not found: {path}")
    with open(path, newline="", encoding="utf-8-sig") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = list(reader)
    if not rows:
        raise DataError(f"{path}: no data rows")

    header = [h.strip() for h in header]
    dt_index = None
    if datetime_column == "auto":
        try:
            float(rows[0][0])
        except (ValueError, IndexError):
            dt_index = 0
    elif datetime_column is not None:
        if datetime_column not in header:
            raise DataError(f"{path}: datetime column {datetime_column!r} not in header")
        dt_index = header.index(datetime_column)

    feature_idx = [i for i in range(len(header)) if i != dt_index]
    feature_names = [header[i] for i in feature_idx]
    if target_column is not None:
        if target_column not in feature_names:
            raise DataError(f"{path}: target column {target_column!r} not in header")
        feature_idx = [header.index(target_column)]
        feature_names = [target_column]

    n = len(rows)
    values = np.empty((len(feature_idx), n), dtype=np.float64)
    timestamps = [] if dt_index is not None else None
    for j, row in enumerate(rows):
        if len(row) != len(header):
            raise DataError(f"{path}: row {j + 1} has {len(row)} cells, expected {len(header)}")
        if dt_index is not None:
            timestamps.append(row[dt_index])
        for out_i, i in enumerate(feature_idx):
            cell = row[i]
            try:
                v = float(cell)
            except ValueError:
                raise DataError(
                    f"{path}: row {j + 1}, column {header[i]!r}: "
                    f"cannot parse {cell!r} as a number"
                ) from None
            if not math.isfinite(v):
                raise DataError(
                    f"{path}: row {j + 1}, column {header[i]!r}: non-finite value {cell!r}"
                )
            values[out_i, j] = v
    return TimeSeries(values, feature_names, timestamps)


def write_csv(ts: TimeSeries, path):
    """Inverse of load_csv; float cells use shortest round-trip formatting."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if ts.timestamps is not None:
            writer.writerow(["date"] + list(ts.feature_names))
            for j in range(ts.length):
                writer.writerow([ts.timestamps[j]] + [repr(v) for v in ts.values[:, j]])
        else:
            writer.writerow(list(ts.feature_names))
            for j in range(ts.length):
                writer.writerow([repr(v) for v in ts.values[:, j]])


def split(ts: TimeSeries, spec: SplitSpec = None):
    """Contiguous chronological train/val/test partition (floor arithmetic,
    remainder to test)."""
    spec = spec or SplitSpec()
    total = ts.length
    if total < 10:
        raise DataError(f"series too short to split: length {total} < 10")
    # epsilon guards ratios like 0.6 whose float product lands just below an integer
    n_train = int(total * spec.train_ratio + 1e-7)
    n_val = int(total * spec.val_ratio + 1e-7)
    n_test = total - n_train - n_val

    def piece(a, b):
        stamps = ts.timestamps[a:b] if ts.timestamps is not None else None
        return TimeSeries(ts.values[:, a:b].copy(), list(ts.feature_names), stamps)

    return (
        piece(0, n_train),
        piece(n_train, n_train + n_val),
        piece(n_train + n_val, total),
    )


def fit_norm(train: TimeSeries) -> NormStats:
    mean = train.values.mean(axis=1)
    std = train.values.std(axis=1)
    std = np.where(std > 0, std, 1.0)  # constant features pass through centered
    return NormStats(mean, std)


def apply_norm(ts: TimeSeries, stats: NormStats) -> TimeSeries:
    vals = (ts.values - stats.mean[:, None]) / stats.std[:, None]
    return TimeSeries(vals, list(ts.feature_names), ts.timestamps)


def invert_norm(ts: TimeSeries, stats: NormStats) -> TimeSeries:
    vals = ts.values * stats.std[:, None] + stats.mean[:, None]
    return TimeSeries(vals, list(ts.feature_names), ts.timestamps)


def make_windows(ts: TimeSeries, window_len=402, history_len=201, stride=1):
    """Slide a length-`window_len` window and split it at `history_len`.

    Origins are 0, stride, 2*stride, ... while origin + window_len stays
    inside the series, so the count is floor((T - window_len)/stride) + 1.
    """
    if not 0 < history_len < window_len:
        raise DataError(f"need 0 < history_len < window_len, got {history_len}, {window_len}")
    if stride < 1:
        raise DataError(f"stride must be >= 1, got {stride}")
    if ts.length < window_len:
        raise DataError(
            f"series length {ts.length} shorter than window length {window_len}"
        )
    samples = []
    for origin in range(0, ts.length - window_len + 1, stride):
        block = ts.values[:, origin : origin + window_len]
        samples.append(
            WindowSample(
                history=np.ascontiguousarray(block[:, :history_len]),
                future=np.ascontiguousarray(block[:, history_len:]),
                origin_index=origin,
            )
        )
    return samples


@dataclass
class SynthConfig:
    n_features: int = 2
    length: int = 1024
    periods: Sequence[int] = field(default_factory=lambda: (16, 24))
    noise_std: float = 0.0
    seed: int = 0


def synth_series(config: SynthConfig) -> TimeSeries:
    """Deterministic sum-of-sinusoids series with optional Gaussian noise.

    Each feature f is periodic with integer period `periods[f]` (two
    harmonics, amplitudes/phases drawn from the seed); phases are computed
    from t mod period, so the noise-free signal repeats bitwise.
    """
    if len(config.periods) != config.n_features:
        raise DataError(
            f"{config.n_features} features but {len(config.periods)} periods"
        )
    if config.length < 2 * max(config.periods):
        raise DataError("length must be at least twice the largest period")
    rng = np.random.default_rng(config.seed)
    t = np.arange(config.length)
    values = np.empty((config.n_features, config.length))
    for f, period in enumerate(config.periods):
        a1 = rng.uniform(0.8, 1.2)
        a2 = rng.uniform(0.2, 0.5)
        ph1, ph2 = rng.uniform(0, 2 * np.pi, size=2)
        frac = (t % period) / period
        values[f] = a1 * np.sin(2 * np.pi * frac + ph1) + a2 * np.sin(
            4 * np.pi * frac + ph2
        )
    if config.noise_std > 0:
        values += rng.normal(0.0, config.noise_std, size=values.shape)
    names = [f"f{i}" for i in range(config.n_features)]
    return TimeSeries(values, names)
