"""Frozen-encoder forecasting protocol.

The trained encoder is frozen and run over each split; the feature for a
forecast origin t is the latent column at t (the same summary vector the
predictor consumed during training), the target is the next `horizon`
timestamps of every feature, flattened timestamp-major.  A ridge
regression head is fitted on the training split in closed form, the
regularization strength picked on the validation split, and MSE/MAE
reported on the test split.
"""

import csv
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from simts.data import SplitSpec, TimeSeries, apply_norm, fit_norm, split
from simts.errors import DataError, ShapeError
from simts.model import Model, encode_series

# geometric coverage over four decades
DEFAULT_ALPHA_GRID = (0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0,
                      100.0, 200.0, 500.0, 1000.0)

RESULT_COLUMNS = ("dataset", "mode", "variant", "horizon", "mse", "mae",
                  "n_windows", "alpha", "seed")

# horizon grids keyed by sampling cadence of the benchmark files
HORIZONS_HOURLY_DAILY = (24, 48, 168, 336, 720)
HORIZONS_15MIN = (24, 48, 96, 288, 672)


def default_horizons(dataset_name: str) -> Tuple[int, ...]:
    stem = dataset_name.lower()
    if "ettm" in stem:
        return HORIZONS_15MIN
    return HORIZONS_HOURLY_DAILY


def _targets(values: np.ndarray, origins: np.ndarray, horizon: int) -> np.ndarray:
    c = values.shape[0]
    out = np.empty((origins.size, horizon * c))
    for r, t in enumerate(origins):
        out[r] = values[:, t + 1 : t + 1 + horizon].T.ravel()
    return out


def _check_split_length(length, history_len, horizon):
    needed = history_len + horizon
    if length < needed:
        raise DataError(
            f"split of length {length} too short: need at least "
            f"history + horizon = {history_len} + {horizon} = {needed}"
        )


def extract_features(model: Model, split_ts: TimeSeries, horizon: int):
    """(features, targets) rows for every forecast origin in the split.

    Origins run stride-1 over all t with a full history window ending at t
    and a full horizon after it, so n = length - history - horizon + 1.
    """
    k = model.encoder.history_len
    _check_split_length(split_ts.length, k, horizon)
    if split_ts.n_features != model.encoder.in_channels:
        raise ShapeError(
            f"model expects {model.encoder.in_channels} channels, "
            f"split has {split_ts.n_features}"
        )
    latents = encode_series(model, split_ts.values)
    origins = np.arange(k - 1, split_ts.length - horizon)
    features = np.ascontiguousarray(latents[:, origins].T)
    return features, _targets(split_ts.values, origins, horizon)


def extract_window_mean_features(split_ts: TimeSeries, history_len: int, horizon: int):
    """Baseline features: the per-feature mean of the raw history window."""
    _check_split_length(split_ts.length, history_len, horizon)
    origins = np.arange(history_len - 1, split_ts.length - horizon)
    cums = np.concatenate(
        [np.zeros((split_ts.n_features, 1)), np.cumsum(split_ts.values, axis=1)],
        axis=1,
    )
    means = (cums[:, origins + 1] - cums[:, origins + 1 - history_len]) / history_len
    return np.ascontiguousarray(means.T), _targets(split_ts.values, origins, horizon)


@dataclass
class RidgeModel:
    """Closed-form linear head: predict(X) = X @ weights.T + intercept."""

    weights: np.ndarray  # (n_outputs, n_features)
    intercept: np.ndarray  # (n_outputs,)
    alpha: float

    def predict(self, features: np.ndarray) -> np.ndarray:
        return features @ self.weights.T + self.intercept


def fit_ridge(train_x, train_y, val_x, val_y,
              alpha_grid: Sequence[float] = DEFAULT_ALPHA_GRID) -> RidgeModel:
    """Solve the normal equations on centered data for each candidate alpha
    and keep the one with minimal validation MSE (ties go to the larger,
    i.e. more regularized, alpha)."""
    if len(alpha_grid) == 0 or any(a <= 0 for a in alpha_grid):
        raise ValueError("alpha_grid must be non-empty with all entries > 0")
    train_x = np.asarray(train_x, dtype=np.float64)
    train_y = np.asarray(train_y, dtype=np.float64)
    if train_x.ndim != 2 or train_y.ndim != 2 or train_x.shape[0] != train_y.shape[0]:
        raise ShapeError(f"fit_ridge: X {train_x.shape} vs Y {train_y.shape}")

    x_mean = train_x.mean(axis=0)
    y_mean = train_y.mean(axis=0)
    xc = train_x - x_mean
    yc = train_y - y_mean
    gram = xc.T @ xc
    moment = xc.T @ yc
    eye = np.eye(gram.shape[0])

    best = None
    for alpha in alpha_grid:
        system = gram + alpha * eye
        w = np.linalg.solve(system, moment)
        residual = np.linalg.norm(system @ w - moment)
        scale = np.linalg.norm(moment)
        if scale > 0 and residual / scale >= 1e-8:
            raise ArithmeticError(
                f"ridge solve failed at alpha={alpha}: relative residual "
                f"{residual / scale:.3e}"
            )
        candidate = RidgeModel(
            weights=np.ascontiguousarray(w.T),
            intercept=y_mean - x_mean @ w,
            alpha=float(alpha),
        )
        mse = float(np.mean((candidate.predict(val_x) - val_y) ** 2))
        if (
            best is None
            or mse < best[0]
            or (mse == best[0] and candidate.alpha > best[1].alpha)
        ):
            best = (mse, candidate)
    return best[1]


@dataclass
class ForecastMetrics:
    mse: float
    mae: float
    horizon: int
    n_windows: int


def metrics(pred: np.ndarray, truth: np.ndarray, horizon: int = 0) -> ForecastMetrics:
    """Mean squared / absolute error over all entries."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeError(f"metrics: shapes {pred.shape} vs {truth.shape}")
    err = pred - truth
    mse = float(np.mean(err * err))
    mae = float(np.mean(np.abs(err)))
    if mae > np.sqrt(mse) + 1e-12:
        raise ArithmeticError(f"metrics sanity violated: mae {mae} > sqrt(mse {mse})")
    return ForecastMetrics(mse=mse, mae=mae, horizon=horizon, n_windows=pred.shape[0])


@dataclass
class HorizonResult:
    metrics: ForecastMetrics
    alpha: float


def run_protocol(model: Model, series: TimeSeries, horizons: Sequence[int],
                 alpha_grid: Sequence[float] = DEFAULT_ALPHA_GRID,
                 spec: SplitSpec = None) -> List[HorizonResult]:
    """Full multi-horizon evaluation on a raw series.

    Splits 6:2:2, z-scores with training-split statistics, and for each
    horizon fits the validation-selected ridge head and scores the test
    split (metrics are in normalized space).
    """
    train_ts, val_ts, test_ts = split(series, spec)
    stats = fit_norm(train_ts)
    train_ts, val_ts, test_ts = (
        apply_norm(s, stats) for s in (train_ts, val_ts, test_ts)
    )
    results = []
    for horizon in horizons:
        tr_x, tr_y = extract_features(model, train_ts, horizon)
        va_x, va_y = extract_features(model, val_ts, horizon)
        te_x, te_y = extract_features(model, test_ts, horizon)
        head = fit_ridge(tr_x, tr_y, va_x, va_y, alpha_grid)
        m = metrics(head.predict(te_x), te_y, horizon=horizon)
        results.append(HorizonResult(metrics=m, alpha=head.alpha))
    return results


def write_results_csv(path, rows: Sequence[Dict]):
    """Write result rows with the fixed column set; floats keep full
    round-trip precision so identical runs give identical bytes."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULT_COLUMNS)
        for row in rows:
            writer.writerow(
                [
                    row["dataset"], row["mode"], row["variant"], row["horizon"],
                    repr(float(row["mse"])), repr(float(row["mae"])),
                    row["n_windows"], repr(float(row["alpha"])), row["seed"],
                ]
            )
