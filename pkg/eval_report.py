"""Supervised windows, MAE/MAPE, the three-model comparison and the look-back/horizon sweeps."""
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from app_config import PipelineConfig, TrainConfig
from automl_search import SearchTrace, run_pipeline_search
from errors import AllExcluded, SeriesTooShort, ShapeMismatch
from neural_core import ModelSpec, NeuralForecaster, TrainHyperparams, TrainingData, train
from preprocess import NormalizerParams

logger = logging.getLogger(__name__)

SPLIT_TAGS = ("train", "val", "test")
BASELINE_UNITS = 128
MODEL_TAGS = ("lstm", "seq2seq", "automl")
REPORT_COLUMNS = ["dataset", "model", "look_back", "horizon", "look_back_s", "horizon_s", "seed",
                  "mae_norm", "mae_kbps", "mape_pct", "excluded"]


@dataclass
class EvalSeries:
    """Normalized model inputs on a uniform grid, split into contiguous segments."""
    values: np.ndarray
    columns: List[str]
    target: str
    period_s: float = 1.0
    segment: Optional[np.ndarray] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.segment is None:
            self.segment = np.zeros(len(self.values), dtype=int)

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, columns: Sequence[str], target: str, period_s: float = 1.0,
                   segment_column: str = "segment") -> "EvalSeries":
        segment = frame[segment_column].to_numpy() if segment_column in frame.columns else None
        return cls(frame[list(columns)].to_numpy(dtype=float), list(columns), target, period_s, segment)

    @property
    def target_index(self) -> int:
        return self.columns.index(self.target)

    def __len__(self) -> int:
        return len(self.values)

    def at_period(self, period_s: float) -> "EvalSeries":
        """Every k-th row of each segment, k = period_s / current period."""
        step = steps_from_seconds(period_s, self.period_s)
        if step == 1:
            return self
        keep = np.concatenate([np.arange(b, e, step) for b, e in _segment_bounds(self.segment)] or [np.empty(0, int)])
        return EvalSeries(self.values[keep], self.columns, self.target, self.period_s * step, self.segment[keep])


def steps_from_seconds(seconds: float, period_s: float) -> int:
    return max(1, int(round(seconds / period_s)))


def _segment_bounds(segment: np.ndarray) -> List[Tuple[int, int]]:
    if len(segment) == 0:
        return []
    starts = np.r_[0, np.flatnonzero(np.diff(segment)) + 1]
    ends = np.r_[starts[1:], len(segment)]
    return list(zip(starts.tolist(), ends.tolist()))


@dataclass
class WindowedSet:
    """
    Stride-1 look-back/horizon windows with chronological split tags.

    Train windows whose span reaches the first test window are tagged
    "purged" and never served.
    """
    inputs: np.ndarray
    targets: np.ndarray
    starts: np.ndarray
    tags: np.ndarray
    look_back: int
    horizon: int
    target_index: int
    period_s: float = 1.0
    access_log: List[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.inputs)

    def split(self, tag: str) -> Tuple[np.ndarray, np.ndarray]:
        if tag not in SPLIT_TAGS:
            raise ValueError(f"unknown split {tag}")
        self.access_log.append(tag)
        rows = self.tags == tag
        return self.inputs[rows], self.targets[rows]

    def count(self, tag: str) -> int:
        return int((self.tags == tag).sum())


def make_windows(series: np.ndarray, look_back: int, horizon: int, splits: Sequence[float] = (0.7, 0.15, 0.15),
                 segment: Optional[np.ndarray] = None, target_index: int = 0, period_s: float = 1.0) -> WindowedSet:
    """
    Build supervised windows from a (N, F) series; no window crosses a segment boundary.

    Windows are ordered by start index and the first ``splits[0]`` share of
    them is train, the next ``splits[1]`` share val, the rest test.
    """
    values = np.asarray(series, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    if look_back < 1 or horizon < 1:
        raise ShapeMismatch("look_back and horizon must be at least 1")
    if abs(sum(splits) - 1.0) > 1e-9 or any(s < 0 for s in splits):
        raise ValueError(f"split fractions {tuple(splits)} must be non-negative and sum to 1")
    segment = np.zeros(len(values), dtype=int) if segment is None else np.asarray(segment)
    span = look_back + horizon
    starts = np.concatenate([np.arange(b, e - span + 1) for b, e in _segment_bounds(segment) if e - b >= span]
                            or [np.empty(0, dtype=int)]).astype(int)
    if starts.size == 0:
        raise SeriesTooShort(f"{len(values)} rows cannot hold look_back {look_back} + horizon {horizon}")
    n = len(starts)
    n_train = int(np.floor(n * splits[0]))
    n_val = int(np.floor(n * splits[1]))
    tags = np.array(["train"] * n_train + ["val"] * n_val + ["test"] * (n - n_train - n_val), dtype=object)
    if n - n_train - n_val > 0:
        first_test = starts[n_train + n_val]
        overlap = (tags == "train") & (starts + span - 1 >= first_test)
        tags[overlap] = "purged"
    offsets = np.arange(span)
    blocks = values[starts[:, None] + offsets[None, :]]
    inputs = blocks[:, :look_back, :]
    targets = blocks[:, look_back:, target_index][:, :, None]
    return WindowedSet(inputs, targets, starts, tags, look_back, horizon, target_index, period_s)


def windows_for(series: EvalSeries, look_back_s: float, horizon_s: float, splits: Sequence[float]) -> WindowedSet:
    L = steps_from_seconds(look_back_s, series.period_s)
    H = steps_from_seconds(horizon_s, series.period_s)
    return make_windows(series.values, L, H, splits, series.segment, series.target_index, series.period_s)


def mae(pred: Sequence[float], actual: Sequence[float]) -> float:
    pred, actual = np.asarray(pred, dtype=float), np.asarray(actual, dtype=float)
    if pred.shape != actual.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs actual {actual.shape}")
    return float(np.abs(pred - actual).mean())


def mape(pred: Sequence[float], actual: Sequence[float], epsilon: float = 1.0) -> Tuple[float, int]:
    """
    Mean absolute percentage error over points with |actual| >= epsilon.

    Returns:
        (percentage, number of excluded points)
    """
    pred, actual = np.asarray(pred, dtype=float), np.asarray(actual, dtype=float)
    if pred.shape != actual.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs actual {actual.shape}")
    kept = np.abs(actual) >= epsilon
    if not kept.any():
        raise AllExcluded(f"every actual value is below epsilon {epsilon}")
    pct = float(np.mean(np.abs(pred[kept] - actual[kept]) / np.abs(actual[kept])) * 100.0)
    return pct, int((~kept).sum())


def score_forecasts(pred: np.ndarray, actual: np.ndarray, normalizer: NormalizerParams,
                    epsilon_kbps: float) -> Dict[str, float]:
    """MAE on both scales and MAPE in kbps."""
    pred_kbps = normalizer.invert(pred.ravel())
    actual_kbps = normalizer.invert(actual.ravel())
    try:
        pct, excluded = mape(pred_kbps, actual_kbps, epsilon_kbps)
    except AllExcluded:
        logger.warning("Every test actual is below the MAPE epsilon; MAPE reported as NaN")
        pct, excluded = float("nan"), int(actual.size)
    return {"mae_norm": mae(pred, actual), "mae_kbps": mae(pred_kbps, actual_kbps), "mape_pct": pct,
            "excluded": excluded}


def fixed_spec(train_config: TrainConfig, input_dim: int, look_back: int, horizon: int,
               target_index: int) -> ModelSpec:
    return ModelSpec(architecture=train_config.architecture, input_dim=input_dim,
                     encoder_units=train_config.encoder_units,
                     decoder_units=train_config.decoder_units if train_config.architecture == "seq2seq" else [],
                     dense_units=train_config.dense_units, dense_activation=train_config.dense_activation,
                     dropout_rate=train_config.dropout, teacher_forcing=train_config.teacher_forcing,
                     look_back=look_back, horizon=horizon, target_index=target_index)


def baseline_spec(tag: str, input_dim: int, look_back: int, horizon: int, target_index: int) -> ModelSpec:
    if tag == "lstm":
        return ModelSpec(architecture="direct", input_dim=input_dim, encoder_units=[BASELINE_UNITS],
                         look_back=look_back, horizon=horizon, target_index=target_index)
    return ModelSpec(architecture="seq2seq", input_dim=input_dim, encoder_units=[BASELINE_UNITS],
                     decoder_units=[BASELINE_UNITS], look_back=look_back, horizon=horizon, target_index=target_index)


def create_forecaster(kind: str, windows: WindowedSet, config: PipelineConfig,
                      seed: int = 0) -> Tuple[NeuralForecaster, Optional[SearchTrace]]:
    """
    Train a forecaster of the given kind on the train/val windows.

    Kinds: "lstm" (direct-output baseline), "seq2seq" (baseline encoder-decoder),
    "automl" (searched), "fixed" (the architecture in config.train).
    """
    train_x, train_y = windows.split("train")
    val_x, val_y = windows.split("val")
    input_dim = train_x.shape[2]
    if kind == "automl":
        spec, weights, trace = run_pipeline_search(windows, config.search, seed, config.train.dense_activation)
        return NeuralForecaster(spec, weights), trace
    if kind in ("lstm", "seq2seq"):
        spec = baseline_spec(kind, input_dim, windows.look_back, windows.horizon, windows.target_index)
        epochs = config.eval.baseline_epochs
    elif kind == "fixed":
        spec = fixed_spec(config.train, input_dim, windows.look_back, windows.horizon, windows.target_index)
        epochs = config.train.max_epochs
    else:
        raise ValueError(f"Unsupported model kind: {kind}")
    hp = TrainHyperparams(learning_rate=config.train.learning_rate, batch_size=config.train.batch_size,
                          max_epochs=epochs, patience=config.train.patience)
    weights, _ = train(spec, TrainingData(train_x, train_y, val_x, val_y), hp, seed)
    return NeuralForecaster(spec, weights, hp), None


def evaluate_forecaster(forecaster: NeuralForecaster, windows: WindowedSet, normalizer: NormalizerParams,
                        epsilon_kbps: float) -> Dict[str, float]:
    test_x, test_y = windows.split("test")
    if len(test_x) == 0:
        raise SeriesTooShort("no test windows to evaluate on")
    return score_forecasts(forecaster.predict(test_x), test_y[:, :, 0], normalizer, epsilon_kbps)


class MetricsReport:
    """Per-seed metric rows plus seed-mean rows for every setting."""

    def __init__(self, rows: Optional[List[Dict]] = None):
        self.rows: List[Dict] = list(rows or [])

    def add(self, **row) -> None:
        self.rows.append(row)

    def per_seed(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=REPORT_COLUMNS)

    def means(self) -> pd.DataFrame:
        frame = self.per_seed()
        keys = ["dataset", "model", "look_back", "horizon", "look_back_s", "horizon_s"]
        grouped = frame.groupby(keys, sort=False)[["mae_norm", "mae_kbps", "mape_pct", "excluded"]].mean()
        grouped = grouped.reset_index()
        grouped["seed"] = "mean"
        return grouped[REPORT_COLUMNS]

    def to_frame(self) -> pd.DataFrame:
        frame = self.per_seed().astype({"seed": object})
        return pd.concat([frame, self.means()], ignore_index=True)

    def write(self, csv_path: str, json_path: Optional[str] = None, config_hash: str = "") -> None:
        frame = self.to_frame()
        if config_hash:
            frame["config_hash"] = config_hash
        frame.to_csv(csv_path, index=False, lineterminator="\n", float_format="%.10g")
        if json_path:
            with open(json_path, "w", encoding="utf-8") as file:
                json.dump(json.loads(frame.to_json(orient="records")), file, indent=2, sort_keys=True)


def compare_models(series: EvalSeries, config: PipelineConfig, normalizer: NormalizerParams,
                   dataset_tag: str = "", seeds: Optional[Sequence[int]] = None,
                   models: Sequence[str] = MODEL_TAGS) -> Tuple[MetricsReport, pd.DataFrame]:
    """
    Train and test every model tag on identical windows for every seed.

    Returns:
        (metrics report, timing frame with one wall-time row per model and seed)
    """
    series = series.at_period(config.eval.period_s)
    windows = windows_for(series, config.eval.look_back_s, config.eval.horizon_s, config.preprocess.split)
    report, timing = MetricsReport(), []
    for seed in seeds if seeds is not None else config.eval.seeds:
        for kind in models:
            started = time.perf_counter()
            forecaster, _ = create_forecaster(kind, windows, config, seed)
            metrics = evaluate_forecaster(forecaster, windows, normalizer, config.eval.mape_epsilon_kbps)
            elapsed = time.perf_counter() - started
            logger.info(f"{kind} seed {seed}: test MAE {metrics['mae_norm']:.5f} ({elapsed:.1f}s)")
            report.add(dataset=dataset_tag, model=kind, look_back=windows.look_back, horizon=windows.horizon,
                       look_back_s=config.eval.look_back_s, horizon_s=config.eval.horizon_s, seed=seed, **metrics)
            timing.append({"model": kind, "seed": seed, "wall_time_s": elapsed})
    return report, pd.DataFrame(timing)


def _sweep(series: EvalSeries, config: PipelineConfig, normalizer: NormalizerParams, dataset_tag: str,
           settings: List[Tuple[float, float]], seeds: Sequence[int]) -> Tuple[MetricsReport, pd.DataFrame]:
    series = series.at_period(config.sweep.period_s)
    kind = "automl" if config.sweep.model == "searched" else "fixed"
    report, timing = MetricsReport(), []
    for look_back_min, horizon_min in settings:
        windows = windows_for(series, look_back_min * 60.0, horizon_min * 60.0, config.preprocess.split)
        for seed in seeds:
            started = time.perf_counter()
            forecaster, _ = create_forecaster(kind, windows, config, seed)
            metrics = evaluate_forecaster(forecaster, windows, normalizer, config.eval.mape_epsilon_kbps)
            elapsed = time.perf_counter() - started
            report.add(dataset=dataset_tag, model=kind, look_back=windows.look_back, horizon=windows.horizon,
                       look_back_s=look_back_min * 60.0, horizon_s=horizon_min * 60.0, seed=seed, **metrics)
            timing.append({"look_back_s": look_back_min * 60.0, "horizon_s": horizon_min * 60.0, "seed": seed,
                           "wall_time_s": elapsed})
        logger.info(f"Sweep cell look_back={look_back_min}min horizon={horizon_min}min done")
    return report, pd.DataFrame(timing)


def sweep_lookback(series: EvalSeries, config: PipelineConfig, normalizer: NormalizerParams,
                   dataset_tag: str = "", seeds: Optional[Sequence[int]] = None) -> Tuple[MetricsReport, pd.DataFrame]:
    """Vary the look-back (minutes) at the fixed sweep horizon."""
    settings = [(lb, config.sweep.horizon_min) for lb in config.sweep.look_backs_min]
    return _sweep(series, config, normalizer, dataset_tag, settings, seeds if seeds is not None else config.sweep.seeds)


def sweep_horizon(series: EvalSeries, config: PipelineConfig, normalizer: NormalizerParams,
                  dataset_tag: str = "", seeds: Optional[Sequence[int]] = None) -> Tuple[MetricsReport, pd.DataFrame]:
    """Vary the horizon (minutes) at the fixed sweep look-back."""
    settings = [(config.sweep.lookback_fixed_min, h) for h in config.sweep.horizons_min]
    return _sweep(series, config, normalizer, dataset_tag, settings, seeds if seeds is not None else config.sweep.seeds)


def write_dat(report: MetricsReport, x_column: str, path: str, config_hash: str = "") -> None:
    """Gnuplot data block: x in minutes, then mean, min and max normalized MAE over seeds."""
    frame = report.per_seed()
    stats = frame.groupby(x_column, sort=True)["mae_norm"].agg(["mean", "min", "max"]).reset_index()
    lines = [f"# {x_column.replace('_s', '_min')} mean_mae min_mae max_mae"]
    if config_hash:
        lines.append(f"# config_hash={config_hash}")
    for row in stats.itertuples(index=False):
        lines.append(f"{getattr(row, x_column) / 60.0:g} {row.mean:.10g} {row.min:.10g} {row.max:.10g}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
