"""
Periodic performance monitoring with drift detection and incremental adaptation.

The monitor replays a time-ordered stream, issues block forecasts with the
current weights, and every check period compares the windowed MAE of the
last window_size seconds against a dynamic threshold set a relative margin
above the baseline MAE. A flagged check fine-tunes the model on that window
and resets the baseline. A Kolmogorov-Smirnov detector on the target
distribution runs alongside as an advisory signal.
"""
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.stats import ks_2samp

from app_config import MonitorConfig
from errors import EmptySample, EmptyWindow, InsufficientWindow, SegmentOutOfBounds
from neural_core import Forecaster
from telemetry_ingest import SessionDataset

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CheckRecord:
    check_time_s: float
    windowed_mae: float
    threshold: float
    baseline_mae: float
    drift_flag: bool
    samples: int
    adapted: bool = False
    new_baseline_mae: Optional[float] = None
    ks_statistic: Optional[float] = None
    ks_flag: bool = False


@dataclass(frozen=True)
class DriftMonitorState:
    baseline_mae: float
    rel_margin: float = 0.2
    check_period_s: float = 600.0
    window_size_s: float = 600.0
    fine_tune_epochs: int = 30
    fine_tune_lr_scale: float = 1.0
    history: Tuple[CheckRecord, ...] = ()

    @property
    def threshold(self) -> float:
        return (1.0 + self.rel_margin) * self.baseline_mae

    @classmethod
    def from_config(cls, baseline_mae: float, config: MonitorConfig) -> "DriftMonitorState":
        return cls(baseline_mae=baseline_mae, rel_margin=config.rel_margin, check_period_s=config.check_period_s,
                   window_size_s=config.window_size_s, fine_tune_epochs=config.fine_tune_epochs,
                   fine_tune_lr_scale=config.fine_tune_lr_scale)


def windowed_mae(predictions: Sequence[float], actuals: Sequence[float]) -> float:
    predictions = np.asarray(predictions, dtype=float)
    actuals = np.asarray(actuals, dtype=float)
    if predictions.size == 0:
        raise EmptyWindow("windowed MAE over an empty window")
    return float(np.abs(predictions - actuals).mean())


def check(state: DriftMonitorState, predictions: Sequence[float], actuals: Sequence[float],
          check_time_s: float) -> Tuple[bool, DriftMonitorState]:
    """Compare the window's MAE with the threshold; the check is recorded either way."""
    periods = check_time_s / state.check_period_s
    if abs(periods - round(periods)) > 1e-9:
        raise ValueError(f"check at {check_time_s}s is not on a {state.check_period_s}s boundary")
    mae = windowed_mae(predictions, actuals)
    drift = mae > state.threshold
    record = CheckRecord(check_time_s=float(check_time_s), windowed_mae=mae, threshold=state.threshold,
                         baseline_mae=state.baseline_mae, drift_flag=drift, samples=len(predictions))
    log = logger.warning if drift else logger.info
    log("Drift detected" if drift else "Check passed",
        extra={"check_time_s": check_time_s, "windowed_mae": mae, "threshold": state.threshold})
    return drift, replace(state, history=state.history + (record,))


def ks_statistic(sample_a: Sequence[float], sample_b: Sequence[float]) -> float:
    """Two-sample Kolmogorov-Smirnov D, the sup distance between empirical CDFs."""
    a = np.asarray(sample_a, dtype=float)
    b = np.asarray(sample_b, dtype=float)
    a, b = a[~np.isnan(a)], b[~np.isnan(b)]
    if a.size == 0 or b.size == 0:
        raise EmptySample("KS statistic needs two non-empty samples")
    return float(ks_2samp(a, b).statistic)


def inject_drift(ds: SessionDataset, start_s: float, length_s: Optional[float] = None, kind: str = "scale",
                 value: float = 0.5) -> Tuple[SessionDataset, Dict[str, Any]]:
    """
    Transform dl_bitrate on [start_s, start_s + length_s) seconds after the first record.

    ``kind`` is "scale" (multiply by value) or "offset" (add value, floored at 0).
    Every other record and column is left untouched.

    Returns:
        (drifted dataset, injection manifest)
    """
    if not ds.records:
        raise SegmentOutOfBounds("cannot inject drift into an empty dataset")
    span = ds.time_span_seconds
    end_s = span if length_s is None else start_s + length_s
    if start_s < 0 or start_s > span or (length_s is not None and (length_s <= 0 or end_s > span + 1.0)):
        raise SegmentOutOfBounds(f"segment [{start_s}, {end_s}) outside the dataset span of {span}s")
    if kind not in ("scale", "offset"):
        raise ValueError(f"unknown drift kind {kind}")
    t0 = ds.records[0].timestamp
    touched = 0
    records = []
    for record in ds.records:
        offset = record.timestamp - t0
        inside = start_s <= offset < end_s if length_s is not None else offset >= start_s
        if inside:
            new = record.dl_bitrate * value if kind == "scale" else max(record.dl_bitrate + value, 0.0)
            records.append(replace(record, dl_bitrate=new))
            touched += 1
        else:
            records.append(record)
    manifest = {"column": "dl_bitrate", "kind": kind, "value": value, "start_s": start_s,
                "length_s": length_s, "end_s": end_s, "rows_changed": touched, "dataset_start": t0}
    logger.info(f"Injected {kind} drift ({value}) into {touched} rows from {start_s}s")
    return replace(ds, records=tuple(records)), manifest


@dataclass
class MonitorStream:
    """Normalized model inputs in time order; times are seconds from the stream start."""
    values: np.ndarray
    times_s: np.ndarray
    target_index: int
    segment: Optional[np.ndarray] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.times_s = np.asarray(self.times_s, dtype=float)
        if self.segment is None:
            self.segment = np.zeros(len(self.values), dtype=int)
        starts = np.r_[0, np.flatnonzero(np.diff(self.segment)) + 1]
        sizes = np.diff(np.r_[starts, len(self.values)])
        self.segment_begin = np.repeat(starts, sizes)
        self.segment_stop = np.repeat(starts + sizes, sizes)

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, columns: Sequence[str], target: str, timestamps: Sequence[float],
                   segment: Optional[Sequence[int]] = None) -> "MonitorStream":
        t = np.asarray(timestamps, dtype=float)
        return cls(frame[list(columns)].to_numpy(dtype=float), t - t[0], list(columns).index(target),
                   None if segment is None else np.asarray(segment))

    def __len__(self) -> int:
        return len(self.values)

    @property
    def target(self) -> np.ndarray:
        return self.values[:, self.target_index]

    def segment_end(self, i: int) -> int:
        return int(self.segment_stop[i])


def block_predictions(forecaster: Forecaster, stream: MonitorStream, begin: int,
                      end: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Forecast the targets at indices [begin, end) in consecutive horizon blocks.

    A block is issued at index i from inputs [i - look_back, i) of the same
    segment and truncated at ``end`` and at the segment end; the next block
    is issued where the previous one stopped.

    Returns:
        (target indices, predictions, actuals)
    """
    L, H = forecaster.look_back, forecaster.horizon
    issues, stops = [], []
    i = begin
    while i < end:
        if i - L < stream.segment_begin[i]:
            i = stream.segment_begin[i] + L
            continue
        stop = min(i + H, end, stream.segment_end(i))
        issues.append(i)
        stops.append(stop)
        i = stop
    if not issues:
        return np.empty(0, dtype=int), np.empty(0), np.empty(0)
    x = np.stack([stream.values[i - L:i] for i in issues])
    forecasts = forecaster.predict(x)
    index, preds = [], []
    for row, (i, stop) in enumerate(zip(issues, stops)):
        index.append(np.arange(i, stop))
        preds.append(forecasts[row, :stop - i])
    index = np.concatenate(index)
    return index, np.concatenate(preds), stream.target[index]


def measure_baseline(forecaster: Forecaster, stream: MonitorStream) -> float:
    """Block-forecast MAE over a whole stream, usually held-out validation data."""
    _, preds, actuals = block_predictions(forecaster, stream, 0, len(stream))
    return windowed_mae(preds, actuals)


def training_windows(stream: MonitorStream, begin: int, end: int, look_back: int,
                     horizon: int) -> Tuple[np.ndarray, np.ndarray]:
    """Stride-1 supervised windows whose targets fall in [begin, end); inputs may precede begin."""
    xs, ys = [], []
    for i in range(begin, end - horizon + 1):
        if i - look_back < stream.segment_begin[i] or stream.segment_end(i) < i + horizon:
            continue
        xs.append(stream.values[i - look_back:i])
        ys.append(stream.target[i:i + horizon])
    if not xs:
        raise InsufficientWindow(f"no training window fits in rows [{begin}, {end})")
    return np.stack(xs), np.stack(ys)


def adapt(forecaster: Forecaster, stream: MonitorStream, begin: int, end: int, state: DriftMonitorState,
          seed: int = 0) -> DriftMonitorState:
    """
    Fine-tune the existing weights on the recent window, then re-baseline.

    The post-update block-forecast MAE on the same window becomes the new
    baseline and the threshold follows it.
    """
    x, y = training_windows(stream, begin, end, forecaster.look_back, forecaster.horizon)
    forecaster.fine_tune(x, y, state.fine_tune_epochs, state.fine_tune_lr_scale, seed)
    _, preds, actuals = block_predictions(forecaster, stream, begin, end)
    new_state = replace(state, baseline_mae=windowed_mae(preds, actuals))
    logger.info(f"Adapted on {len(x)} windows: baseline {state.baseline_mae:.6f} -> {new_state.baseline_mae:.6f}, "
                f"threshold {new_state.threshold:.6f}")
    return new_state


@dataclass
class MonitorReport:
    history: List[CheckRecord] = field(default_factory=list)
    initial_baseline_mae: float = 0.0

    @property
    def detection_times(self) -> List[float]:
        return [r.check_time_s for r in self.history if r.drift_flag]

    def to_frame(self) -> pd.DataFrame:
        columns = ["check_time_s", "windowed_mae", "threshold", "drift_flag", "adapted", "baseline_mae",
                   "new_baseline_mae", "ks_statistic", "ks_flag", "samples"]
        return pd.DataFrame([asdict(r) for r in self.history], columns=columns)

    def summary(self) -> Dict[str, Any]:
        baselines = [self.initial_baseline_mae] + [r.new_baseline_mae for r in self.history if r.adapted]
        return {"checks": len(self.history), "flags": sum(r.drift_flag for r in self.history),
                "detection_times": self.detection_times, "baselines": baselines,
                "ks_flags": [r.check_time_s for r in self.history if r.ks_flag]}

    def write(self, csv_path: str, json_path: str, config_hash: str = "") -> None:
        frame, summary = self.to_frame(), self.summary()
        if config_hash:
            frame["config_hash"] = config_hash
            summary["config_hash"] = config_hash
        frame.to_csv(csv_path, index=False, lineterminator="\n")
        with open(json_path, "w", encoding="utf-8") as file:
            json.dump(summary, file, indent=2, sort_keys=True)


def run_monitor(forecaster: Forecaster, stream: MonitorStream, state: DriftMonitorState,
                reference: Optional[Sequence[float]] = None, ks_threshold: float = 0.3,
                ks_triggers_adaptation: bool = False, seed: int = 0) -> Tuple[MonitorReport, DriftMonitorState]:
    """
    Replay a stream with checks at every multiple of the check period.

    Forecasts for each period are issued with the weights current at the
    period start, so an adaptation at time t only affects targets after t.
    ``reference`` is the target sample the advisory KS detector compares
    each window against.
    """
    if len(stream) == 0:
        raise EmptyWindow("monitor stream is empty")
    times = stream.times_s
    step = float(np.median(np.diff(times))) if len(times) > 1 else 1.0
    report = MonitorReport(initial_baseline_mae=state.baseline_mae)
    pair_index = np.empty(0, dtype=int)
    pair_pred = np.empty(0)
    done = 0
    k = 1
    while k * state.check_period_s <= times[-1] + step:
        t = k * state.check_period_s
        end = int(np.searchsorted(times, t, side="left"))
        index, preds, _ = block_predictions(forecaster, stream, done, end)
        pair_index = np.concatenate([pair_index, index])
        pair_pred = np.concatenate([pair_pred, preds])
        done = end
        begin = int(np.searchsorted(times, t - state.window_size_s, side="left"))
        in_window = pair_index >= begin
        if not in_window.any():
            logger.warning(f"No forecasts in the window ending at {t}s; check skipped")
            k += 1
            continue
        actuals = stream.target[pair_index[in_window]]
        drift, state = check(state, pair_pred[in_window], actuals, t)
        record = state.history[-1]
        if reference is not None and len(reference):
            d = ks_statistic(reference, actuals)
            record = replace(record, ks_statistic=d, ks_flag=d > ks_threshold)
        if drift or (ks_triggers_adaptation and record.ks_flag):
            state = adapt(forecaster, stream, begin, end, state, seed + k)
            record = replace(record, adapted=True, new_baseline_mae=state.baseline_mae)
        state = replace(state, history=state.history[:-1] + (record,))
        report.history.append(record)
        # older pairs can never re-enter a window
        keep = pair_index >= begin
        pair_index, pair_pred = pair_index[keep], pair_pred[keep]
        k += 1
    logger.info(f"Monitor finished: {len(report.history)} checks, {len(report.detection_times)} flags")
    return report, state
