import json

import numpy as np
import pytest

from app_config import MonitorConfig
from drift_monitor import (
    DriftMonitorState,
    MonitorStream,
    adapt,
    block_predictions,
    check,
    inject_drift,
    ks_statistic,
    measure_baseline,
    run_monitor,
    training_windows,
    windowed_mae,
)
from errors import EmptySample, EmptyWindow, InsufficientWindow, SegmentOutOfBounds
from neural_core import Forecaster, ModelSpec, NeuralForecaster, TrainHyperparams, init_weights


class LevelForecaster(Forecaster):
    """Predicts a constant level; fine-tuning moves the level to the mean target."""

    def __init__(self, level: float, look_back: int = 5, horizon: int = 1):
        self.level = level
        self.look_back = look_back
        self.horizon = horizon
        self.target_index = 0
        self.fine_tunes = 0

    def predict(self, x):
        return np.full((len(x), self.horizon), self.level)

    def fine_tune(self, x, y, epochs, lr_scale, seed=0):
        if epochs <= 0:
            return
        self.level = float(np.mean(y))
        self.fine_tunes += 1


def alternating(n: int, level: float, amplitude: float) -> np.ndarray:
    return level + amplitude * np.where(np.arange(n) % 2 == 0, 1.0, -1.0)


def stream_of(values: np.ndarray) -> MonitorStream:
    return MonitorStream(values[:, None], np.arange(len(values), dtype=float), 0)


def drifted_stream(minutes: int = 40) -> MonitorStream:
    """1 Hz stream at 0.6 +/- 0.01 whose level halves from minute 14 onwards."""
    values = alternating(minutes * 60, 0.6, 0.01)
    values[14 * 60:] *= 0.5
    return stream_of(values)


class TestThreshold:
    @pytest.mark.parametrize("baseline, threshold", [(0.0213, 0.02556), (0.0236, 0.02832)])
    def test_twenty_percent_margin(self, baseline, threshold):
        assert DriftMonitorState(baseline_mae=baseline).threshold == pytest.approx(threshold, abs=1e-12)

    def test_zero_margin(self):
        assert DriftMonitorState(baseline_mae=0.0213, rel_margin=0.0).threshold == 0.0213

    def test_from_config(self):
        state = DriftMonitorState.from_config(0.05, MonitorConfig(rel_margin=0.1, check_period_s=300))
        assert state.threshold == pytest.approx(0.055, abs=1e-12)
        assert state.check_period_s == 300


class TestWindowedMae:
    def test_example(self):
        assert windowed_mae([0.5, 0.2], [0.4, 0.3]) == pytest.approx(0.1, abs=1e-12)

    def test_perfect_and_single(self):
        assert windowed_mae([0.3, 0.4], [0.3, 0.4]) == 0.0
        assert windowed_mae([0.7], [0.2]) == pytest.approx(0.5)

    def test_empty(self):
        with pytest.raises(EmptyWindow):
            windowed_mae([], [])


class TestCheck:
    def test_below_threshold_is_recorded(self):
        state = DriftMonitorState(baseline_mae=0.0213)
        drift, state = check(state, [0.024], [0.0], 600.0)
        assert not drift
        assert len(state.history) == 1
        assert state.history[0].threshold == pytest.approx(0.02556)

    def test_above_threshold(self):
        drift, state = check(DriftMonitorState(baseline_mae=0.0213), [0.03], [0.0], 1200.0)
        assert drift
        assert state.history[-1].drift_flag

    def test_off_boundary(self):
        with pytest.raises(ValueError):
            check(DriftMonitorState(baseline_mae=0.02), [0.0], [0.0], 601.0)


class TestKs:
    def test_identical(self):
        assert ks_statistic([1, 2, 3], [1, 2, 3]) == 0.0

    def test_disjoint(self):
        assert ks_statistic([1, 2, 3], [10, 11]) == 1.0

    def test_hand_example(self):
        assert ks_statistic([1, 2, 3], [1, 2, 4]) == pytest.approx(1 / 3)

    def test_symmetric_and_monotone_invariant(self, rng):
        a, b = rng.normal(size=60), rng.normal(0.5, 1.0, size=40)
        assert ks_statistic(a, b) == pytest.approx(ks_statistic(b, a))
        assert ks_statistic(a, b) == pytest.approx(ks_statistic(np.exp(a), np.exp(b)))

    def test_empty_sample(self):
        with pytest.raises(EmptySample):
            ks_statistic([], [1.0])


class TestInjectDrift:
    def test_unit_scale_is_identity(self, flat_dataset):
        drifted, manifest = inject_drift(flat_dataset, 840.0, 600.0, "scale", 1.0)
        assert drifted.records == flat_dataset.records
        assert manifest["rows_changed"] == 600

    def test_halving_touches_segment_only(self, flat_dataset):
        drifted, manifest = inject_drift(flat_dataset, 840.0, 600.0, "scale", 0.5)
        inside = [r.dl_bitrate for r in drifted.records[840:1440]]
        assert inside == [500.0] * 600
        for before, after in zip(flat_dataset.records[:840] + flat_dataset.records[1440:],
                                 drifted.records[:840] + drifted.records[1440:]):
            assert before == after
        assert drifted.records[900].rsrp == flat_dataset.records[900].rsrp
        assert manifest["column"] == "dl_bitrate"

    def test_open_ended_offset_is_floored(self, flat_dataset):
        drifted, _ = inject_drift(flat_dataset, 1200.0, None, "offset", -5000.0)
        assert drifted.records[1199].dl_bitrate == 1000.0
        assert drifted.records[-1].dl_bitrate == 0.0

    def test_ks_grows_with_injected_scale(self, synthetic_hour):
        original = np.array([r.dl_bitrate for r in synthetic_hour.records[840:1440]])
        drifted, _ = inject_drift(synthetic_hour, 840.0, 600.0, "scale", 0.5)
        changed = np.array([r.dl_bitrate for r in drifted.records[840:1440]])
        reference = np.array([r.dl_bitrate for r in synthetic_hour.records[:840]])
        assert ks_statistic(reference, changed) > ks_statistic(reference, original)

    @pytest.mark.parametrize("start, length", [(-1.0, 60.0), (5000.0, 60.0), (2000.0, 1000.0)])
    def test_out_of_bounds(self, flat_dataset, start, length):
        with pytest.raises(SegmentOutOfBounds):
            inject_drift(flat_dataset, start, length)


class TestBlocks:
    def test_blocks_stop_at_segment_end(self):
        values = np.arange(20, dtype=float)
        segment = np.array([0] * 12 + [1] * 8)
        stream = MonitorStream(values[:, None], np.arange(20.0), 0, segment)
        index, preds, actuals = block_predictions(LevelForecaster(0.0, look_back=3, horizon=4), stream, 0, 20)
        # segment 0: blocks at 3 and 7, then 11 is cut at the boundary; segment 1 restarts at 12 + 3
        assert index.tolist() == list(range(3, 12)) + list(range(15, 20))
        assert np.array_equal(actuals, values[index])
        assert not preds.any()

    def test_training_windows_need_room(self):
        stream = stream_of(np.zeros(10))
        x, y = training_windows(stream, 5, 10, 3, 2)
        assert x.shape == (4, 3, 1) and y.shape == (4, 2)
        with pytest.raises(InsufficientWindow):
            training_windows(stream, 0, 3, 3, 2)


class TestAdapt:
    def test_new_baseline_sets_threshold(self):
        stream = stream_of(alternating(600, 0.3, 0.01))
        forecaster = LevelForecaster(0.6)
        state = adapt(forecaster, stream, 0, 600, DriftMonitorState(baseline_mae=0.01))
        assert forecaster.level == pytest.approx(0.3, abs=1e-3)
        assert state.baseline_mae == pytest.approx(0.01, abs=1e-3)
        assert state.threshold == pytest.approx(1.2 * state.baseline_mae, abs=1e-12)

    def test_zero_epochs_only_remeasures(self):
        stream = stream_of(alternating(600, 0.3, 0.01))
        forecaster = LevelForecaster(0.6)
        state = adapt(forecaster, stream, 0, 600, DriftMonitorState(baseline_mae=0.01, fine_tune_epochs=0))
        assert forecaster.level == 0.6
        assert state.baseline_mae == pytest.approx(0.3, abs=1e-3)


class TestReplay:
    def test_clean_replay_raises_no_flags(self):
        stream = stream_of(alternating(2400, 0.6, 0.01))
        forecaster = LevelForecaster(0.6)
        state = DriftMonitorState(baseline_mae=measure_baseline(forecaster, stream))
        report, _ = run_monitor(forecaster, stream, state)
        assert [r.check_time_s for r in report.history] == [600.0, 1200.0, 1800.0, 2400.0]
        assert report.detection_times == []
        assert forecaster.fine_tunes == 0

    def test_drift_at_fourteen_minutes(self):
        stream = drifted_stream()
        forecaster = LevelForecaster(0.6)
        clean = stream_of(alternating(600, 0.6, 0.01))
        state = DriftMonitorState(baseline_mae=measure_baseline(forecaster, clean))
        report, final = run_monitor(forecaster, stream, state, reference=clean.target)
        flags = {r.check_time_s: r.drift_flag for r in report.history}
        assert flags == {600.0: False, 1200.0: True, 1800.0: False, 2400.0: False}
        adapted = report.history[1]
        assert adapted.adapted
        assert adapted.new_baseline_mae == pytest.approx(0.144, abs=5e-3)
        assert final.threshold == pytest.approx(1.2 * final.baseline_mae, abs=1e-12)
        assert report.history[2].threshold == pytest.approx(1.2 * adapted.new_baseline_mae, abs=1e-12)
        assert report.history[1].ks_flag

    def test_detection_waits_for_check_boundary(self):
        report, _ = run_monitor(LevelForecaster(0.6), drifted_stream(),
                                DriftMonitorState(baseline_mae=0.01, check_period_s=300.0, window_size_s=300.0))
        # onset at 840 s is first visible at the 900 s check
        assert report.detection_times[0] == 900.0

    def test_report_files(self, tmp_path):
        stream = drifted_stream(30)
        report, _ = run_monitor(LevelForecaster(0.6), stream, DriftMonitorState(baseline_mae=0.01))
        report.write(str(tmp_path / "monitor.csv"), str(tmp_path / "monitor.json"), config_hash="abc")
        header = (tmp_path / "monitor.csv").read_text(encoding="utf-8").splitlines()[0]
        assert header.startswith("check_time_s,windowed_mae,threshold,drift_flag,adapted")
        assert header.endswith(",config_hash")
        summary = json.loads((tmp_path / "monitor.json").read_text(encoding="utf-8"))
        assert summary["detection_times"] == [1200.0]
        assert summary["baselines"][0] == 0.01
        assert len(summary["baselines"]) == 2
        assert summary["config_hash"] == "abc"


def noisy_level_stream(rng, minutes: int = 40) -> MonitorStream:
    """1 Hz stream at 0.6 +/- 0.1 uniform noise whose level halves from minute 14 onwards."""
    values = 0.6 + rng.uniform(-0.1, 0.1, minutes * 60)
    values[14 * 60:] *= 0.5
    return stream_of(values)


def pinned_forecaster(level: float) -> NeuralForecaster:
    """A real seq2seq network whose output layer starts pinned to a constant level."""
    spec = ModelSpec(input_dim=1, encoder_units=[4], decoder_units=[4], look_back=4, horizon=2)
    weights = init_weights(spec, 0)
    weights["out_W"] = np.zeros_like(weights["out_W"])
    weights["out_b"] = np.full_like(weights["out_b"], level)
    return NeuralForecaster(spec, weights, TrainHyperparams(learning_rate=0.01))


@pytest.mark.slow
class TestNeuralAdaptation:
    def test_fine_tuning_absorbs_the_drift(self, rng):
        forecaster = pinned_forecaster(0.6)
        clean = stream_of(0.6 + rng.uniform(-0.1, 0.1, 1200))
        state = DriftMonitorState.from_config(measure_baseline(forecaster, clean), MonitorConfig())
        report, final = run_monitor(forecaster, noisy_level_stream(rng), state)
        flags = {r.check_time_s: r.drift_flag for r in report.history}
        assert flags == {600.0: False, 1200.0: True, 1800.0: False, 2400.0: False}
        adapted = report.history[1]
        assert adapted.adapted
        assert adapted.new_baseline_mae < 0.8 * adapted.windowed_mae
        for later in report.history[2:]:
            assert later.windowed_mae < later.threshold
            assert not later.adapted
        assert final.baseline_mae == adapted.new_baseline_mae

    def test_runaway_fine_tune_leaves_the_model_as_it_was(self, rng):
        forecaster = pinned_forecaster(0.3)
        forecaster.hyperparams = TrainHyperparams(learning_rate=10.0)
        stream = stream_of(0.3 + rng.uniform(-0.05, 0.05, 600))
        before = measure_baseline(forecaster, stream)
        state = adapt(forecaster, stream, 0, 600, DriftMonitorState(baseline_mae=0.01))
        assert state.baseline_mae == before
        assert forecaster.weights["out_b"].tolist() == [0.3]
