import json

import numpy as np
import pytest

from errors import AllExcluded, SeriesTooShort
from eval_report import (
    REPORT_COLUMNS,
    EvalSeries,
    MetricsReport,
    baseline_spec,
    compare_models,
    make_windows,
    mape,
    score_forecasts,
    steps_from_seconds,
    sweep_horizon,
    sweep_lookback,
    windows_for,
    write_dat,
)
from preprocess import NormalizerParams


class TestWindows:
    def test_ten_rows(self):
        values = np.arange(10, dtype=float)
        windows = make_windows(values, 3, 2)
        assert len(windows) == 6
        assert windows.inputs[0, :, 0].tolist() == [0.0, 1.0, 2.0]
        assert windows.targets[0, :, 0].tolist() == [3.0, 4.0]

    @pytest.mark.parametrize("n", [5, 9, 17, 40])
    @pytest.mark.parametrize("look_back", [1, 2, 4])
    @pytest.mark.parametrize("horizon", [1, 3])
    def test_window_count(self, n, look_back, horizon):
        if n < look_back + horizon:
            pytest.skip("too short")
        assert len(make_windows(np.zeros(n), look_back, horizon)) == n - look_back - horizon + 1

    def test_exactly_one_window(self):
        assert len(make_windows(np.zeros(5), 3, 2)) == 1

    def test_too_short(self):
        with pytest.raises(SeriesTooShort):
            make_windows(np.zeros(4), 3, 2)

    def test_no_window_crosses_segments(self):
        values = np.arange(20, dtype=float)
        segment = np.array([0] * 8 + [1] * 12)
        windows = make_windows(values, 3, 2, segment=segment)
        assert len(windows) == (8 - 5 + 1) + (12 - 5 + 1)
        spans = windows.starts[:, None] + np.arange(5)[None, :]
        assert all(len(set(segment[row])) == 1 for row in spans)

    def test_chronological_split_with_purge(self):
        windows = make_windows(np.arange(200, dtype=float), 10, 5)
        span = windows.look_back + windows.horizon
        train_starts = windows.starts[windows.tags == "train"]
        val_starts = windows.starts[windows.tags == "val"]
        test_starts = windows.starts[windows.tags == "test"]
        assert train_starts.max() + span - 1 < test_starts.min()
        assert train_starts.max() < val_starts.min() < test_starts.min()
        assert windows.count("purged") == 0
        assert windows.count("train") + windows.count("val") + windows.count("test") == len(windows)

    def test_train_windows_reaching_test_are_purged(self):
        windows = make_windows(np.arange(30, dtype=float), 3, 2, (0.8, 0.0, 0.2))
        assert windows.count("purged") > 0
        first_test = windows.starts[windows.tags == "test"].min()
        assert windows.starts[windows.tags == "train"].max() + 4 < first_test
        train_x, _ = windows.split("train")
        assert len(train_x) == windows.count("train")
        assert windows.access_log == ["train"]

    def test_multivariate_target_column(self):
        series = np.column_stack([np.zeros(12), np.arange(12, dtype=float)])
        windows = make_windows(series, 4, 2, target_index=1)
        assert windows.inputs.shape == (7, 4, 2)
        assert windows.targets[0, :, 0].tolist() == [4.0, 5.0]


class TestSeries:
    def test_seconds_to_steps(self):
        assert steps_from_seconds(60.0, 5.0) == 12
        assert steps_from_seconds(1.0, 5.0) == 1

    def test_decimation_respects_segments(self):
        values = np.arange(10, dtype=float)[:, None]
        series = EvalSeries(values, ["dl_bitrate"], "dl_bitrate", 1.0, np.array([0] * 5 + [1] * 5))
        coarse = series.at_period(2.0)
        assert coarse.values[:, 0].tolist() == [0.0, 2.0, 4.0, 5.0, 7.0, 9.0]
        assert coarse.period_s == 2.0

    def test_windows_for_converts_seconds(self):
        series = EvalSeries(np.zeros((100, 1)), ["dl_bitrate"], "dl_bitrate", 5.0)
        windows = windows_for(series, 60.0, 30.0, (0.7, 0.15, 0.15))
        assert (windows.look_back, windows.horizon) == (12, 6)


class TestMetrics:
    def test_mape_example(self):
        pct, excluded = mape([110.0, 190.0], [100.0, 200.0])
        assert pct == pytest.approx(7.5)
        assert excluded == 0

    def test_mape_excludes_small_actuals(self):
        assert mape([5.0, 100.0], [0.0, 100.0], epsilon=1.0) == (0.0, 1)

    def test_mape_all_excluded(self):
        with pytest.raises(AllExcluded):
            mape([1.0, 2.0], [0.0, 0.5], epsilon=1.0)

    def test_kbps_mae_scales_with_range(self, rng):
        normalizer = NormalizerParams(kind="minmax", lo=100.0, hi=1100.0)
        actual = rng.uniform(0, 1, (20, 3))
        pred = actual + rng.normal(0, 0.05, (20, 3))
        scores = score_forecasts(pred, actual, normalizer, 1.0)
        assert scores["mae_kbps"] == pytest.approx(scores["mae_norm"] * 1000.0, rel=1e-9)
        assert scores["mape_pct"] >= 0.0

    def test_all_idle_test_split_gives_nan_mape(self):
        normalizer = NormalizerParams(kind="minmax", lo=0.0, hi=1000.0)
        scores = score_forecasts(np.full((2, 2), 0.1), np.zeros((2, 2)), normalizer, 1.0)
        assert np.isnan(scores["mape_pct"])
        assert scores["excluded"] == 4


class TestReport:
    def test_means_follow_per_seed_rows(self, tmp_path):
        report = MetricsReport()
        for seed, value in ((0, 0.1), (1, 0.3)):
            report.add(dataset="5G_Downloading", model="lstm", look_back=12, horizon=12, look_back_s=60.0,
                       horizon_s=60.0, seed=seed, mae_norm=value, mae_kbps=value * 1000, mape_pct=10.0 * seed,
                       excluded=0)
        frame = report.to_frame()
        assert list(frame.columns) == REPORT_COLUMNS
        assert len(frame) == 3
        mean = frame[frame["seed"] == "mean"].iloc[0]
        assert mean["mae_norm"] == pytest.approx(0.2)
        assert mean["mape_pct"] == pytest.approx(5.0)
        report.write(str(tmp_path / "report.csv"), str(tmp_path / "report.json"), config_hash="abc")
        header = (tmp_path / "report.csv").read_text(encoding="utf-8").splitlines()[0]
        assert header == ",".join(REPORT_COLUMNS + ["config_hash"])
        assert json.loads((tmp_path / "report.json").read_text(encoding="utf-8"))[0]["config_hash"] == "abc"

    def test_dat_file(self, tmp_path):
        report = MetricsReport()
        for lb, seed, value in ((120.0, 0, 0.2), (120.0, 1, 0.4), (300.0, 0, 0.1)):
            report.add(dataset="d", model="fixed", look_back=4, horizon=10, look_back_s=lb, horizon_s=300.0,
                       seed=seed, mae_norm=value, mae_kbps=0.0, mape_pct=0.0, excluded=0)
        write_dat(report, "look_back_s", str(tmp_path / "sweep.dat"), config_hash="abc")
        lines = (tmp_path / "sweep.dat").read_text(encoding="utf-8").splitlines()
        assert lines[0].startswith("# look_back_min")
        assert lines[1] == "# config_hash=abc"
        assert lines[2].split() == ["2", "0.3", "0.2", "0.4"]
        assert lines[3].split() == ["5", "0.1", "0.1", "0.1"]


def test_baseline_specs():
    lstm = baseline_spec("lstm", 3, 12, 12, 2)
    seq2seq = baseline_spec("seq2seq", 3, 12, 12, 2)
    assert lstm.architecture == "direct" and lstm.encoder_units == [128] and lstm.head_outputs == 12
    assert seq2seq.encoder_units == [128] and seq2seq.decoder_units == [128]


def smooth_series(n: int = 240, period_s: float = 30.0) -> EvalSeries:
    t = np.arange(n, dtype=float)
    values = np.column_stack([0.5 + 0.3 * np.sin(t / 8.0), 0.5 + 0.3 * np.cos(t / 8.0)])
    return EvalSeries(values, ["dl_bitrate", "rsrp"], "dl_bitrate", period_s)


@pytest.mark.slow
def test_compare_models(small_config):
    normalizer = NormalizerParams(kind="minmax", lo=0.0, hi=60000.0)
    report, timing = compare_models(smooth_series(), small_config, normalizer, "synthetic", seeds=[0, 1])
    frame = report.to_frame()
    assert set(frame["model"]) == {"lstm", "seq2seq", "automl"}
    assert len(frame) == 3 * 2 + 3
    per_seed = frame[frame["seed"] != "mean"]
    for model, rows in per_seed.groupby("model"):
        mean = frame[(frame["model"] == model) & (frame["seed"] == "mean")]["mae_norm"].iloc[0]
        assert mean == pytest.approx(rows["mae_norm"].mean())
    assert np.isfinite(frame["mae_norm"].astype(float)).all()
    assert len(timing) == 6


def test_sweeps_respect_settings(small_config):
    normalizer = NormalizerParams(kind="minmax", lo=0.0, hi=60000.0)
    report, timing = sweep_lookback(smooth_series(), small_config, normalizer, "synthetic")
    frame = report.per_seed()
    assert frame["look_back_s"].tolist() == [120.0, 180.0]
    assert frame["look_back"].tolist() == [2, 3]
    assert (frame["mae_norm"] >= 0).all()
    report, _ = sweep_horizon(smooth_series(), small_config, normalizer, "synthetic")
    assert report.per_seed()["horizon_s"].tolist() == [60.0, 120.0]
    assert len(timing) == 2


@pytest.mark.slow
def test_searched_model_beats_briefly_trained_baselines(small_config):
    config = small_config.model_copy(update={
        "search": small_config.search.model_copy(update={
            "final_epochs": 60, "final_patience": 15, "batch_size": 16,
            "space": small_config.search.space.model_copy(update={"learning_rate": (5e-3, 1e-2),
                                                                  "dropout": (0.0, 0.1)}),
        }),
    })
    normalizer = NormalizerParams(kind="minmax", lo=0.0, hi=60000.0)
    report, _ = compare_models(smooth_series(), config, normalizer, "synthetic", seeds=[0, 1, 2])
    means = report.means().set_index("model")["mae_norm"]
    assert means["automl"] <= 0.9 * min(means["lstm"], means["seq2seq"])


def delayed_bits(n: int = 600, delay: int = 5, seed: int = 3) -> EvalSeries:
    """Target repeats an i.i.d. bit input ``delay`` steps later; only look-back can reveal it."""
    bits = np.random.default_rng(seed).integers(0, 2, n + delay).astype(float)
    return EvalSeries(np.column_stack([bits[:n], bits[delay:]]), ["dl_bitrate", "x"], "dl_bitrate", 60.0)


def inversions(values, increasing: bool) -> int:
    steps = np.diff(np.asarray(values, dtype=float))
    return int(np.sum(steps < 0 if increasing else steps > 0))


@pytest.fixture
def sweep_config(small_config):
    return small_config.model_copy(update={
        "train": small_config.train.model_copy(update={
            "architecture": "direct", "encoder_units": [16], "learning_rate": 0.01, "batch_size": 32,
            "max_epochs": 80, "patience": 15,
        }),
        "sweep": small_config.sweep.model_copy(update={
            "look_backs_min": [2, 3, 4, 5], "horizon_min": 5.0, "lookback_fixed_min": 5.0,
            "horizons_min": [5, 7, 10, 15, 20], "seeds": [0, 1, 2],
        }),
    })


@pytest.mark.slow
class TestSweepTrends:
    normalizer = NormalizerParams(kind="minmax", lo=0.0, hi=1.0)

    def test_error_falls_as_look_back_grows(self, sweep_config):
        report, _ = sweep_lookback(delayed_bits(), sweep_config, self.normalizer, "bits")
        means = report.means().sort_values("look_back_s")["mae_norm"].tolist()
        assert inversions(means, increasing=False) <= 1
        assert means[-1] < means[0]

    def test_error_rises_with_horizon(self, sweep_config):
        report, _ = sweep_horizon(delayed_bits(), sweep_config, self.normalizer, "bits")
        means = report.means().sort_values("horizon_s")["mae_norm"].tolist()
        assert inversions(means, increasing=True) <= 1
        assert means[-1] > means[0]
