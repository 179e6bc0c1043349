import json

import pandas as pd
import pytest

from errors import ConfigInvalid
from run_store import RunStore
from throughput_automl import main, parse_duration, parse_inject


@pytest.mark.parametrize("text, seconds", [("14m", 840.0), ("90", 90.0), ("30s", 30.0), ("1.5h", 5400.0)])
def test_parse_duration(text, seconds):
    assert parse_duration(text) == seconds


def test_parse_inject():
    inject = parse_inject("scale=0.5,start=14m,len=10m")
    assert (inject.kind, inject.value, inject.start_s, inject.length_s) == ("scale", 0.5, 840.0, 600.0)
    assert parse_inject("offset=-100,start=60").length_s is None
    with pytest.raises(ConfigInvalid):
        parse_inject("tilt=2")


@pytest.mark.parametrize("text", ["scale=abc", "scale=0.5,len=0", "scale=0.5,start=-1"])
def test_parse_inject_rejects_bad_values(text):
    with pytest.raises(ConfigInvalid):
        parse_inject(text)


def test_version(capsys):
    with pytest.raises(SystemExit) as info:
        main(["--version"])
    assert info.value.code == 0
    assert capsys.readouterr().out.strip() == "throughput_automl 0.1.0 (config schema 1)"


def test_missing_model_exit_code(tmp_path):
    assert main(["--out", str(tmp_path), "evaluate"]) == 3


def test_bad_override_exit_code(tmp_path):
    assert main(["--out", str(tmp_path), "--set", "search.budget", "ingest"]) == 2
    assert main(["--out", str(tmp_path), "--set", "train.unknown=1", "ingest"]) == 2


def test_bad_inject_exit_code(tmp_path):
    base = ["--out", str(tmp_path), "--set", "synthetic.duration_s=600", "--set", "synthetic.sessions=1"]
    assert main(base + ["ingest"]) == 0
    assert main(base + ["inject-drift", "--inject", "scale=abc"]) == 2
    assert main(base + ["inject-drift", "--inject", "scale=0.5,len=0"]) == 2


def test_missing_schema_exit_code(tmp_path, gnettrack_csv):
    assert main(["--out", str(tmp_path / "out"), "--set", "ingest.source=csv",
                 "--set", f"paths.data_dir={gnettrack_csv.parent}",
                 "--set", f"ingest.schema_path={tmp_path / 'absent.yaml'}", "ingest"]) == 2


def test_upstream_from_other_config_is_refused(tmp_path):
    base = ["--out", str(tmp_path), "--set", "synthetic.duration_s=600", "--set", "synthetic.sessions=1"]
    assert main(base + ["ingest"]) == 0
    assert main(base + ["--seed", "1", "preprocess"]) == 3
    assert main(base + ["--seed", "1", "--force", "preprocess"]) == 0
    runs = RunStore(str(tmp_path / "runs.db")).get_runs()
    assert [(r.command, r.status) for r in runs] == [("ingest", "ok"), ("preprocess", "failed"),
                                                     ("preprocess", "ok")]


def test_drifted_copy(tmp_path):
    base = ["--out", str(tmp_path), "--set", "synthetic.duration_s=1200", "--set", "synthetic.sessions=1"]
    assert main(base + ["ingest"]) == 0
    assert main(base + ["inject-drift", "--inject", "scale=0.5,start=5m,len=5m"]) == 0
    manifest = json.loads((tmp_path / "injection_manifest.json").read_text(encoding="utf-8"))
    assert manifest["rows_changed"] == 300
    assert (tmp_path / "datasets" / "5G_Downloading_drifted.csv").exists()


TINY = [
    "synthetic.duration_s=7200", "synthetic.sessions=1",
    "feature_select.trees=10", "feature_select.max_rows=2000",
    "train.encoder_units=[8]", "train.decoder_units=[8]", "train.max_epochs=2", "train.batch_size=64",
    "eval.period_s=30", "eval.look_back_s=120", "eval.horizon_s=60",
    "monitor.fine_tune_epochs=1",
]


@pytest.mark.slow
def test_pipeline_end_to_end(tmp_path, capsys):
    base = ["--out", str(tmp_path)]
    for item in TINY:
        base += ["--set", item]
    for command in (["ingest"], ["preprocess"], ["select-features"], ["train"], ["evaluate"],
                    ["monitor", "--check-period", "5m", "--inject", "scale=0.5,start=1m"]):
        assert main(base + command) == 0, command
        manifest = json.loads((tmp_path / f"{command[0]}_manifest.json").read_text(encoding="utf-8"))
        assert manifest["command"] == command[0]
        assert len(manifest["config_hash"]) == 64

    metrics = pd.read_csv(tmp_path / "metrics.csv")
    assert metrics.loc[0, "look_back"] == 4 and metrics.loc[0, "horizon"] == 2
    assert metrics.loc[0, "mae_norm"] >= 0

    checks = pd.read_csv(tmp_path / "monitor_report.csv")
    assert checks["check_time_s"].tolist() == [300.0, 600.0, 900.0]
    assert (tmp_path / "monitor_injection.json").exists()

    capsys.readouterr()
    assert main(base + ["runs"]) == 0
    runs = json.loads(capsys.readouterr().out)
    assert [r["command"] for r in runs] == ["ingest", "preprocess", "select-features", "train", "evaluate", "monitor"]
    assert len({r["config_hash"] for r in runs}) == 1
    store = RunStore(str(tmp_path / "runs.db"))
    assert len(store.get_checks(runs[-1]["id"])) == 3

    config_hash = runs[-1]["config_hash"]
    for name in ("plan.json", "feature_report.json", "monitor_report.json", "monitor_injection.json"):
        assert json.loads((tmp_path / name).read_text(encoding="utf-8"))["config_hash"] == config_hash, name
    assert set(metrics["config_hash"]) == {config_hash}
    assert set(checks["config_hash"]) == {config_hash}
    assert set(pd.read_csv(tmp_path / "training_trace.csv")["config_hash"]) == {config_hash}


def _options(items):
    options = []
    for item in items:
        options += ["--set", item]
    return options


@pytest.mark.slow
def test_halved_throughput_is_flagged_within_twenty_minutes(tmp_path):
    base = ["--out", str(tmp_path)] + _options([
        "synthetic.duration_s=18000", "synthetic.sessions=1",
        "feature_select.trees=10", "feature_select.max_rows=2000",
        "train.encoder_units=[8]", "train.decoder_units=[8]", "train.max_epochs=20", "train.learning_rate=0.005",
        "train.batch_size=32", "eval.period_s=30", "eval.look_back_s=120", "eval.horizon_s=60",
    ])
    for command in (["ingest"], ["preprocess"], ["select-features"], ["train"]):
        assert main(base + command) == 0, command
    assert main(base + ["monitor", "--check-period", "10m", "--inject", "scale=0.5,start=14m"]) == 0
    checks = pd.read_csv(tmp_path / "monitor_report.csv")
    assert checks["check_time_s"].tolist() == [600.0, 1200.0, 1800.0, 2400.0]
    flagged = checks.loc[checks["drift_flag"], "check_time_s"]
    assert len(flagged) > 0
    assert flagged.min() <= 840.0 + 1200.0


@pytest.mark.slow
def test_same_config_and_seed_give_identical_files(tmp_path):
    outputs = []
    for name in ("first", "second"):
        base = ["--out", str(tmp_path / name)] + _options(TINY)
        for command in (["ingest"], ["preprocess"], ["select-features"], ["train"], ["evaluate"]):
            assert main(base + command) == 0, command
        outputs.append(tmp_path / name)
    for artifact in ("datasets/5G_Downloading.csv", "plan.json", "feature_report.json", "model.json",
                     "training_trace.csv", "metrics.csv", "metrics.json"):
        first, second = ((out / artifact).read_bytes() for out in outputs)
        assert first == second, artifact
