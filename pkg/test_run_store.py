import json

import pytest

from drift_monitor import CheckRecord
from errors import StoreError
from run_store import RunStore


@pytest.fixture
def store(tmp_path):
    return RunStore(str(tmp_path / "runs.db"))


def test_record_and_fetch(store):
    first = store.record_run("ingest", "abc", 0, "ok", 1.5, {"dataset": "dataset.parquet"})
    second = store.record_run("train", "abc", 1, "failed", 0.2, message="ShapeMismatch")
    assert second > first
    assert [r.command for r in store.get_runs()] == ["ingest", "train"]
    run = store.get_run_by_id(first)
    assert run.artifacts == {"dataset": "dataset.parquet"}
    assert run.created_at
    assert store.get_run_by_id(second).message == "ShapeMismatch"
    assert store.get_run_by_id(999) is None


def test_filter_and_export(store):
    store.record_run("ingest", "abc", 0, "ok", 1.0)
    store.record_run("monitor", "abc", 0, "ok", 2.0)
    assert [r.command for r in store.get_runs("monitor")] == ["monitor"]
    exported = json.loads(store.export_runs(command="ingest"))
    assert len(exported) == 1 and exported[0]["config_hash"] == "abc"
    with pytest.raises(StoreError):
        store.export_runs(format="xml")


def test_checks_are_stored_in_time_order(store):
    run_id = store.record_run("monitor", "abc", 0, "ok", 3.0)
    checks = [
        CheckRecord(1200.0, 0.04, 0.026, 0.0213, True, 600, adapted=True, new_baseline_mae=0.02, ks_statistic=0.5),
        CheckRecord(600.0, 0.02, 0.026, 0.0213, False, 600),
    ]
    assert store.record_checks(run_id, checks) == 2
    rows = store.get_checks(run_id)
    assert [r.check_time_s for r in rows] == [600.0, 1200.0]
    assert rows[1].drift_flag and rows[1].adapted
    assert rows[1].ks_statistic == 0.5
    assert rows[0].ks_statistic is None


def test_unusable_path(tmp_path):
    with pytest.raises(StoreError):
        RunStore(str(tmp_path))
