import json
import logging

import pytest

from app_config import (
    CONFIG_SCHEMA_VERSION,
    JsonLogFormatter,
    PipelineConfig,
    apply_overrides,
    config_hash,
    load_config,
    package_versions,
)
from errors import ConfigInvalid


def test_bundled_defaults():
    config = load_config()
    assert config.schema_version == CONFIG_SCHEMA_VERSION
    assert config.train.encoder_units == [64]
    assert config.preprocess.drop_columns == ["longitude", "latitude"]
    assert config.monitor.rel_margin == 0.2
    assert config.search.budget > config.search.init_points


def test_overrides_keep_yaml_types():
    config = load_config(overrides=["search.budget=12", "eval.seeds=[4, 5]", "monitor.ks_triggers_adaptation=true"])
    assert config.search.budget == 12
    assert config.eval.seeds == [4, 5]
    assert config.monitor.ks_triggers_adaptation is True


def test_override_creates_missing_section():
    raw = apply_overrides({}, ["monitor.inject.value=0.25"])
    assert raw == {"monitor": {"inject": {"value": 0.25}}}


@pytest.mark.parametrize("overrides", [
    ["search.budget"],
    ["train.no_such_field=1"],
    ["search.budget=4", "search.init_points=4"],
    ["preprocess.split=[0.5, 0.5, 0.5]"],
    ["seed.inner=1"],
])
def test_invalid_overrides(overrides):
    with pytest.raises(ConfigInvalid):
        load_config(overrides=overrides)


def test_random_search_may_use_small_budget():
    assert load_config(overrides=["search.method=random", "search.budget=2"]).search.budget == 2


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigInvalid):
        load_config(str(tmp_path / "absent.json"))
    broken = tmp_path / "broken.json"
    broken.write_text("{ not: [valid", encoding="utf-8")
    with pytest.raises(ConfigInvalid):
        load_config(str(broken))
    listing = tmp_path / "list.json"
    listing.write_text("[1, 2]", encoding="utf-8")
    with pytest.raises(ConfigInvalid):
        load_config(str(listing))


def test_partial_file_falls_back_to_defaults(tmp_path):
    path = tmp_path / "partial.json"
    path.write_text(json.dumps({"seed": 9, "train": {"max_epochs": 4}}), encoding="utf-8")
    config = load_config(str(path))
    assert config.seed == 9
    assert config.train.max_epochs == 4
    assert config.train.encoder_units == [128]


class TestConfigHash:
    def test_stable(self):
        assert config_hash(load_config()) == config_hash(load_config())
        assert len(config_hash(PipelineConfig())) == 64

    def test_paths_do_not_count(self):
        assert config_hash(load_config()) == config_hash(load_config(overrides=["paths.artifacts_dir=elsewhere"]))

    def test_seed_and_settings_count(self):
        base = config_hash(load_config())
        assert config_hash(load_config(overrides=["seed=1"])) != base
        assert config_hash(load_config(overrides=["monitor.rel_margin=0.3"])) != base


def test_json_log_lines_carry_extras():
    record = logging.LogRecord("throughput", logging.INFO, __file__, 1, "checked %s", ("window",), None)
    record.check_time_s = 600.0
    event = json.loads(JsonLogFormatter().format(record))
    assert event["event"] == "checked window"
    assert event["level"] == "INFO"
    assert event["logger"] == "throughput"
    assert event["check_time_s"] == 600.0
    assert {"ts", "level", "logger", "event"} <= set(event)


def test_package_versions_lists_stack():
    versions = package_versions()
    assert versions["throughput-automl"] == "0.1.0"
    assert {"numpy", "pandas", "scipy", "pydantic"} <= set(versions)
