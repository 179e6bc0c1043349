import hashlib
import json
import logging
import sys
from importlib import metadata
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from errors import ConfigInvalid

__version__ = "0.1.0"
CONFIG_SCHEMA_VERSION = 1

DEFAULT_CONFIG_PATH = Path(__file__).resolve().parent / "pipeline_config.json"
DEFAULT_SCHEMA_PATH = Path(__file__).resolve().parent / "column_schema.yaml"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PathsConfig(_Section):
    data_dir: str = "data"
    artifacts_dir: str = "artifacts"


class IngestConfig(_Section):
    source: Literal["csv", "synthetic"] = "synthetic"
    schema_path: Optional[str] = None
    resample_period_s: float = Field(1.0, gt=0)
    max_gap_s: float = Field(30.0, gt=0)
    dataset: str = "5G_Downloading"
    max_workers: int = Field(4, ge=1)


def _default_encodings() -> Dict[str, str]:
    return {
        "operator_name": "label",
        "node_hex": "label",
        "lac_hex": "label",
        "cell_id": "label",
        "cell_id_hex": "label",
        "cell_id_raw": "label",
        "network_mode": "onehot",
        "state": "onehot",
    }


def _default_imputation() -> Dict[str, str]:
    return {"dl_bitrate": "zero", "ul_bitrate": "zero"}


class PreprocessConfig(_Section):
    target: str = "dl_bitrate"
    encodings: Dict[str, Literal["label", "onehot", "target"]] = Field(default_factory=_default_encodings)
    imputation: Dict[str, Literal["zero", "mean", "median", "forward_fill", "backward_fill"]] = Field(
        default_factory=_default_imputation
    )
    default_imputation: Literal["zero", "mean", "median", "forward_fill", "backward_fill"] = "forward_fill"
    normalization: Literal["minmax", "zscore", "none"] = "minmax"
    clip_minmax: bool = True
    drop_columns: List[str] = Field(default_factory=list)
    split: Tuple[float, float, float] = (0.7, 0.15, 0.15)

    @field_validator("split")
    @classmethod
    def _split_sums_to_one(cls, value):
        if any(part < 0 for part in value) or abs(sum(value) - 1.0) > 1e-9:
            raise ValueError("split fractions must be non-negative and sum to 1")
        if value[0] <= 0:
            raise ValueError("training fraction must be positive")
        return value


class FeatureSelectConfig(_Section):
    trees: int = Field(100, ge=1)
    max_depth: int = Field(4, ge=1)
    learning_rate: float = Field(0.1, gt=0, le=1)
    min_samples_leaf: int = Field(5, ge=1)
    subsample: float = Field(1.0, gt=0, le=1)
    cumulative_threshold: float = Field(0.95, gt=0, le=1)
    corr_threshold: float = Field(0.95, gt=0, le=1)
    correlation_method: Literal["pearson", "spearman"] = "pearson"
    max_rows: Optional[int] = Field(20000, ge=2)


class TrainConfig(_Section):
    architecture: Literal["seq2seq", "direct"] = "seq2seq"
    encoder_units: List[int] = Field(default_factory=lambda: [128])
    decoder_units: List[int] = Field(default_factory=lambda: [128])
    dense_units: List[int] = Field(default_factory=list)
    dense_activation: Literal["relu", "tanh", "linear"] = "relu"
    learning_rate: float = Field(1e-3, gt=0)
    dropout: float = Field(0.0, ge=0, le=0.9)
    batch_size: int = Field(32, ge=1)
    max_epochs: int = Field(100, ge=0)
    patience: int = Field(10, ge=1)
    teacher_forcing: float = Field(1.0, ge=0, le=1)
    dtype: Literal["float64", "float32"] = "float64"


class SearchSpaceConfig(_Section):
    encoder_layers: Tuple[int, int] = (1, 3)
    decoder_layers: Tuple[int, int] = (1, 3)
    lstm_units: List[int] = Field(default_factory=lambda: [32, 64, 128, 256])
    dense_layers: Tuple[int, int] = (0, 2)
    dense_units: List[int] = Field(default_factory=lambda: [16, 32, 64])
    learning_rate: Tuple[float, float] = (1e-4, 1e-2)
    dropout: Tuple[float, float] = (0.0, 0.5)


class SearchConfig(_Section):
    method: Literal["bayesian", "random"] = "bayesian"
    budget: int = Field(30, ge=1)
    init_points: int = Field(8, ge=2)
    candidate_pool: int = Field(2048, ge=1)
    epoch_cap: int = Field(15, ge=1)
    final_epochs: int = Field(100, ge=0)
    final_patience: int = Field(10, ge=1)
    batch_size: int = Field(32, ge=1)
    length_scale: Optional[float] = Field(None, gt=0)
    signal_variance: float = Field(1.0, gt=0)
    noise: float = Field(1e-6, ge=0)
    xi: float = Field(0.0, ge=0)
    max_workers: int = Field(1, ge=1)
    space: SearchSpaceConfig = Field(default_factory=SearchSpaceConfig)


class InjectConfig(_Section):
    start_s: float = Field(840.0, ge=0)
    length_s: Optional[float] = Field(None, gt=0)
    kind: Literal["scale", "offset"] = "scale"
    value: float = 0.5


class MonitorConfig(_Section):
    check_period_s: float = Field(600.0, gt=0)
    window_size_s: float = Field(600.0, gt=0)
    rel_margin: float = Field(0.2, ge=0)
    fine_tune_epochs: int = Field(30, ge=0)
    fine_tune_lr_scale: float = Field(1.0, gt=0)
    ks_threshold: float = Field(0.3, gt=0, le=1)
    ks_triggers_adaptation: bool = False
    inject: Optional[InjectConfig] = None


class EvalConfig(_Section):
    period_s: float = Field(5.0, gt=0)
    look_back_s: float = Field(60.0, gt=0)
    horizon_s: float = Field(60.0, gt=0)
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2])
    mape_epsilon_kbps: float = Field(1.0, gt=0)
    baseline_epochs: int = Field(30, ge=0)


class SweepConfig(_Section):
    period_s: float = Field(30.0, gt=0)
    look_backs_min: List[float] = Field(default_factory=lambda: [2, 3, 4, 5])
    horizon_min: float = 5.0
    lookback_fixed_min: float = 5.0
    horizons_min: List[float] = Field(default_factory=lambda: [5, 7, 10, 15, 20])
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2])
    model: Literal["fixed", "searched"] = "fixed"


class SyntheticConfig(_Section):
    duration_s: int = Field(21600, ge=60)
    sessions: int = Field(2, ge=1)
    network_mode: Literal["4G", "5G"] = "5G"
    application: Literal["Downloading", "Streaming"] = "Downloading"
    start_timestamp: float = 1576317600.0
    mean_kbps: float = Field(60000.0, gt=0)
    idle_fraction: float = Field(0.03, ge=0, lt=1)


class PipelineConfig(_Section):
    schema_version: int = CONFIG_SCHEMA_VERSION
    seed: int = 0
    paths: PathsConfig = Field(default_factory=PathsConfig)
    ingest: IngestConfig = Field(default_factory=IngestConfig)
    preprocess: PreprocessConfig = Field(default_factory=PreprocessConfig)
    feature_select: FeatureSelectConfig = Field(default_factory=FeatureSelectConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    search: SearchConfig = Field(default_factory=SearchConfig)
    monitor: MonitorConfig = Field(default_factory=MonitorConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)
    synthetic: SyntheticConfig = Field(default_factory=SyntheticConfig)

    @model_validator(mode="after")
    def _check_search_budget(self):
        if self.search.method == "bayesian" and self.search.budget <= self.search.init_points:
            raise ValueError("search.budget must exceed search.init_points for bayesian search")
        if self.schema_version != CONFIG_SCHEMA_VERSION:
            raise ValueError(f"unsupported config schema_version {self.schema_version}")
        return self


def _set_dotted(raw: Dict[str, Any], dotted_key: str, value: Any) -> None:
    node = raw
    parts = dotted_key.split(".")
    for part in parts[:-1]:
        child = node.get(part)
        if child is None:
            child = {}
            node[part] = child
        if not isinstance(child, dict):
            raise ConfigInvalid(f"cannot override {dotted_key}: {part} is not a section")
        node = child
    node[parts[-1]] = value


def apply_overrides(raw: Dict[str, Any], overrides: Optional[List[str]]) -> Dict[str, Any]:
    """
    Apply KEY=VALUE overrides onto a raw config mapping.

    Values are parsed with the YAML loader, so numbers, booleans and lists
    keep their types ("--set search.budget=5", "--set eval.seeds=[0,1]").
    """
    for item in overrides or []:
        if "=" not in item:
            raise ConfigInvalid(f"override must look like key=value: {item!r}")
        key, text = item.split("=", 1)
        _set_dotted(raw, key.strip(), yaml.safe_load(text))
    return raw


def load_config(path: Optional[str] = None, overrides: Optional[List[str]] = None) -> PipelineConfig:
    """
    Load and validate the pipeline configuration.

    Args:
        path: JSON config file; the bundled pipeline_config.json when None
        overrides: dotted KEY=VALUE strings applied before validation

    Returns:
        Validated PipelineConfig
    """
    config_path = Path(path) if path else DEFAULT_CONFIG_PATH
    raw: Dict[str, Any] = {}
    if config_path.exists():
        try:
            with open(config_path, "r", encoding="utf-8") as file:
                raw = yaml.safe_load(file) or {}
        except yaml.YAMLError as e:
            raise ConfigInvalid(f"cannot parse config {config_path}: {e}") from e
    elif path:
        raise ConfigInvalid(f"config file not found: {config_path}")
    if not isinstance(raw, dict):
        raise ConfigInvalid(f"config root must be an object: {config_path}")
    raw = apply_overrides(raw, overrides)
    try:
        return PipelineConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigInvalid(str(e)) from e


def canonical_json(payload: Any) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def config_hash(config: PipelineConfig) -> str:
    """SHA-256 of the canonical config; output locations do not change results and are left out."""
    payload = config.model_dump(mode="json", exclude={"paths"})
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()


def package_versions() -> Dict[str, str]:
    versions = {"throughput-automl": __version__, "python": sys.version.split()[0]}
    for package in ("numpy", "pandas", "scipy", "pydantic", "PyYAML"):
        try:
            versions[package] = metadata.version(package)
        except metadata.PackageNotFoundError:
            versions[package] = "unknown"
    return versions


_RECORD_FIELDS = set(vars(logging.LogRecord("", 0, "", 0, "", None, None))) | {"message", "asctime"}


class JsonLogFormatter(logging.Formatter):
    """One JSON object per line; ``extra`` fields are carried through."""

    def format(self, record: logging.LogRecord) -> str:
        event = {
            "ts": self.formatTime(record, "%Y-%m-%dT%H:%M:%S"),
            "level": record.levelname,
            "logger": record.name,
            "event": record.getMessage(),
        }
        for key, value in record.__dict__.items():
            if key not in _RECORD_FIELDS and not key.startswith("_"):
                event[key] = value
        if record.exc_info:
            event["exc"] = self.formatException(record.exc_info)
        return json.dumps(event, default=str)


def setup_logging(level: str = "INFO") -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonLogFormatter())
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO), handlers=[handler], force=True)
