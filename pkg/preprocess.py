"""Reversible cleaning transforms: categorical/timestamp encoding, imputation, normalization."""
import hashlib
import json
import logging
from typing import Dict, List, Literal, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from app_config import PreprocessConfig
from errors import AllMissing, TargetEncodingWithoutTarget, UnknownColumn
from telemetry_ingest import NUMERIC_FIELDS

logger = logging.getLogger(__name__)

PLAN_VERSION = 1
MISSING_CATEGORY = "__missing__"
TIMESTAMP_FEATURES = ("hour_sin", "hour_cos", "dow_sin", "dow_cos")
SECONDS_PER_DAY = 86400.0
IMPUTE_METHODS = ("zero", "mean", "median", "forward_fill", "backward_fill")


def encode_timestamps(timestamps: Sequence[float]) -> np.ndarray:
    """(sin, cos) of the hour-of-day angle and of the day-of-week angle, UTC."""
    t = np.asarray(timestamps, dtype=float)
    hour_angle = 2.0 * np.pi * np.mod(t, SECONDS_PER_DAY) / SECONDS_PER_DAY
    # 1970-01-01 was a Thursday; Monday is day 0
    day_of_week = np.mod(np.floor(t / SECONDS_PER_DAY) + 3.0, 7.0)
    day_angle = 2.0 * np.pi * day_of_week / 7.0
    return np.column_stack([np.sin(hour_angle), np.cos(hour_angle), np.sin(day_angle), np.cos(day_angle)])


def encode_timestamp(t: float) -> np.ndarray:
    return encode_timestamps([t])[0]


def _category_keys(values: pd.Series) -> List[str]:
    return [MISSING_CATEGORY if pd.isna(v) else str(v) for v in values]


class CategoricalEncoder(BaseModel):
    column: str
    kind: Literal["label", "onehot", "target"]
    categories: List[str]
    target_means: Dict[str, float] = Field(default_factory=dict)
    global_mean: Optional[float] = None

    def output_columns(self) -> List[str]:
        if self.kind == "onehot":
            return [f"{self.column}={c}" for c in self.categories]
        return [self.column]

    def encode(self, values: pd.Series) -> pd.DataFrame:
        keys = _category_keys(values)
        if self.kind == "label":
            codes = {c: i for i, c in enumerate(self.categories)}
            data = {self.column: [float(codes.get(k, -1)) for k in keys]}
        elif self.kind == "onehot":
            data = {name: [1.0 if k == c else 0.0 for k in keys] for name, c in zip(self.output_columns(), self.categories)}
        else:
            data = {self.column: [self.target_means.get(k, self.global_mean) for k in keys]}
        return pd.DataFrame(data, index=values.index, dtype=float)

    def decode_labels(self, codes: Sequence[float]) -> List[Optional[str]]:
        """Inverse of label encoding; unseen (-1) maps back to None."""
        out = []
        for code in codes:
            i = int(round(code))
            out.append(self.categories[i] if 0 <= i < len(self.categories) else None)
        return out


def fit_encoder(values: pd.Series, kind: str, target: Optional[pd.Series] = None) -> CategoricalEncoder:
    keys = _category_keys(values)
    categories = list(dict.fromkeys(keys))
    if kind != "target":
        return CategoricalEncoder(column=str(values.name), kind=kind, categories=categories)
    if target is None:
        raise TargetEncodingWithoutTarget(f"target encoding of {values.name} needs the target column")
    grouped = pd.Series(np.asarray(target, dtype=float), index=keys).groupby(level=0, sort=False).mean()
    return CategoricalEncoder(
        column=str(values.name),
        kind="target",
        categories=categories,
        target_means={str(k): float(v) for k, v in grouped.items()},
        global_mean=float(np.nanmean(np.asarray(target, dtype=float))),
    )


def fit_encoders(frame: pd.DataFrame, policy: Dict[str, str], target: Optional[str] = None) -> Dict[str, CategoricalEncoder]:
    """
    Fit one encoder per categorical column named in policy.

    Label codes follow first appearance; one-hot keeps one indicator per
    observed category; target encoding stores the per-category target mean.
    """
    encoders = {}
    for column, kind in policy.items():
        if column not in frame.columns:
            raise UnknownColumn(f"encoding policy names unknown column {column}")
        target_values = None
        if kind == "target":
            if target is None or target not in frame.columns:
                raise TargetEncodingWithoutTarget(f"target encoding of {column} needs the target column")
            target_values = frame[target]
        encoders[column] = fit_encoder(frame[column], kind, target_values)
    return encoders


def impute(values: Sequence[float], method: str, fill_value: Optional[float] = None) -> np.ndarray:
    """
    Replace missing (NaN) entries.

    forward_fill falls back to zero for a leading missing run, backward_fill
    for a trailing one. mean/median use fill_value when given (statistics
    fitted on the training split), else the present values of this column.
    """
    series = pd.Series(np.asarray(values, dtype=float))
    if method == "zero":
        return series.fillna(0.0).to_numpy()
    if method in ("mean", "median"):
        if fill_value is None:
            present = series.dropna()
            if present.empty:
                raise AllMissing(f"{method} imputation of a fully missing column")
            fill_value = float(present.mean() if method == "mean" else present.median())
        return series.fillna(fill_value).to_numpy()
    if method == "forward_fill":
        return series.ffill().fillna(0.0).to_numpy()
    if method == "backward_fill":
        return series.bfill().fillna(0.0).to_numpy()
    raise ValueError(f"unknown imputation method {method}")


class ImputeRule(BaseModel):
    method: Literal["zero", "mean", "median", "forward_fill", "backward_fill"]
    fill_value: Optional[float] = None


class NormalizerParams(BaseModel):
    kind: Literal["zscore", "minmax", "none"]
    mean: float = 0.0
    std: float = 1.0
    lo: float = 0.0
    hi: float = 1.0
    degenerate: bool = False
    clip: bool = True

    def apply(self, values: Sequence[float]) -> np.ndarray:
        x = np.asarray(values, dtype=float)
        if self.kind == "none":
            return x.copy()
        if self.degenerate:
            return np.zeros_like(x)
        if self.kind == "zscore":
            return (x - self.mean) / self.std
        scaled = (x - self.lo) / (self.hi - self.lo)
        return np.clip(scaled, 0.0, 1.0) if self.clip else scaled

    def invert(self, values: Sequence[float]) -> np.ndarray:
        y = np.asarray(values, dtype=float)
        if self.kind == "none":
            return y.copy()
        if self.kind == "zscore":
            return np.full_like(y, self.mean) if self.degenerate else y * self.std + self.mean
        return np.full_like(y, self.lo) if self.degenerate else y * (self.hi - self.lo) + self.lo

    @property
    def scale(self) -> float:
        """Multiplier from normalized units back to original units."""
        if self.kind == "zscore":
            return self.std
        if self.kind == "minmax":
            return self.hi - self.lo
        return 1.0


def fit_normalizer(values: Sequence[float], kind: str, clip: bool = True, name: str = "") -> NormalizerParams:
    """
    Fit z-score (population std) or min-max statistics.

    A constant column is flagged degenerate and maps to zeros.
    """
    x = np.asarray(values, dtype=float)
    if kind == "none":
        return NormalizerParams(kind="none", clip=clip)
    if kind == "zscore":
        mean, std = float(np.mean(x)), float(np.std(x))
        degenerate = std == 0.0
        params = NormalizerParams(kind="zscore", mean=mean, std=std if not degenerate else 1.0,
                                  degenerate=degenerate, clip=clip)
    elif kind == "minmax":
        lo, hi = float(np.min(x)), float(np.max(x))
        degenerate = hi == lo
        params = NormalizerParams(kind="minmax", lo=lo, hi=hi if not degenerate else lo + 1.0,
                                  degenerate=degenerate, clip=clip)
    else:
        raise ValueError(f"unknown normalization {kind}")
    if params.degenerate:
        logger.warning(f"DegenerateColumn: {name or 'column'} is constant, normalized to zeros")
    return params


def frame_fingerprint(frame: pd.DataFrame) -> str:
    hashed = pd.util.hash_pandas_object(frame, index=True).to_numpy()
    return hashlib.sha256(hashed.tobytes()).hexdigest()


class PreprocessPlan(BaseModel):
    version: int = PLAN_VERSION
    target: str
    encode_timestamp: bool = True
    encoders: Dict[str, CategoricalEncoder] = Field(default_factory=dict)
    imputation: Dict[str, ImputeRule] = Field(default_factory=dict)
    normalizers: Dict[str, NormalizerParams] = Field(default_factory=dict)
    feature_columns: List[str] = Field(default_factory=list)
    fitted_on: str = ""

    @property
    def degenerate_columns(self) -> List[str]:
        return [c for c, n in self.normalizers.items() if n.degenerate]

    def encode(self, frame: pd.DataFrame) -> pd.DataFrame:
        """Encoding and imputation without normalization."""
        parts = []
        if self.encode_timestamp:
            parts.append(pd.DataFrame(encode_timestamps(frame["timestamp"]), columns=list(TIMESTAMP_FEATURES),
                                      index=frame.index))
        for column, encoder in self.encoders.items():
            parts.append(encoder.encode(frame[column]))
        for column, rule in self.imputation.items():
            values = frame[column] if column in frame.columns else pd.Series(np.nan, index=frame.index)
            parts.append(pd.DataFrame({column: impute(values, rule.method, rule.fill_value)}, index=frame.index))
        return pd.concat(parts, axis=1)

    def transform(self, frame: pd.DataFrame) -> pd.DataFrame:
        """Apply the fitted plan; never refits."""
        encoded = self.encode(frame)
        columns = self.feature_columns or list(encoded.columns)
        out = {c: self.normalizers[c].apply(encoded[c]) if c in self.normalizers else encoded[c].to_numpy()
               for c in columns}
        return pd.DataFrame(out, index=frame.index, columns=columns)

    def inverse_target(self, values: Sequence[float]) -> np.ndarray:
        return self.normalizers[self.target].invert(values)

    def target_normalizer(self) -> NormalizerParams:
        return self.normalizers[self.target]


def fit_plan(frame: pd.DataFrame, policy: PreprocessConfig) -> PreprocessPlan:
    """
    Fit the complete plan on a training frame.

    Args:
        frame: training rows only (see fit_plan_on_split)
        policy: per-column encoding and imputation choices, normalization kind

    Returns:
        PreprocessPlan whose statistics come from frame alone
    """
    if policy.target not in frame.columns:
        raise UnknownColumn(f"target column {policy.target} not in data")
    dropped = set(policy.drop_columns)
    encoders = fit_encoders(frame, {c: k for c, k in policy.encodings.items() if c not in dropped}, policy.target)

    imputation: Dict[str, ImputeRule] = {}
    for column in NUMERIC_FIELDS:
        if column in dropped or column not in frame.columns:
            continue
        method = policy.imputation.get(column, policy.default_imputation)
        fill_value = None
        if method in ("mean", "median"):
            present = frame[column].dropna()
            if present.empty:
                raise AllMissing(f"{method} imputation of fully missing column {column}")
            fill_value = float(present.mean() if method == "mean" else present.median())
        imputation[column] = ImputeRule(method=method, fill_value=fill_value)

    plan = PreprocessPlan(target=policy.target, encode_timestamp="timestamp" not in dropped,
                          encoders=encoders, imputation=imputation)
    encoded = plan.encode(frame)
    plan.normalizers = {c: fit_normalizer(encoded[c], policy.normalization, policy.clip_minmax, name=c)
                        for c in encoded.columns}
    plan.feature_columns = list(encoded.columns)
    plan.fitted_on = frame_fingerprint(frame)
    logger.info(f"Fitted preprocess plan: {len(plan.feature_columns)} columns, "
                f"{len(plan.degenerate_columns)} degenerate")
    return plan


def train_rows(n_rows: int, split: Sequence[float]) -> int:
    return max(1, int(np.floor(n_rows * split[0])))


def fit_plan_on_split(frame: pd.DataFrame, policy: PreprocessConfig) -> PreprocessPlan:
    """Fit on the chronologically first training fraction; later rows are never read."""
    return fit_plan(frame.iloc[:train_rows(len(frame), policy.split)], policy)


def save_plan(plan: PreprocessPlan, path: str, config_hash: str = "") -> None:
    payload = plan.model_dump(mode="json")
    if config_hash:
        payload["config_hash"] = config_hash
    with open(path, "w", encoding="utf-8") as file:
        json.dump(payload, file, indent=2)


def load_plan(path: str) -> PreprocessPlan:
    with open(path, "r", encoding="utf-8") as file:
        payload = json.load(file)
    payload.pop("config_hash", None)
    return PreprocessPlan.model_validate(payload)
