"""Parse G-NetTrack style telemetry logs into validated session datasets."""
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import yaml

from app_config import DEFAULT_SCHEMA_PATH
from errors import ConfigInvalid, ConflictingTags, EmptyFile, MalformedRow, MissingColumn, MissingTags

logger = logging.getLogger(__name__)

FIELDS: Tuple[str, ...] = (
    "timestamp", "longitude", "latitude", "speed", "operator_name", "network_mode",
    "node_hex", "lac_hex", "cell_id", "cell_id_hex", "cell_id_raw", "state",
    "dl_bitrate", "ul_bitrate", "ping_avg", "ping_min", "ping_max", "ping_std",
    "ping_loss", "cqi", "snr", "rssi", "rsrp", "rsrq", "nrx_rsrp", "nrx_rsrq",
)
MANDATORY_FIELDS = ("timestamp", "network_mode", "state", "dl_bitrate")
CATEGORICAL_FIELDS = (
    "operator_name", "network_mode", "node_hex", "lac_hex",
    "cell_id", "cell_id_hex", "cell_id_raw", "state",
)
NON_NEGATIVE_FIELDS = ("dl_bitrate", "ul_bitrate", "ping_avg", "ping_min", "ping_max", "ping_std", "ping_loss", "speed")
NUMERIC_FIELDS = tuple(f for f in FIELDS if f not in CATEGORICAL_FIELDS and f != "timestamp")
CANONICAL_SCHEMA: Dict[str, str] = {name: name for name in FIELDS}
MISSING_MARKERS = ("", "-")
GNETTRACK_TIME_FORMAT = "%Y.%m.%d_%H.%M.%S"


class NetworkMode(str, Enum):
    LTE = "4G"
    NR = "5G"
    OTHER = "other"

    @classmethod
    def parse(cls, text: str) -> "NetworkMode":
        key = text.strip().upper()
        if key in ("4G", "LTE"):
            return cls.LTE
        if key in ("5G", "NR"):
            return cls.NR
        return cls.OTHER


class SessionState(str, Enum):
    IDLE = "Idle"
    DOWNLOADING = "Downloading"


_STATE_CODES = {"I": SessionState.IDLE, "D": SessionState.DOWNLOADING,
                "IDLE": SessionState.IDLE, "DOWNLOADING": SessionState.DOWNLOADING}


@dataclass(frozen=True)
class TelemetryRecord:
    """One timestamped telemetry sample. Optional metrics are None when missing."""
    timestamp: float
    network_mode: NetworkMode
    state: SessionState
    dl_bitrate: float
    longitude: Optional[float] = None
    latitude: Optional[float] = None
    speed: Optional[float] = None
    operator_name: Optional[str] = None
    node_hex: Optional[str] = None
    lac_hex: Optional[str] = None
    cell_id: Optional[str] = None
    cell_id_hex: Optional[str] = None
    cell_id_raw: Optional[str] = None
    ul_bitrate: Optional[float] = None
    ping_avg: Optional[float] = None
    ping_min: Optional[float] = None
    ping_max: Optional[float] = None
    ping_std: Optional[float] = None
    ping_loss: Optional[float] = None
    cqi: Optional[int] = None
    snr: Optional[float] = None
    rssi: Optional[float] = None
    rsrp: Optional[float] = None
    rsrq: Optional[float] = None
    nrx_rsrp: Optional[float] = None
    nrx_rsrq: Optional[float] = None


@dataclass(frozen=True)
class SessionTags:
    network_mode: Optional[str] = None
    application: Optional[str] = None
    mobility: Optional[str] = None


@dataclass(frozen=True)
class SessionDataset:
    """
    Ordered telemetry records of one network mode and application.

    segment_starts holds the record index where each contiguous measurement
    run begins; timestamps are non-decreasing within a segment.
    """
    records: Tuple[TelemetryRecord, ...]
    network_mode: Optional[str]
    application: Optional[str]
    mobility: Optional[str]
    source_files: Tuple[str, ...] = ()
    segment_starts: Tuple[int, ...] = (0,)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def tag(self) -> str:
        return f"{self.network_mode}_{self.application}"

    @property
    def time_span_seconds(self) -> float:
        if not self.records:
            return 0.0
        return self.records[-1].timestamp - self.records[0].timestamp

    def segments(self) -> List[Tuple[int, int]]:
        """(start, stop) record index ranges of each contiguous segment."""
        if not self.records:
            return []
        bounds = list(self.segment_starts) + [len(self.records)]
        return [(bounds[i], bounds[i + 1]) for i in range(len(bounds) - 1) if bounds[i + 1] > bounds[i]]


def load_schema(path: Optional[str] = None) -> Dict[str, str]:
    schema_path = Path(path) if path else DEFAULT_SCHEMA_PATH
    try:
        with open(schema_path, "r", encoding="utf-8") as file:
            schema = yaml.safe_load(file) or {}
    except OSError as e:
        raise ConfigInvalid(f"cannot read column schema {schema_path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigInvalid(f"cannot parse column schema {schema_path}: {e}") from e
    if not isinstance(schema, dict):
        raise ConfigInvalid(f"column schema must map field names to headers: {schema_path}")
    unknown = set(schema) - set(FIELDS)
    if unknown:
        raise ConfigInvalid(f"column schema names unknown fields: {sorted(unknown)}")
    for name in MANDATORY_FIELDS:
        if name not in schema:
            raise ConfigInvalid(f"column schema lacks mandatory field {name}")
    return {str(k): str(v) for k, v in schema.items()}


def infer_tags(path: str) -> SessionTags:
    """Guess network mode, application and mobility from directory and file names."""
    mode = application = mobility = None
    for part in Path(path).parts:
        lower = part.lower()
        if mode is None and "5g" in lower:
            mode = "5G"
        elif mode is None and "4g" in lower:
            mode = "4G"
        if application is None and "download" in lower:
            application = "Downloading"
        elif application is None and any(k in lower for k in ("netflix", "amazon", "prime", "stream")):
            application = "Streaming"
        if mobility is None and "static" in lower:
            mobility = "Static"
        elif mobility is None and any(k in lower for k in ("driving", "car", "bus", "train")):
            mobility = "Driving"
    return SessionTags(mode, application, mobility)


def _is_missing(cell: str) -> bool:
    return cell.strip() in MISSING_MARKERS


def _parse_float(cell: str, name: str, line: int) -> Optional[float]:
    if _is_missing(cell):
        return None
    try:
        value = float(cell)
    except ValueError:
        raise MalformedRow(line, f"{name} not numeric")
    if not math.isfinite(value):
        raise MalformedRow(line, f"{name} not finite")
    if name in NON_NEGATIVE_FIELDS and value < 0:
        raise MalformedRow(line, f"{name} negative")
    return value


def _parse_int(cell: str, name: str, line: int) -> Optional[int]:
    value = _parse_float(cell, name, line)
    if value is None:
        return None
    if not float(value).is_integer():
        raise MalformedRow(line, f"{name} not an integer")
    return int(value)


def _parse_timestamp(cell: str, line: int) -> float:
    text = cell.strip()
    if not text or text == "-":
        raise MalformedRow(line, "timestamp missing")
    try:
        return float(text)
    except ValueError:
        pass
    try:
        return datetime.strptime(text, GNETTRACK_TIME_FORMAT).replace(tzinfo=timezone.utc).timestamp()
    except ValueError:
        raise MalformedRow(line, "timestamp not parseable")


def _parse_row(cells: Dict[str, str], line: int) -> TelemetryRecord:
    state_text = cells["state"].strip().upper()
    if state_text not in _STATE_CODES:
        raise MalformedRow(line, f"state {cells['state']!r} not in I/D")
    if _is_missing(cells["network_mode"]):
        raise MalformedRow(line, "network_mode missing")
    dl_bitrate = _parse_float(cells["dl_bitrate"], "dl_bitrate", line)
    if dl_bitrate is None:
        raise MalformedRow(line, "dl_bitrate missing")

    values: Dict[str, Any] = {
        "timestamp": _parse_timestamp(cells["timestamp"], line),
        "network_mode": NetworkMode.parse(cells["network_mode"]),
        "state": _STATE_CODES[state_text],
        "dl_bitrate": dl_bitrate,
    }
    for name in CATEGORICAL_FIELDS:
        if name in values:
            continue
        cell = cells.get(name, "")
        values[name] = None if _is_missing(cell) else cell.strip()
    for name in NUMERIC_FIELDS:
        if name in values:
            continue
        cell = cells.get(name, "")
        values[name] = _parse_int(cell, name, line) if name == "cqi" else _parse_float(cell, name, line)
    return TelemetryRecord(**values)


def _order_and_dedupe(records: List[TelemetryRecord], source: str) -> List[TelemetryRecord]:
    # stable sort keeps file order among equal timestamps, so the last row wins below
    ordered = sorted(records, key=lambda r: r.timestamp)
    if ordered != records:
        logger.warning(f"{source}: rows out of timestamp order, sorted")
    kept: List[TelemetryRecord] = []
    for record in ordered:
        if kept and kept[-1].timestamp == record.timestamp:
            kept[-1] = record
        else:
            kept.append(record)
    if len(kept) != len(ordered):
        logger.warning(f"{source}: dropped {len(ordered) - len(kept)} duplicate timestamps (kept last row)")
    return kept


def parse_csv(path: str, schema: Optional[Dict[str, str]] = None, tags: Optional[SessionTags] = None) -> SessionDataset:
    """
    Parse one telemetry CSV log.

    Args:
        path: CSV file, comma separated, header row first, UTF-8
        schema: canonical field -> header name; column_schema.yaml when None
        tags: session tags; inferred from the path when None

    Returns:
        SessionDataset with one record per data row
    """
    schema = schema or load_schema()
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError:
        raise EmptyFile(f"{path}: no header or data rows")
    frame.columns = [str(c).strip() for c in frame.columns]
    for name in MANDATORY_FIELDS:
        header = schema.get(name, name)
        if header not in frame.columns:
            raise MissingColumn(header)
    if frame.empty:
        raise EmptyFile(f"{path}: header only, no data rows")

    columns = {name: frame[header].tolist() for name, header in schema.items() if header in frame.columns}
    for name in MANDATORY_FIELDS:
        if name not in columns:
            columns[name] = frame[name].tolist()
    records = []
    for i in range(len(frame)):
        cells = {name: column[i] for name, column in columns.items()}
        records.append(_parse_row(cells, line=i + 2))
    records = _order_and_dedupe(records, str(path))

    tags = tags or infer_tags(str(path))
    mode = tags.network_mode
    if mode is None:
        observed = sorted({r.network_mode.value for r in records})
        if len(observed) > 1:
            raise ConflictingTags(f"{path}: rows claim network modes {observed} and no session tag was given")
        mode = observed[0]
    logger.info(f"Parsed {len(records)} records from {path} ({mode}, {tags.application}, {tags.mobility})")
    return SessionDataset(tuple(records), mode, tags.application, tags.mobility, (str(path),), (0,))


def discover_csv(data_dir: str) -> List[str]:
    return sorted(str(p) for p in Path(data_dir).rglob("*.csv"))


def parse_many(paths: Sequence[str], schema: Optional[Dict[str, str]] = None, max_workers: int = 4) -> List[SessionDataset]:
    """Parse files in parallel; results come back ordered by file path."""
    schema = schema or load_schema()
    ordered = sorted(paths)
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(lambda p: parse_csv(p, schema), ordered))


def partition(datasets: Iterable[SessionDataset]) -> Dict[Tuple[str, str], SessionDataset]:
    """
    Merge sessions into one dataset per (network_mode, application).

    Static and driving runs are concatenated in file-path order; each input
    session stays its own segment, so no record is dropped or duplicated.
    """
    file_modes: Dict[str, str] = {}
    groups: Dict[Tuple[str, str], List[SessionDataset]] = {}
    for ds in sorted(datasets, key=lambda d: d.source_files):
        if ds.network_mode is None or ds.application is None:
            raise MissingTags(f"dataset from {list(ds.source_files)} lacks mode/application tags")
        for source in ds.source_files:
            claimed = file_modes.setdefault(source, ds.network_mode)
            if claimed != ds.network_mode:
                raise ConflictingTags(f"{source} claims both {claimed} and {ds.network_mode}")
        groups.setdefault((ds.network_mode, ds.application), []).append(ds)

    merged: Dict[Tuple[str, str], SessionDataset] = {}
    for key in sorted(groups):
        records: List[TelemetryRecord] = []
        starts: List[int] = []
        sources: List[str] = []
        for ds in groups[key]:
            starts.extend(len(records) + s for s, _ in ds.segments())
            records.extend(ds.records)
            sources.extend(ds.source_files)
        merged[key] = SessionDataset(tuple(records), key[0], key[1], "Merged", tuple(sources), tuple(starts) or (0,))
        logger.info(f"Merged {len(groups[key])} sessions into {key[0]}/{key[1]}: {len(records)} records")
    return merged


def resample_uniform(ds: SessionDataset, period: float = 1.0, max_gap: float = 30.0) -> SessionDataset:
    """
    Put every segment on a regular time grid by last observation carried forward.

    Gaps longer than max_gap split a segment in two. The grid of each run
    extends to the first point at or past its last sample, so a trailing
    sample inside a partial period is carried onto that point.
    """
    if period <= 0:
        raise ValueError("period must be positive")
    if not ds.records:
        return ds
    out: List[TelemetryRecord] = []
    starts: List[int] = []
    for begin, end in ds.segments():
        segment = ds.records[begin:end]
        times = np.array([r.timestamp for r in segment])
        cuts = np.flatnonzero(np.diff(times) > max_gap) + 1
        for run_begin, run_end in zip(np.r_[0, cuts], np.r_[cuts, len(segment)]):
            run_times = times[run_begin:run_end]
            t0 = run_times[0]
            steps = int(math.ceil((run_times[-1] - t0) / period - 1e-9)) + 1
            grid = t0 + np.arange(steps) * period
            picks = np.searchsorted(run_times, grid + 1e-9 * period, side="right") - 1
            starts.append(len(out))
            for g, pick in zip(grid, picks):
                record = segment[run_begin + int(pick)]
                out.append(record if record.timestamp == g else replace(record, timestamp=float(g)))
    return replace(ds, records=tuple(out), segment_starts=tuple(starts))


def subset(ds: SessionDataset, begin: int, end: int) -> SessionDataset:
    """Records [begin, end) with segment starts re-based onto the slice."""
    begin, end = max(0, begin), min(len(ds), end)
    starts = sorted({0} | {s - begin for s in ds.segment_starts if begin < s < end})
    return replace(ds, records=ds.records[begin:end], segment_starts=tuple(starts))


def _format_cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, SessionState):
        return "I" if value is SessionState.IDLE else "D"
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(ds: SessionDataset, path: str) -> None:
    """Write the canonical CSV (fixed column order, canonical header names)."""
    rows = [[_format_cell(getattr(r, name)) for name in FIELDS] for r in ds.records]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows, columns=list(FIELDS)).to_csv(path, index=False, lineterminator="\n")


def sidecar(ds: SessionDataset, **extra: Any) -> Dict[str, Any]:
    payload = {
        "record_count": len(ds),
        "time_span_seconds": ds.time_span_seconds,
        "mode": ds.network_mode,
        "application": ds.application,
        "mobility": ds.mobility,
        "segment_starts": list(ds.segment_starts),
        "source_files": list(ds.source_files),
    }
    payload.update(extra)
    return payload


def write_dataset(ds: SessionDataset, csv_path: str, **extra: Any) -> str:
    """Canonical CSV plus its JSON sidecar; returns the sidecar path."""
    write_csv(ds, csv_path)
    sidecar_path = str(Path(csv_path).with_suffix(".json"))
    with open(sidecar_path, "w", encoding="utf-8") as file:
        json.dump(sidecar(ds, **extra), file, indent=2, sort_keys=True)
    return sidecar_path


def read_dataset(csv_path: str) -> Tuple[SessionDataset, Dict[str, Any]]:
    """Reload a canonical CSV written by write_dataset, with tags and segments from its sidecar."""
    with open(Path(csv_path).with_suffix(".json"), "r", encoding="utf-8") as file:
        meta = json.load(file)
    tags = SessionTags(meta.get("mode"), meta.get("application"), meta.get("mobility"))
    # canonical CSVs are already ordered and deduplicated per segment; keep rows as written
    frame = pd.read_csv(csv_path, dtype=str, keep_default_na=False, encoding="utf-8")
    columns = {name: frame[name].tolist() for name in FIELDS if name in frame.columns}
    records = tuple(_parse_row({n: c[i] for n, c in columns.items()}, i + 2) for i in range(len(frame)))
    ds = SessionDataset(records, tags.network_mode, tags.application, tags.mobility,
                        tuple(meta.get("source_files", [])), tuple(meta.get("segment_starts", [0])))
    return ds, meta


def to_frame(ds: SessionDataset) -> pd.DataFrame:
    """Column view of a dataset: NaN for missing numerics, None for missing categories."""
    data: Dict[str, list] = {name: [] for name in FIELDS}
    for record in ds.records:
        for name in FIELDS:
            value = getattr(record, name)
            if isinstance(value, Enum):
                value = value.value
            data[name].append(value)
    frame = pd.DataFrame(data, columns=list(FIELDS))
    for name in ("timestamp",) + NUMERIC_FIELDS:
        frame[name] = pd.to_numeric(frame[name], errors="coerce").astype(float)
    segment = np.zeros(len(ds), dtype=int)
    for i, (begin, end) in enumerate(ds.segments()):
        segment[begin:end] = i
    frame["segment"] = segment
    return frame
