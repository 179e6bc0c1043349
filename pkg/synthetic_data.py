"""Synthetic 1 Hz throughput sessions with the same schema as parsed G-NetTrack logs."""
import logging
from typing import List

import numpy as np
from scipy.signal import lfilter

from app_config import SyntheticConfig
from telemetry_ingest import NetworkMode, SessionDataset, SessionState, TelemetryRecord

logger = logging.getLogger(__name__)

AR_COEFFICIENT = 0.97
SESSION_GAP_S = 3600


def _idle_mask(rng: np.random.Generator, n: int, fraction: float) -> np.ndarray:
    """Short idle stretches (5-40 s) covering about ``fraction`` of the session."""
    mask = np.zeros(n, dtype=bool)
    budget = int(fraction * n)
    while budget > 0:
        length = int(min(budget, rng.integers(5, 41)))
        start = int(rng.integers(0, max(1, n - length)))
        mask[start:start + length] = True
        budget -= length
    return mask


def throughput_series(rng: np.random.Generator, timestamps: np.ndarray, mean_kbps: float) -> np.ndarray:
    """Seasonal x AR(1) x noise, strictly positive kbps."""
    hour = (timestamps % 86400.0) / 3600.0
    seasonal = (1.0 + 0.25 * np.sin(2 * np.pi * hour / 24.0)
                + 0.15 * np.sin(2 * np.pi * timestamps / 600.0)
                + 0.08 * np.sin(2 * np.pi * timestamps / 137.0))
    shocks = rng.normal(0.0, 0.04, len(timestamps))
    ar = lfilter([1.0], [1.0, -AR_COEFFICIENT], shocks)
    noise = rng.normal(0.0, 0.03, len(timestamps))
    return np.maximum(mean_kbps * seasonal * np.exp(ar) * (1.0 + noise), 1.0)


def generate_session(rng: np.random.Generator, start: float, duration_s: int, config: SyntheticConfig) -> List[TelemetryRecord]:
    t = start + np.arange(duration_s, dtype=float)
    dl = throughput_series(rng, t, config.mean_kbps)
    quality = np.log(dl / config.mean_kbps)
    idle = _idle_mask(rng, duration_s, config.idle_fraction)
    dl = np.where(idle, 0.0, dl)

    rsrp = -95.0 + 12.0 * quality + rng.normal(0.0, 1.5, duration_s)
    rsrq = -10.0 + 3.0 * quality + rng.normal(0.0, 0.7, duration_s)
    snr = 12.0 + 8.0 * quality + rng.normal(0.0, 1.0, duration_s)
    rssi = rsrp + 20.0 + rng.normal(0.0, 1.0, duration_s)
    cqi = np.clip(np.round(9.0 + 4.0 * quality + rng.normal(0.0, 0.8, duration_s)), 1, 15).astype(int)
    ul = np.maximum(0.05 * dl + rng.normal(0.0, 30.0, duration_s), 0.0)
    ping = np.maximum(25.0 - 6.0 * quality + rng.normal(0.0, 2.0, duration_s), 1.0)
    # a handover roughly every 15 minutes
    cell = np.cumsum(rng.random(duration_s) < 1.0 / 900.0)
    mode = NetworkMode.parse(config.network_mode)
    is_nr = mode is NetworkMode.NR

    records = []
    for i in range(duration_s):
        records.append(TelemetryRecord(
            timestamp=float(t[i]),
            network_mode=mode,
            state=SessionState.IDLE if idle[i] else SessionState.DOWNLOADING,
            dl_bitrate=float(round(dl[i], 3)),
            longitude=-8.4756, latitude=51.8985, speed=0.0,
            operator_name="A",
            node_hex=f"{0x1A2B + int(cell[i]) % 4:X}",
            lac_hex="3E8",
            cell_id=str(19000 + int(cell[i]) % 4),
            cell_id_hex=None, cell_id_raw=None,
            ul_bitrate=float(round(ul[i], 3)),
            ping_avg=float(round(ping[i], 2)),
            ping_min=float(round(ping[i] * 0.8, 2)),
            ping_max=float(round(ping[i] * 1.3, 2)),
            ping_std=float(round(ping[i] * 0.1, 2)),
            ping_loss=0.0,
            cqi=int(cqi[i]),
            snr=float(round(snr[i], 2)),
            rssi=float(round(rssi[i], 2)),
            rsrp=float(round(rsrp[i], 2)),
            rsrq=float(round(rsrq[i], 2)),
            nrx_rsrp=float(round(rsrp[i] + 3.0, 2)) if is_nr else None,
            nrx_rsrq=float(round(rsrq[i] + 1.0, 2)) if is_nr else None,
        ))
    return records


def generate_sessions(config: SyntheticConfig, seed: int = 0) -> SessionDataset:
    """
    Build ``config.sessions`` sessions of about ``duration_s / sessions`` seconds each.

    Sessions are separated by an hour of silence and come back as segments
    of one dataset, as merged log files would.
    """
    rng = np.random.default_rng(seed)
    per_session = config.duration_s // config.sessions
    records: List[TelemetryRecord] = []
    starts = []
    for s in range(config.sessions):
        starts.append(len(records))
        start = config.start_timestamp + s * (per_session + SESSION_GAP_S)
        records.extend(generate_session(rng, start, per_session, config))
    logger.info(f"Generated {len(records)} synthetic records in {config.sessions} sessions")
    return SessionDataset(tuple(records), NetworkMode.parse(config.network_mode).value, config.application,
                          "Static", ("synthetic",), tuple(starts))
