import numpy as np
import pytest

from app_config import PipelineConfig, SyntheticConfig
from synthetic_data import generate_sessions
from telemetry_ingest import NetworkMode, SessionDataset, SessionState, TelemetryRecord

GNETTRACK_HEADER = (
    "Timestamp,Longitude,Latitude,Speed,Operatorname,CellID,NetworkMode,RSRP,RSRQ,SNR,CQI,RSSI,"
    "DL_bitrate,UL_bitrate,State,NRxRSRP,NRxRSRQ,ServingCell_Lon,ServingCell_Lat,ServingCell_Distance,"
    "PINGAVG,PINGMIN,PINGMAX,PINGSTDEV,PINGLOSS"
)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_config() -> PipelineConfig:
    """Pipeline config scaled down so an end-to-end chain trains in seconds."""
    return PipelineConfig.model_validate({
        "synthetic": {"duration_s": 3600, "sessions": 1},
        "feature_select": {"trees": 10, "max_depth": 3},
        "train": {"encoder_units": [8], "decoder_units": [8], "max_epochs": 3, "patience": 2, "batch_size": 64},
        "search": {"budget": 3, "init_points": 2, "epoch_cap": 2, "final_epochs": 2, "final_patience": 2,
                   "candidate_pool": 64, "batch_size": 64,
                   "space": {"encoder_layers": [1, 1], "decoder_layers": [1, 1], "lstm_units": [4, 8],
                             "dense_layers": [0, 1], "dense_units": [4]}},
        "eval": {"period_s": 30.0, "look_back_s": 120.0, "horizon_s": 60.0, "seeds": [0], "baseline_epochs": 2},
        "sweep": {"period_s": 60.0, "look_backs_min": [2, 3], "horizon_min": 2.0, "lookback_fixed_min": 2.0,
                  "horizons_min": [1, 2], "seeds": [0]},
    })


@pytest.fixture
def synthetic_hour() -> SessionDataset:
    return generate_sessions(SyntheticConfig(duration_s=3600, sessions=1), seed=7)


@pytest.fixture
def make_record():
    def factory(t: float, dl: float, mode: NetworkMode = NetworkMode.NR, **extra) -> TelemetryRecord:
        return TelemetryRecord(timestamp=float(t), network_mode=mode, state=SessionState.DOWNLOADING,
                               dl_bitrate=float(dl), **extra)
    return factory


@pytest.fixture
def flat_dataset(make_record) -> SessionDataset:
    """40 minutes at 1 Hz with a constant 1000 kbps throughput."""
    records = tuple(make_record(1_600_000_000 + i, 1000.0, rsrp=-90.0) for i in range(2400))
    return SessionDataset(records, "5G", "Downloading", "Static", ("flat.csv",), (0,))


@pytest.fixture
def gnettrack_csv(tmp_path):
    """A short log with one repeated timestamp, one missing RSRP and an idle row."""
    rows = [
        GNETTRACK_HEADER,
        "2019.12.14_10.00.02,-8.4756,51.8985,0,A,19001,5G,-92,-11,9.0,11,-71,52000,900,D,-89,-10,,,,25.1,20.0,30.2,2.1,0",
        "2019.12.14_10.00.00,-8.4756,51.8985,0,A,19001,5G,-93,-11,8.5,11,-72,50000,880,D,-90,-10,,,,25.0,20.0,30.0,2.0,0",
        "2019.12.14_10.00.01,-8.4756,51.8985,0,A,19001,5G,-,-11,8.7,10,-72,51000,890,D,-90,-10,,,,25.0,20.0,30.1,2.0,0",
        "2019.12.14_10.00.01,-8.4756,51.8985,0,A,19001,5G,-94,-11,8.7,10,-72,51500,890,D,-90,-10,,,,25.0,20.0,30.1,2.0,0",
        "2019.12.14_10.00.03,-8.4756,51.8985,0,A,19002,5G,-95,-12,8.0,9,-73,0,0,I,-91,-11,,,,,,,,",
    ]
    path = tmp_path / "logs" / "B_2019.12.14_10.00.00.csv"
    path.parent.mkdir(parents=True)
    path.write_text("\n".join(rows) + "\n", encoding="utf-8")
    return path
