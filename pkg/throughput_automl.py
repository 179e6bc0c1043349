"""
Command-line front end for the throughput forecasting pipeline.

Each subcommand runs one stage, reads its upstream artifacts from the
artifacts directory, writes its own artifacts plus a run manifest, and is
recorded in the run registry. Logs go to stderr as JSON lines.
"""
import argparse
import json
import logging
import re
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import ValidationError

from app_config import (
    CONFIG_SCHEMA_VERSION,
    InjectConfig,
    PipelineConfig,
    __version__,
    config_hash,
    load_config,
    package_versions,
    setup_logging,
)
from automl_search import run_pipeline_search
from drift_monitor import DriftMonitorState, MonitorStream, inject_drift, measure_baseline, run_monitor
from errors import ArtifactMismatch, ConfigInvalid, MissingArtifact, PipelineError, StoreError
from eval_report import (
    EvalSeries,
    compare_models,
    evaluate_forecaster,
    fixed_spec,
    steps_from_seconds,
    sweep_horizon,
    sweep_lookback,
    windows_for,
    write_dat,
)
from feature_select import FeatureReport, select_features
from neural_core import NeuralForecaster, TrainHyperparams, TrainingData, load_model, save_model, train
from preprocess import PreprocessPlan, fit_plan_on_split, frame_fingerprint, load_plan, save_plan, train_rows
from run_store import RunStore
from synthetic_data import generate_sessions
from telemetry_ingest import (
    SessionDataset,
    discover_csv,
    load_schema,
    parse_many,
    partition,
    read_dataset,
    resample_uniform,
    subset,
    to_frame,
    write_dataset,
)

logger = logging.getLogger(__name__)

_DURATION = re.compile(r"^\s*([0-9]*\.?[0-9]+)\s*([smh]?)\s*$")
_UNITS = {"": 1.0, "s": 1.0, "m": 60.0, "h": 3600.0}


@dataclass
class RunContext:
    config: PipelineConfig
    config_hash: str
    out: Path
    force: bool
    options: Dict[str, Any]

    def path(self, *parts: str) -> Path:
        return self.out.joinpath(*parts)

    @property
    def dataset_path(self) -> Path:
        return self.path("datasets", f"{self.config.ingest.dataset}.csv")


def parse_duration(text: str) -> float:
    """'14m' -> 840.0; bare numbers are seconds."""
    match = _DURATION.match(text)
    if not match:
        raise ConfigInvalid(f"cannot parse duration {text!r}")
    return float(match.group(1)) * _UNITS[match.group(2)]


def parse_inject(text: str) -> InjectConfig:
    """Parse 'scale=0.5,start=14m,len=10m' (or offset=VALUE)."""
    fields: Dict[str, Any] = {}
    for item in text.split(","):
        if "=" not in item:
            raise ConfigInvalid(f"--inject item must be key=value: {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        if key in ("scale", "offset"):
            try:
                fields["kind"], fields["value"] = key, float(value)
            except ValueError as e:
                raise ConfigInvalid(f"--inject {key} must be a number, got {value!r}") from e
        elif key == "start":
            fields["start_s"] = parse_duration(value)
        elif key in ("len", "length"):
            fields["length_s"] = parse_duration(value)
        else:
            raise ConfigInvalid(f"unknown --inject key {key!r}")
    try:
        return InjectConfig(**fields)
    except ValidationError as e:
        raise ConfigInvalid(f"invalid --inject {text!r}: {e}") from e


def _write_json(path: Path, payload: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as file:
        json.dump(payload, file, indent=2, sort_keys=True)


def _read_json(path: Path) -> Any:
    with open(path, "r", encoding="utf-8") as file:
        return json.load(file)


def _require(ctx: RunContext, producer: str, *paths: Path) -> None:
    """Upstream artifacts must exist and come from the same config, unless --force."""
    for path in paths:
        if not path.exists():
            raise MissingArtifact(f"{path} not found; run `{producer}` first")
    manifest = ctx.path(f"{producer}_manifest.json")
    if not manifest.exists():
        raise MissingArtifact(f"{manifest} not found; run `{producer}` first")
    _check_hash(ctx, _read_json(manifest).get("config_hash"), producer)


def _check_hash(ctx: RunContext, upstream_hash: Optional[str], what: str) -> None:
    if upstream_hash == ctx.config_hash:
        return
    if ctx.force:
        logger.warning(f"Using {what} output from config {upstream_hash} under --force")
        return
    raise ArtifactMismatch(f"{what} output was produced with config {upstream_hash}, current is {ctx.config_hash}; "
                           f"rerun it or pass --force")


def _load_features(ctx: RunContext) -> Tuple[pd.DataFrame, PreprocessPlan]:
    _require(ctx, "preprocess", ctx.path("features.csv"), ctx.path("plan.json"))
    return pd.read_csv(ctx.path("features.csv")), load_plan(str(ctx.path("plan.json")))


def _load_series(ctx: RunContext) -> Tuple[EvalSeries, PreprocessPlan, FeatureReport]:
    features, plan = _load_features(ctx)
    _require(ctx, "select-features", ctx.path("feature_report.json"))
    report = FeatureReport.model_validate(_read_json(ctx.path("feature_report.json")))
    series = EvalSeries.from_frame(features, report.model_inputs, plan.target, ctx.config.ingest.resample_period_s)
    return series, plan, report


def _eval_windows(ctx: RunContext, series: EvalSeries):
    series = series.at_period(ctx.config.eval.period_s)
    return windows_for(series, ctx.config.eval.look_back_s, ctx.config.eval.horizon_s, ctx.config.preprocess.split)


# --- commands ---------------------------------------------------------------

def cmd_ingest(args, ctx: RunContext) -> Dict[str, str]:
    cfg = ctx.config
    if cfg.ingest.source == "synthetic" or args.synthetic:
        datasets = {(cfg.synthetic.network_mode, cfg.synthetic.application): generate_sessions(cfg.synthetic, cfg.seed)}
    else:
        paths = discover_csv(cfg.paths.data_dir)
        if not paths:
            raise MissingArtifact(f"no CSV logs under {cfg.paths.data_dir}")
        schema = load_schema(cfg.ingest.schema_path)
        datasets = partition(parse_many(paths, schema, cfg.ingest.max_workers))
    artifacts = {}
    for (mode, application), ds in datasets.items():
        ds = resample_uniform(ds, cfg.ingest.resample_period_s, cfg.ingest.max_gap_s)
        csv_path = ctx.path("datasets", f"{mode}_{application}.csv")
        write_dataset(ds, str(csv_path), config_hash=ctx.config_hash)
        artifacts[f"{mode}_{application}"] = str(csv_path)
    return artifacts


def cmd_preprocess(args, ctx: RunContext) -> Dict[str, str]:
    _require(ctx, "ingest", ctx.dataset_path)
    ds, _ = read_dataset(str(ctx.dataset_path))
    frame = to_frame(ds)
    plan = fit_plan_on_split(frame, ctx.config.preprocess)
    features = plan.transform(frame)
    features["segment"] = frame["segment"].to_numpy()
    features["timestamp"] = frame["timestamp"].to_numpy()
    save_plan(plan, str(ctx.path("plan.json")), ctx.config_hash)
    features.to_csv(ctx.path("features.csv"), index=False, lineterminator="\n")
    _write_json(ctx.path("features.json"), {"rows": len(features), "columns": plan.feature_columns,
                                            "degenerate_columns": plan.degenerate_columns,
                                            "fingerprint": frame_fingerprint(features),
                                            "config_hash": ctx.config_hash})
    return {"plan": str(ctx.path("plan.json")), "features": str(ctx.path("features.csv"))}


def cmd_select_features(args, ctx: RunContext) -> Dict[str, str]:
    features, plan = _load_features(ctx)
    rows = features.iloc[:train_rows(len(features), ctx.config.preprocess.split)]
    report = select_features(rows[plan.feature_columns], plan.target, ctx.config.feature_select, ctx.config.seed)
    _write_json(ctx.path("feature_report.json"), {**report.model_dump(mode="json"), "config_hash": ctx.config_hash})
    logger.info(f"Feature ranking:\n{report.ranked_table()}")
    return {"feature_report": str(ctx.path("feature_report.json"))}


def _save(ctx: RunContext, spec, weights, plan: PreprocessPlan, extra: Dict[str, Any]) -> str:
    path = ctx.path("model.json")
    save_model(str(path), spec, weights, plan.fitted_on, ctx.config_hash, extra)
    return str(path)


def cmd_search(args, ctx: RunContext) -> Dict[str, str]:
    series, plan, report = _load_series(ctx)
    windows = _eval_windows(ctx, series)
    spec, weights, trace = run_pipeline_search(windows, ctx.config.search, ctx.config.seed,
                                               ctx.config.train.dense_activation)
    trace.write_csv(str(ctx.path("search_trace.csv")), ctx.config_hash)
    model = _save(ctx, spec, weights, plan, {"source": "search", "period_s": windows.period_s,
                                             "inputs": report.model_inputs})
    return {"model": model, "search_trace": str(ctx.path("search_trace.csv"))}


def cmd_train(args, ctx: RunContext) -> Dict[str, str]:
    series, plan, report = _load_series(ctx)
    windows = _eval_windows(ctx, series)
    cfg = ctx.config.train
    train_x, train_y = windows.split("train")
    val_x, val_y = windows.split("val")
    spec = fixed_spec(cfg, train_x.shape[2], windows.look_back, windows.horizon, windows.target_index)
    hp = TrainHyperparams(learning_rate=cfg.learning_rate, batch_size=cfg.batch_size, max_epochs=cfg.max_epochs,
                          patience=cfg.patience)
    weights, trace = train(spec, TrainingData(train_x.astype(cfg.dtype), train_y.astype(cfg.dtype),
                                              val_x.astype(cfg.dtype), val_y.astype(cfg.dtype)), hp, ctx.config.seed)
    trace.assign(config_hash=ctx.config_hash).to_csv(ctx.path("training_trace.csv"), index=False, lineterminator="\n")
    model = _save(ctx, spec, weights, plan, {"source": "train", "period_s": windows.period_s,
                                             "inputs": report.model_inputs})
    return {"model": model, "training_trace": str(ctx.path("training_trace.csv"))}


def _load_forecaster(ctx: RunContext) -> Tuple[NeuralForecaster, Dict[str, Any]]:
    path = ctx.path("model.json")
    if not path.exists():
        raise MissingArtifact(f"{path} not found; run `train` or `search` first")
    spec, weights, meta = load_model(str(path))
    _check_hash(ctx, meta.get("config_hash"), "model")
    hp = TrainHyperparams(learning_rate=ctx.config.train.learning_rate, batch_size=ctx.config.train.batch_size)
    return NeuralForecaster(spec, weights, hp), meta


def cmd_evaluate(args, ctx: RunContext) -> Dict[str, str]:
    forecaster, meta = _load_forecaster(ctx)
    series, plan, report = _load_series(ctx)
    artifacts = {}
    if args.compare:
        comparison, timing = compare_models(series, ctx.config, plan.target_normalizer(), ctx.config.ingest.dataset)
        comparison.write(str(ctx.path("comparison.csv")), str(ctx.path("comparison.json")), ctx.config_hash)
        timing.assign(config_hash=ctx.config_hash).to_csv(ctx.path("comparison_timing.csv"), index=False,
                                                          lineterminator="\n")
        artifacts.update(comparison=str(ctx.path("comparison.csv")), timing=str(ctx.path("comparison_timing.csv")))
    windows = _eval_windows(ctx, series)
    if (windows.look_back, windows.horizon) != (forecaster.look_back, forecaster.horizon):
        raise ArtifactMismatch(f"model expects look_back/horizon {forecaster.look_back}/{forecaster.horizon}, "
                               f"eval settings give {windows.look_back}/{windows.horizon}")
    metrics = evaluate_forecaster(forecaster, windows, plan.target_normalizer(), ctx.config.eval.mape_epsilon_kbps)
    frame = pd.DataFrame([{"dataset": ctx.config.ingest.dataset, "model": meta.get("extra", {}).get("source", ""),
                           "look_back": windows.look_back, "horizon": windows.horizon, **metrics,
                           "config_hash": ctx.config_hash}])
    frame.to_csv(ctx.path("metrics.csv"), index=False, lineterminator="\n", float_format="%.10g")
    _write_json(ctx.path("metrics.json"), json.loads(frame.to_json(orient="records")))
    logger.info(f"Test MAE {metrics['mae_norm']:.5f} (normalized), {metrics['mae_kbps']:.1f} kbps, "
                f"MAPE {metrics['mape_pct']:.2f}%")
    artifacts["metrics"] = str(ctx.path("metrics.csv"))
    return artifacts


def cmd_sweep(args, ctx: RunContext) -> Dict[str, str]:
    series, plan, _ = _load_series(ctx)
    runner, x_column = (sweep_lookback, "look_back_s") if args.kind == "lookback" else (sweep_horizon, "horizon_s")
    report, timing = runner(series, ctx.config, plan.target_normalizer(), ctx.config.ingest.dataset)
    stem = f"sweep_{args.kind}"
    report.write(str(ctx.path(f"{stem}.csv")), str(ctx.path(f"{stem}.json")), ctx.config_hash)
    write_dat(report, x_column, str(ctx.path(f"{stem}.dat")), ctx.config_hash)
    timing.assign(config_hash=ctx.config_hash).to_csv(ctx.path(f"{stem}_timing.csv"), index=False,
                                                      lineterminator="\n")
    return {"report": str(ctx.path(f"{stem}.csv")), "dat": str(ctx.path(f"{stem}.dat"))}


def _inject_config(args, ctx: RunContext) -> Optional[InjectConfig]:
    if getattr(args, "inject", None):
        return parse_inject(args.inject)
    return ctx.config.monitor.inject


def _stream(ds: SessionDataset, plan: PreprocessPlan, columns: List[str], period_s: float,
            source_period_s: float) -> MonitorStream:
    frame = to_frame(ds)
    features = plan.transform(frame)
    step = steps_from_seconds(period_s, source_period_s)
    keep = np.concatenate([np.arange(b, e, step) for b, e in ds.segments()] or [np.empty(0, dtype=int)])
    picked = features.iloc[keep]
    return MonitorStream.from_frame(picked, columns, plan.target, frame["timestamp"].to_numpy()[keep],
                                    frame["segment"].to_numpy()[keep])


def cmd_monitor(args, ctx: RunContext) -> Dict[str, str]:
    forecaster, meta = _load_forecaster(ctx)
    _require(ctx, "ingest", ctx.dataset_path)
    _, plan = _load_features(ctx)
    _require(ctx, "select-features", ctx.path("feature_report.json"))
    report = FeatureReport.model_validate(_read_json(ctx.path("feature_report.json")))
    cfg = ctx.config
    monitor_cfg = cfg.monitor
    if args.check_period is not None:
        monitor_cfg = monitor_cfg.model_copy(update={"check_period_s": parse_duration(args.check_period)})

    ds, _ = read_dataset(str(ctx.dataset_path))
    n = len(ds)
    train_end = train_rows(n, cfg.preprocess.split)
    val_end = train_end + int(np.floor(n * cfg.preprocess.split[1]))
    period_s = meta.get("extra", {}).get("period_s", cfg.eval.period_s)
    val_stream = _stream(subset(ds, train_end, val_end), plan, report.model_inputs, period_s,
                         cfg.ingest.resample_period_s)
    test_ds = subset(ds, val_end, n)
    artifacts = {}
    inject = _inject_config(args, ctx)
    if inject is not None:
        test_ds, manifest = inject_drift(test_ds, inject.start_s, inject.length_s, inject.kind, inject.value)
        _write_json(ctx.path("monitor_injection.json"), {**manifest, "config_hash": ctx.config_hash})
        artifacts["injection"] = str(ctx.path("monitor_injection.json"))
    stream = _stream(test_ds, plan, report.model_inputs, period_s, cfg.ingest.resample_period_s)

    baseline = measure_baseline(forecaster, val_stream)
    state = DriftMonitorState.from_config(baseline, monitor_cfg)
    logger.info(f"Baseline MAE {baseline:.5f}, threshold {state.threshold:.5f}")
    result, _ = run_monitor(forecaster, stream, state, val_stream.target, monitor_cfg.ks_threshold,
                            monitor_cfg.ks_triggers_adaptation, cfg.seed)
    result.write(str(ctx.path("monitor_report.csv")), str(ctx.path("monitor_report.json")), ctx.config_hash)
    ctx.options["checks"] = result.history
    artifacts.update(report=str(ctx.path("monitor_report.csv")), summary=str(ctx.path("monitor_report.json")))
    return artifacts


def cmd_inject_drift(args, ctx: RunContext) -> Dict[str, str]:
    _require(ctx, "ingest", ctx.dataset_path)
    inject = _inject_config(args, ctx) or InjectConfig()
    ds, _ = read_dataset(str(ctx.dataset_path))
    drifted, manifest = inject_drift(ds, inject.start_s, inject.length_s, inject.kind, inject.value)
    csv_path = ctx.path("datasets", f"{ctx.config.ingest.dataset}_drifted.csv")
    write_dataset(drifted, str(csv_path), config_hash=ctx.config_hash, injection=manifest)
    _write_json(ctx.path("injection_manifest.json"), {**manifest, "config_hash": ctx.config_hash})
    return {"dataset": str(csv_path), "manifest": str(ctx.path("injection_manifest.json"))}


COMMANDS: Dict[str, Callable[[argparse.Namespace, RunContext], Dict[str, str]]] = {
    "ingest": cmd_ingest,
    "preprocess": cmd_preprocess,
    "select-features": cmd_select_features,
    "search": cmd_search,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "monitor": cmd_monitor,
    "inject-drift": cmd_inject_drift,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="throughput_automl",
                                     description="AutoML throughput forecasting: ingest, search, evaluate, monitor.")
    parser.add_argument('--config', type=str, default=None, help='Pipeline config JSON (default: bundled)')
    parser.add_argument('--seed', type=int, default=None, help='Seed for every random choice in the run')
    parser.add_argument('--out', type=str, default=None, help='Artifacts directory')
    parser.add_argument('--force', action='store_true', help='Accept upstream artifacts from another config')
    parser.add_argument('--set', action='append', default=[], metavar='KEY=VALUE',
                        help='Override a config key, e.g. search.budget=10 (repeatable)')
    parser.add_argument('--log-level', type=str, default='INFO', choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'])
    parser.add_argument('--version', action='version',
                        version=f"%(prog)s {__version__} (config schema {CONFIG_SCHEMA_VERSION})")
    sub = parser.add_subparsers(dest='command', required=True)

    ingest = sub.add_parser('ingest', help='Parse logs (or generate synthetic sessions) into datasets')
    ingest.add_argument('--synthetic', action='store_true', help='Use the synthetic generator')
    sub.add_parser('preprocess', help='Fit the preprocessing plan and write normalized features')
    sub.add_parser('select-features', help='Boosted-tree importance and redundancy pruning')
    sub.add_parser('search', help='Architecture and hyperparameter search')
    sub.add_parser('train', help='Train the architecture given in the config')
    evaluate = sub.add_parser('evaluate', help='Test-split metrics of the trained model')
    evaluate.add_argument('--compare', action='store_true', help='Also run the three-model comparison')
    sweep = sub.add_parser('sweep', help='Look-back or horizon sweep')
    sweep.add_argument('--kind', choices=['lookback', 'horizon'], required=True)
    monitor = sub.add_parser('monitor', help='Replay the test stream with drift checks')
    monitor.add_argument('--inject', type=str, default=None, help="e.g. scale=0.5,start=14m,len=10m")
    monitor.add_argument('--check-period', type=str, default=None, help='Seconds, or with s/m/h suffix')
    inject = sub.add_parser('inject-drift', help='Write a drifted copy of the dataset')
    inject.add_argument('--inject', type=str, default=None, help="e.g. scale=0.5,start=14m,len=10m")
    runs = sub.add_parser('runs', help='List recorded runs as JSON')
    runs.add_argument('--command-filter', type=str, default=None, help='Only runs of this command')
    return parser


def _options(args: argparse.Namespace) -> Dict[str, Any]:
    skip = {"config", "seed", "out", "force", "set", "log_level", "command"}
    return {k: v for k, v in vars(args).items() if k not in skip}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    store = None
    ctx = None
    started = time.perf_counter()
    try:
        overrides = list(args.set)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        if args.out:
            overrides.append(f"paths.artifacts_dir={args.out}")
        config = load_config(args.config, overrides)
        out = Path(config.paths.artifacts_dir)
        out.mkdir(parents=True, exist_ok=True)
        store = RunStore(str(out / "runs.db"))
        if args.command == "runs":
            print(store.export_runs(command=args.command_filter))
            return 0
        ctx = RunContext(config, config_hash(config), out, args.force, _options(args))
        logger.info(f"Running {args.command}", extra={"config_hash": ctx.config_hash, "seed": config.seed})
        artifacts = COMMANDS[args.command](args, ctx)
        wall_time = time.perf_counter() - started
        checks = ctx.options.pop("checks", None)
        _write_json(out / f"{args.command}_manifest.json", {
            "command": args.command,
            "config_hash": ctx.config_hash,
            "seed": config.seed,
            "versions": package_versions(),
            "wall_time_s": wall_time,
            "artifacts": artifacts,
            "options": ctx.options,
        })
        run_id = store.record_run(args.command, ctx.config_hash, config.seed, "ok", wall_time, artifacts)
        if checks:
            store.record_checks(run_id, checks)
        logger.info(f"{args.command} finished in {wall_time:.1f}s", extra={"artifacts": artifacts})
        return 0
    except PipelineError as e:
        logger.error(str(e), extra={"error": type(e).__name__, "exit_code": e.exit_code})
        if store is not None and ctx is not None:
            try:
                store.record_run(args.command, ctx.config_hash, ctx.config.seed, "failed",
                                 time.perf_counter() - started, {}, str(e))
            except StoreError:
                pass
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
