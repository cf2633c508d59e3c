"""Command-line entry point: gen-data, train, evaluate, forecast.

Exit codes: 0 success, 1 usage/configuration error, 2 data or file-format
error, 3 numerical abort. Every command writes one run manifest.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import data as D
from . import metrics as M
from .encoder import EncoderConfig
from .errors import ConfigError, DataError, FingerprintError, NumericalError
from .synthetic import SyntheticConfig, generate_dataset
from . import tensor as T
from .tensor import DimensionError
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train
from .transformer import HORIZON, ForecastModel, TransformerConfig

log = logging.getLogger("weathertokens")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
MANIFEST_VERSION = 1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None = None
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    duration_s: float = 0.0
    code_version: str = __version__

    def to_text(self) -> str:
        lines = [
            f"# weathertokens run manifest v{MANIFEST_VERSION}",
            f"command: {self.command}",
            f"code_version: {self.code_version}",
            f"seed: {self.seed}",
            f"duration_s: {self.duration_s:.3f}",
            "[config]",
            *(f"{k} = {v}" for k, v in sorted(self.config.items())),
            "[inputs]",
            *(f"{k} sha256:{v}" for k, v in sorted(self.inputs.items())),
            "[outputs]",
            *(f"{k} sha256:{v}" for k, v in sorted(self.outputs.items())),
        ]
        return "\n".join(lines) + "\n"

    def write(self, path: Path, started: float, outputs: list[Path]) -> None:
        self.duration_s = time.perf_counter() - started
        self.outputs = {str(p): D.file_digest(p) for p in outputs}
        D._atomic_write(path, self.to_text())


def _grid(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like HxW, got {text!r}") from None
    return h, w


def _digests(paths) -> dict[str, str]:
    return {str(p): D.file_digest(p) for p in paths}


@contextlib.contextmanager
def _thread_limit(threads: int | None):
    if threads is None:
        yield
        return
    from threadpoolctl import threadpool_limits

    # more BLAS threads than cores makes them spin against each other
    cores = len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)
    if threads > cores:
        log.info("capping --threads %d at %d available cores", threads, cores)
    with threadpool_limits(limits=max(1, min(threads, cores))):
        yield


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    started = time.perf_counter()
    cfg = SyntheticConfig(
        seed=args.seed, days=args.days, grid=args.grid, variables=args.variables,
        length_scale=args.length_scale, train_days=args.train_days,
        validation_days=args.validation_days, test_days=args.test_days,
    )
    out = generate_dataset(cfg, args.out)
    files = [*out.grid_files, out.production_csv, out.capacity_csv]
    manifest = RunManifest("gen-data", {k: v for k, v in asdict(cfg).items()}, seed=cfg.seed)
    manifest.write(Path(args.out) / "manifest.txt", started, files)
    train_d, val_d, test_d = cfg.split_days()
    print(f"wrote {len(files)} files to {args.out} ({train_d} train / {val_d} validation / {test_d} test days)")
    return EXIT_OK


def _samples(dataset: D.Dataset, stats: D.NormalizationStats, horizon: int, start_hour: int):
    samples, report = D.assemble_samples(
        dataset.grids, dataset.production, dataset.capacity, horizon=horizon, start_hour=start_hour, stats=stats
    )
    if report.dropped:
        log.warning("%d sample window(s) dropped for missing hours", len(report.dropped))
    return D.split_by_year(samples), report


def cmd_train(args) -> int:
    started = time.perf_counter()
    tcfg = TrainConfig(learning_rate=args.lr, batch_size=args.batch, max_epochs=args.epochs,
                       patience=args.patience, seed=args.seed, precision=args.precision)
    dataset = D.load_dataset_dir(args.data)
    if args.variables and args.variables != dataset.variables:
        raise ConfigError(f"--variables {args.variables} but dataset holds {dataset.variables}")
    stats = D.compute_norm_stats(dataset.grids)
    split, _ = _samples(dataset, stats, HORIZON, args.start_hour)
    if not split.train or not split.validation:
        raise DataError(f"dataset needs train and validation samples, got {split.counts()}")
    enc = EncoderConfig(in_channels=len(D.VARIABLE_SETS[dataset.variables]), kernel_size=args.kernel)
    def progress(rec):
        if args.verbose:
            print(f"epoch {rec.epoch}: train_mse={rec.train_mse:.6f} val_mse={rec.val_mse:.6f}", flush=True)

    with T.precision(tcfg.precision):
        model = ForecastModel(enc, TransformerConfig(), seed=tcfg.seed)
        print(f"trainable parameters: {model.num_parameters()}", flush=True)
        result = train(model, split.train, split.validation, tcfg, stats=stats, on_epoch=progress)
    result.state.config.update({"variables": dataset.variables, "channels": list(D.VARIABLE_SETS[dataset.variables]),
                                "start_hour": args.start_hour})
    ckpt = Path(args.out)
    save_checkpoint(result.state, ckpt)
    loss_log = ckpt.with_name(ckpt.name + ".losses.csv")
    stats_file = ckpt.with_name(ckpt.name + ".stats.txt")
    D._atomic_write(loss_log, result.loss_log_csv())
    stats.save(stats_file)
    best_val = result.history[result.best_epoch - 1].val_mse if result.best_epoch else float("nan")
    print(f"final epoch: {result.stopped_epoch}")
    print(f"best epoch: {result.best_epoch}  best validation mse: {best_val:.6f}")
    manifest = RunManifest("train", {**asdict(tcfg), "data": args.data, "kernel": args.kernel,
                                     "start_hour": args.start_hour}, seed=tcfg.seed,
                           inputs=_digests(dataset.files))
    manifest.write(ckpt.with_name(ckpt.name + ".manifest.txt"), started, [ckpt, loss_log, stats_file])
    return EXIT_OK


def _load_model(ckpt_path: str):
    state = load_checkpoint(ckpt_path)
    stats = state.stats
    if stats is None:
        raise FingerprintError(f"{ckpt_path}: checkpoint carries no normalisation statistics")
    return state, state.build_model(), stats


def _check_variables(state, variables: str, channels) -> None:
    want = state.config.get("variables")
    if want is not None and (want != variables or tuple(state.config.get("channels", ())) != tuple(channels)):
        raise FingerprintError(f"checkpoint was trained on {want} data, input holds {variables} {tuple(channels)}")


def _read_baseline_csv(path: str) -> dict:
    """Either ``timestamp_utc,value_mw`` or ``issue_time_utc,timestamp_utc,value_mw``."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
    if header == ["issue_time_utc", "timestamp_utc", "value_mw"]:
        table = {}
        with open(path, encoding="utf-8") as fh:
            next(fh)
            for lineno, line in enumerate(fh, start=2):
                if not line.strip():
                    continue
                try:
                    issue, ts, val = line.strip().split(",")
                    table[(D.to_epoch_hour(issue), D.to_epoch_hour(ts))] = float(val)
                except ValueError as exc:
                    raise DataError(f"{path}: line {lineno}: cannot parse {line.strip()!r} ({exc})") from None
        return {"keyed_by_issue": True, "table": table}
    series = D.import_entsoe_csv(path, "forecast")
    return {"keyed_by_issue": False, "series": series}


def _baseline_values(spec: str, samples, split: D.DatasetSplit, dataset: D.Dataset) -> np.ndarray:
    hours = np.stack([s.hours for s in samples])
    caps = np.stack([s.capacity_mw for s in samples])
    if spec == "climatology":
        if not split.train:
            raise DataError("climatology baseline needs training-year samples")
        th = np.concatenate([s.hours for s in split.train])
        tv = np.concatenate([s.target for s in split.train])
        return M.climatology_forecast(th, tv, hours) * caps
    if spec == "persistence":
        frac, _ = D.normalize_target(dataset.production.values, dataset.capacity.at(dataset.production.hours))
        issue = np.repeat(np.array([s.start_hour for s in samples])[:, None], hours.shape[1], axis=1)
        return M.persistence_forecast(dataset.production.hours, frac, hours, issue, missing="nan") * caps
    if spec.startswith("csv:"):
        loaded = _read_baseline_csv(spec[4:])
        if loaded["keyed_by_issue"]:
            table = loaded["table"]
            return np.array([[table.get((s.start_hour, int(h)), np.nan) for h in s.hours] for s in samples])
        vals, found = loaded["series"].lookup(hours)
        return np.where(found, vals, np.nan)
    raise ConfigError(f"unknown baseline {spec!r}; use climatology, persistence or csv:PATH")


def cmd_evaluate(args) -> int:
    started = time.perf_counter()
    state, model, stats = _load_model(args.ckpt)
    dataset = D.load_dataset_dir(args.data)
    _check_variables(state, dataset.variables, D.VARIABLE_SETS[dataset.variables])
    horizon = model.tr_config.horizon
    split, _ = _samples(dataset, stats, horizon, int(state.config.get("start_hour", 3)))
    samples = split.get(args.split)
    if not samples:
        raise DataError(f"split {args.split!r} is empty")
    baseline_mw = _baseline_values(args.baseline, samples, split, dataset)
    if args.baseline == "persistence":
        keep = ~np.isnan(baseline_mw).any(axis=1)
        if not keep.any():
            raise DataError("no sample has the previous day's production for persistence")
        if not keep.all():
            log.warning("persistence: %d sample(s) without previous-day history skipped", int((~keep).sum()))
        samples = [s for s, k in zip(samples, keep) if k]
        baseline_mw = baseline_mw[keep]
    weather, _ = D.stack_samples(samples)
    fractions = np.concatenate([model.predict(weather[i:i + 32]) for i in range(0, len(samples), 32)])
    caps = np.stack([s.capacity_mw for s in samples])
    model_mw = fractions * caps
    actual_mw = np.stack([s.production_mw for s in samples])
    hours = np.stack([s.hours for s in samples])
    seg = np.where(np.arange(horizon) < 21, "first_day", "second_day") if args.segments else None
    report = M.compare_report(model_mw, baseline_mw, actual_mw, segment_mask=seg, hours=hours)
    out = Path(args.report)
    written = report.write(out, title=dataset.variables)
    pred_csv = out / "predictions.csv"
    rows = ["issue_time_utc,timestamp_utc,value_mw"]
    for s, row in zip(samples, model_mw):
        rows += [f"{D.iso_hour(s.start_hour)},{D.iso_hour(h)},{v:.6f}" for h, v in zip(s.hours.tolist(), row.tolist())]
    D._atomic_write(pred_csv, "\n".join(rows) + "\n")
    written.append(pred_csv)
    print(f"{'metric':8s} {'model':>12s} {'baseline':>12s} {'improve %':>10s}")
    for name, m, b, imp in report.table_rows():
        print(f"{name:8s} {m:12.4f} {b:12.4f} {'-' if imp is None else f'{imp:10.2f}':>10s}")
    manifest = RunManifest("evaluate", {"ckpt": args.ckpt, "data": args.data, "split": args.split,
                                        "baseline": args.baseline}, inputs=_digests([args.ckpt, *dataset.files]))
    manifest.write(out / "manifest.txt", started, written)
    return EXIT_OK


def cmd_forecast(args) -> int:
    started = time.perf_counter()
    state, model, stats = _load_model(args.ckpt)
    series = D.load_grid_file(args.input)
    _check_variables(state, series.variables, series.channels)
    horizon = model.tr_config.horizon
    if len(series) < horizon:
        raise DataError(f"{args.input}: {len(series)} hourly frames, forecasting requires {horizon}")
    capacity = D.interpolate_capacity(D.import_entsoe_csv(args.capacity, "capacity"))
    hours = series.times[:horizon]
    cap = capacity.at(hours, strict=True)
    weather = D.normalize_fields(series.fields[:horizon], stats, series.channels)
    mw = model.predict(weather) * cap
    out = Path(args.out)
    D.write_entsoe_csv(out, hours, mw, header=("timestamp_utc", "forecast_mw"))
    manifest = RunManifest("forecast", {"ckpt": args.ckpt, "input": args.input, "capacity": args.capacity},
                           inputs=_digests([args.ckpt, args.input, args.capacity]))
    manifest.write(out.with_name(out.name + ".manifest.txt"), started, [out])
    print(f"wrote {horizon} hourly forecasts to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="weathertokens", description="Weather-maps-as-tokens renewable power forecasting.")
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--threads", type=int, default=None, help="cap BLAS threads (for reproducibility)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--days", type=int, default=60)
    g.add_argument("--grid", type=_grid, default=(16, 16), help="HxW, e.g. 16x16")
    g.add_argument("--variables", choices=sorted(D.VARIABLE_SETS), default="wind")
    g.add_argument("--length-scale", type=float, default=4.0)
    g.add_argument("--train-days", type=int)
    g.add_argument("--validation-days", type=int)
    g.add_argument("--test-days", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model on a dataset directory")
    t.add_argument("--data", required=True)
    t.add_argument("--variables", choices=sorted(D.VARIABLE_SETS))
    t.add_argument("--epochs", type=int, default=500, help="maximum epochs")
    t.add_argument("--patience", type=int, default=20)
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--batch", type=int, default=8)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--kernel", type=int, default=3)
    t.add_argument("--start-hour", type=int, default=3)
    t.add_argument("--precision", choices=("32", "64"), default="32")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="evaluate a checkpoint against a baseline")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("train", "validation", "test"), default="test")
    e.add_argument("--baseline", default="climatology", help="climatology | persistence | csv:PATH")
    e.add_argument("--segments", action="store_true", help="also report first-day / second-day lead hours")
    e.add_argument("--report", required=True)
    e.set_defaults(func=cmd_evaluate)

    f = sub.add_parser("forecast", help="45-hour forecast from one grid file")
    f.add_argument("--ckpt", required=True)
    f.add_argument("--input", required=True)
    f.add_argument("--capacity", required=True)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_forecast)
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "patience", 1) < 1:
            raise UsageError("--patience must be >= 1")
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit(args.threads):
            return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, DimensionError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
