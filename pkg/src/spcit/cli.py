"""Command-line front end: simulate, ingest, train, evaluate, benchmark, plot.

Config files are JSON objects whose keys are ExperimentConfig fields;
explicit flags override file values, and every run writes a manifest echoing
the effective configuration, the seed, and the package version. The default
output directory comes from --out-dir or the SPCIT_OUT_DIR environment
variable (falling back to the working directory).
"""

from __future__ import annotations

import argparse
import json
import multiprocessing
import os
import sys
from dataclasses import fields
from pathlib import Path

from . import __version__
from .bench import (
    CsvDataset,
    DatasetSpec,
    ExperimentConfig,
    RunResult,
    aggregate_by_config,
    band_plot_from_trace,
    emit_report,
    run_experiment,
    run_multistep,
    train_residual_model,
    write_manifest,
    write_trace_csv,
)
from .core import SpcitError
from .datagen import SimulationSpec, dump_simulation_csv, load_csv, resolve_schema, simulate, simulated_schema

SIM_KINDS = ("nonstationary", "heteroskedastic")


def _out_dir(args) -> Path:
    base = args.out_dir or os.environ.get("SPCIT_OUT_DIR") or "."
    path = Path(base)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _config_defaults(args) -> dict:
    file_values = {}
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            file_values = json.load(fh)
        known = {f.name for f in fields(ExperimentConfig)}
        unknown = set(file_values) - known
        if unknown:
            raise SpcitError(f"config: unknown keys {sorted(unknown)}")
    return file_values


_FLAG_TO_FIELD = {
    "alpha": "alpha",
    "w": "window_w",
    "horizon": "horizon_s",
    "nexcp_rho": "nexcp_rho",
    "refit_period": "refit_period",
    "multistep_fill": "multistep_fill",
    "point_trees": "point_trees",
    "point_max_depth": "point_max_depth",
    "point_min_leaf": "point_min_leaf",
    "point_mtry": "point_mtry",
    "qrf_trees": "qrf_trees",
    "qrf_max_depth": "qrf_max_depth",
    "qrf_min_leaf": "qrf_min_leaf",
    "qrf_mtry": "qrf_mtry",
    "d_model": "d_model",
    "n_heads": "n_heads",
    "n_layers": "n_layers",
    "dropout": "dropout",
    "learning_rate": "learning_rate",
    "batch_size": "batch_size",
    "max_epochs": "max_epochs",
    "early_stop_patience": "early_stop_patience",
    "continue_on_validation": "continue_on_validation",
}


def _add_experiment_flags(p: argparse.ArgumentParser, *, with_method: bool = True) -> None:
    if with_method:
        p.add_argument("--method", required=True, choices=("spci-t", "spci", "enbpi", "nexcp"))
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--alpha", type=float)
    p.add_argument("--w", type=int, help="past window length")
    p.add_argument("--horizon", "-s", type=int, dest="horizon")
    p.add_argument("--nexcp-rho", type=float, dest="nexcp_rho")
    p.add_argument("--refit-period", type=int, dest="refit_period")
    p.add_argument("--multistep-fill", choices=("median", "zero"), dest="multistep_fill")
    p.add_argument("--point-trees", type=int, dest="point_trees")
    p.add_argument("--point-max-depth", type=int, dest="point_max_depth")
    p.add_argument("--point-min-leaf", type=int, dest="point_min_leaf")
    p.add_argument("--point-mtry", type=int, dest="point_mtry")
    p.add_argument("--qrf-trees", type=int, dest="qrf_trees")
    p.add_argument("--qrf-max-depth", type=int, dest="qrf_max_depth")
    p.add_argument("--qrf-min-leaf", type=int, dest="qrf_min_leaf")
    p.add_argument("--qrf-mtry", type=int, dest="qrf_mtry")
    p.add_argument("--d-model", type=int, dest="d_model")
    p.add_argument("--n-heads", type=int, dest="n_heads")
    p.add_argument("--n-layers", type=int, dest="n_layers")
    p.add_argument("--dropout", type=float)
    p.add_argument("--learning-rate", type=float, dest="learning_rate")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--max-epochs", type=int, dest="max_epochs")
    p.add_argument("--early-stop-patience", type=int, dest="early_stop_patience")
    p.add_argument("--continue-on-validation", action="store_const", const=True,
                   dest="continue_on_validation")


def _build_config(args, method: str) -> ExperimentConfig:
    merged = dict(_config_defaults(args))
    for flag, name in _FLAG_TO_FIELD.items():
        value = getattr(args, flag, None)
        if value is not None:
            merged[name] = value
    merged["method"] = method
    return ExperimentConfig(**merged)


def _dataset_from_args(args) -> DatasetSpec:
    ds = args.dataset
    if ds in SIM_KINDS:
        return SimulationSpec(kind=ds, T=args.T, d=args.d)
    path = Path(ds)
    if args.schema:
        schema = resolve_schema(args.schema, getattr(args, "schema_config", None))
    else:
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().strip().split(",")
        xcols = [c for c in header if c.startswith("x") and c[1:].isdigit()]
        if not xcols or "y" not in header:
            raise SpcitError(
                f"{path}: cannot infer a schema (expected simulator columns x1..xd,y); pass --schema"
            )
        schema = simulated_schema(len(xcols))
    return CsvDataset(str(path), schema, name=path.stem)


def _slug(run: RunResult) -> str:
    return f"{run.method}_{run.dataset}_w{run.window_w}_s{run.horizon_s}_seed{run.seed}"


def _write_run_artifacts(run: RunResult, dataset: DatasetSpec, cfg: ExperimentConfig, out: Path) -> Path:
    trace = write_trace_csv(run, out / f"trace_{_slug(run)}.csv")
    write_manifest(out / f"manifest_{_slug(run)}.json", dataset, cfg, run.seed)
    return trace


# ------------------------------------------------------------- subcommands

def cmd_simulate(args) -> int:
    spec = SimulationSpec(kind=args.kind, T=args.T, d=args.d, ar_rho=args.rho,
                          sparsity=args.sparsity, seed=args.seed)
    series, noise = simulate(spec)
    dump_simulation_csv(args.out, series, noise)
    print(f"wrote {series.length} rows (d={series.dim}) to {args.out}")
    return 0


def cmd_ingest(args) -> int:
    schema = resolve_schema(args.schema, args.schema_config)
    series = load_csv(args.data, schema)
    print(f"{args.data}: ok under schema {schema.name!r} (T={series.length}, d={series.dim})")
    return 0


def cmd_train(args) -> int:
    dataset = _dataset_from_args(args)
    cfg = _build_config(args, args.method)
    if cfg.method not in ("spci-t", "spci"):
        raise SpcitError("train: only the spci-t and spci residual models are trainable artifacts")
    out = _out_dir(args)
    paths = train_residual_model(dataset, cfg, args.seed, out)
    write_manifest(out / f"manifest_train_{cfg.method}_seed{args.seed}.json", dataset, cfg, args.seed)
    for kind, path in paths.items():
        print(f"{kind}: {path}")
    return 0


def cmd_evaluate(args) -> int:
    dataset = _dataset_from_args(args)
    cfg = _build_config(args, args.method)
    out = _out_dir(args)
    run = run_experiment(dataset, cfg, args.seed)
    trace = _write_run_artifacts(run, dataset, cfg, out)
    print(
        f"{run.method} on {run.dataset} (seed {run.seed}, w={run.window_w}, s={run.horizon_s}): "
        f"coverage {run.coverage:.4f}, width {run.mean_width:.4g}"
        + (f", {run.infinite_interval_count} infinite" if run.infinite_interval_count else "")
    )
    print(f"trace: {trace}")
    return 0


def _benchmark_job(payload):
    dataset, cfg, seed, horizons = payload
    return run_multistep(dataset, cfg, seed, horizons)


def cmd_benchmark(args) -> int:
    seeds = [int(s) for s in args.seeds.split(",")]
    methods = args.methods.split(",") if args.methods else ["spci-t", "spci", "enbpi", "nexcp"]
    out = _out_dir(args)
    if args.suite == "simulated":
        datasets: list[DatasetSpec] = [
            SimulationSpec(kind=k, T=args.T, d=args.d) for k in SIM_KINDS
        ]
        jobs = [
            (ds, _build_config(args, m), seed, (1,))
            for ds in datasets for m in methods for seed in seeds
        ]
    elif args.suite == "multistep":
        datasets = [SimulationSpec(kind=k, T=args.T, d=args.d) for k in SIM_KINDS]
        horizons = tuple(int(s) for s in args.horizons.split(","))
        jobs = [(ds, _build_config(args, "spci-t"), seed, horizons) for ds in datasets for seed in seeds]
    elif args.suite == "real":
        if not args.data or not args.schema:
            raise SpcitError("benchmark --suite real needs --data and --schema")
        schema = resolve_schema(args.schema, args.schema_config)
        ds = CsvDataset(args.data, schema, name=Path(args.data).stem)
        jobs = [(ds, _build_config(args, m), seed, (1,)) for m in methods for seed in seeds]
    else:
        raise SpcitError(f"unknown suite {args.suite!r}")

    if args.jobs > 1:
        with multiprocessing.Pool(args.jobs) as pool:
            outputs = pool.map(_benchmark_job, jobs)
    else:
        outputs = [_benchmark_job(j) for j in jobs]

    runs: list[RunResult] = []
    for (dataset, cfg, seed, _), by_s in zip(jobs, outputs):
        for run in by_s.values():
            runs.append(run)
            _write_run_artifacts(run, dataset, cfg, out)
    runs.sort(key=lambda r: (r.config_key(), r.seed))
    aggregates = aggregate_by_config(runs)
    for fmt, name in (("markdown_table", "report.md"), ("csv", "report.csv"), ("json", "report.json")):
        emit_report(aggregates, fmt, out / name)
    print((out / "report.md").read_text(encoding="utf-8"))
    print(f"reports in {out}")
    return 0


def cmd_plot(args) -> int:
    out_csv = Path(args.out_csv)
    band_plot_from_trace(args.trace, out_csv, Path(args.out_svg) if args.out_svg else None,
                         alpha=args.alpha)
    print(f"band data: {out_csv}" + (f", svg: {args.out_svg}" if args.out_svg else ""))
    return 0


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spcit",
        description="Sequential conformal prediction intervals for time series: "
                    "simulators, residual quantile models, and benchmarks.",
    )
    parser.add_argument("--version", action="version", version=f"spcit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write a simulated series to CSV")
    p.add_argument("--kind", required=True, choices=SIM_KINDS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--T", type=int, default=2000)
    p.add_argument("--d", type=int, default=10)
    p.add_argument("--rho", type=float, default=0.6)
    p.add_argument("--sparsity", type=float, default=0.2)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("ingest", help="validate a CSV file against a schema")
    p.add_argument("--data", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--schema-config", dest="schema_config")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="fit a residual model and write its checkpoint")
    p.add_argument("--dataset", required=True, help="CSV path or a simulation kind")
    p.add_argument("--schema")
    p.add_argument("--schema-config", dest="schema_config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--T", type=int, default=2000)
    p.add_argument("--d", type=int, default=10)
    p.add_argument("--out-dir", dest="out_dir")
    _add_experiment_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="run one (method, dataset, seed) and write its trace")
    p.add_argument("--dataset", required=True, help="CSV path or a simulation kind")
    p.add_argument("--schema")
    p.add_argument("--schema-config", dest="schema_config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--T", type=int, default=2000)
    p.add_argument("--d", type=int, default=10)
    p.add_argument("--out-dir", dest="out_dir")
    _add_experiment_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("benchmark", help="run a suite matrix and emit reports")
    p.add_argument("--suite", required=True, choices=("simulated", "multistep", "real"))
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--methods", help="comma list; default all four")
    p.add_argument("--horizons", default="1,2,3,4", help="multistep suite horizons")
    p.add_argument("--T", type=int, default=2000)
    p.add_argument("--d", type=int, default=10)
    p.add_argument("--data", help="CSV path for --suite real")
    p.add_argument("--schema", help="schema name for --suite real")
    p.add_argument("--schema-config", dest="schema_config")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out-dir", dest="out_dir")
    _add_experiment_flags(p, with_method=False)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("plot", help="convert a run trace into band-plot files")
    p.add_argument("--trace", required=True)
    p.add_argument("--out-csv", required=True, dest="out_csv")
    p.add_argument("--out-svg", dest="out_svg")
    p.add_argument("--alpha", type=float, default=0.1)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SpcitError as exc:
        print(f"error [{args.command}]: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error [{args.command}/io]: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
