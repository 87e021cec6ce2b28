"""Rolling evaluation pipeline, coverage/width metrics, reports, band plots.

``run_experiment`` wires the full protocol for one (dataset, method, seed):
simulate or load, split chronologically, fit the bagged point predictor,
compute leave-one-out residuals on the training block and ensemble-mean
residuals elsewhere, fit the method's residual model, construct intervals
sequentially over the shared test tail, and score them. Everything derives
from the single run seed via documented stream labels, so repeated runs are
byte-identical.
"""

from __future__ import annotations

import csv
import json
import math
import xml.sax.saxutils as sax
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from .conformal import (
    DecoderResidualEstimator,
    ForestResidualEstimator,
    IntervalMethodConfig,
    QuantileLevelSet,
    multistep_intervals,
    sequential_enbpi,
    sequential_nexcp,
    sequential_spci,
)
from .core import (
    DataValidationError,
    ObservationSeries,
    PredictionInterval,
    ResidualSeries,
    SignificanceLevel,
    StructuralError,
    compute_residuals,
    interval_contains,
)
from .datagen import DatasetSchema, SimulationSpec, Split, load_csv, simulate, split
from .forest import TreeParams, ensemble_to_json, fit_forest, fit_qrf
from .rng import derive_seed
from .transformer import (
    DecoderConfig,
    Standardizer,
    build_windows,
    save_checkpoint,
    train,
    write_loss_curve,
)

# stream labels for per-module seeds derived from the run seed
_STREAM_DATA = 1
_STREAM_POINT_FOREST = 2
_STREAM_QRF = 3
_STREAM_DECODER = 4


@dataclass(frozen=True)
class CsvDataset:
    path: str
    schema: DatasetSchema
    name: str | None = None

    @property
    def label(self) -> str:
        return self.name if self.name else self.schema.name


DatasetSpec = SimulationSpec | CsvDataset


def dataset_label(dataset: DatasetSpec) -> str:
    return dataset.kind if isinstance(dataset, SimulationSpec) else dataset.label


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one run needs beyond the dataset and the seed."""

    method: str
    alpha: float = 0.1
    window_w: int = 100
    horizon_s: int = 1
    nexcp_rho: float = 0.99
    refit_period: int | None = None
    multistep_fill: str = "median"
    # bagged point predictor (shallow members: the benchmark regime needs a
    # weak f_hat so residuals keep their temporal structure; see README)
    point_trees: int = 25
    point_max_depth: int = 2
    point_min_leaf: int = 5
    point_mtry: int | None = None
    # residual quantile forest (spci)
    qrf_trees: int = 25
    qrf_max_depth: int = 8
    qrf_min_leaf: int = 10
    qrf_mtry: int | None = None  # None -> ceil(sqrt(window dim))
    # residual quantile decoder (spci-t)
    d_model: int = 16
    n_heads: int = 4
    n_layers: int = 4
    dropout: float = 0.2
    learning_rate: float = 1e-4
    batch_size: int = 4
    max_epochs: int = 100
    early_stop_patience: int | None = 10
    continue_on_validation: bool = False

    def interval_config(self) -> IntervalMethodConfig:
        return IntervalMethodConfig(
            method=self.method,
            window_w=self.window_w,
            alpha=self.alpha,
            horizon_s=self.horizon_s,
            nexcp_rho=self.nexcp_rho,
            refit_period=self.refit_period,
            multistep_fill=self.multistep_fill,
        )


@dataclass
class RunResult:
    method: str
    dataset: str
    seed: int
    alpha: float
    window_w: int
    horizon_s: int
    intervals: list[PredictionInterval]
    y_true: np.ndarray
    y_hat: np.ndarray
    coverage: float
    mean_width: float
    infinite_interval_count: int

    def config_key(self) -> tuple:
        return (self.method, self.dataset, self.window_w, self.horizon_s, self.alpha)


@dataclass(frozen=True)
class AggregateResult:
    method: str
    dataset: str
    window_w: int
    horizon_s: int
    alpha: float
    n_seeds: int
    coverage_mean: float
    coverage_std: float
    width_mean: float
    width_std: float
    infinite_total: int
    single_seed: bool


# ------------------------------------------------------------------ metrics

def empirical_coverage(intervals: list[PredictionInterval], truths: np.ndarray) -> float:
    truths = np.asarray(truths, dtype=np.float64)
    if len(intervals) != len(truths):
        raise StructuralError(f"{len(intervals)} intervals vs {len(truths)} truths")
    if len(intervals) == 0:
        raise DataValidationError("cannot compute coverage of an empty trace")
    hits = sum(1 for iv, y in zip(intervals, truths) if interval_contains(iv, y))
    return hits / len(intervals)


def mean_width(intervals: list[PredictionInterval]) -> tuple[float, int]:
    """Mean width over finite intervals; infinite ones counted separately."""
    if len(intervals) == 0:
        raise DataValidationError("cannot compute width of an empty trace")
    finite = [iv.width for iv in intervals if iv.is_finite]
    n_inf = len(intervals) - len(finite)
    if not finite:
        return math.inf, n_inf
    return float(np.mean(finite)), n_inf


# ---------------------------------------------------------------- pipeline

def _load_series(dataset: DatasetSpec, seed: int) -> ObservationSeries:
    if isinstance(dataset, SimulationSpec):
        spec = replace(dataset, seed=derive_seed(seed, _STREAM_DATA))
        return simulate(spec)[0]
    return load_csv(dataset.path, dataset.schema)


def loo_residual_series(series: ObservationSeries, train_end: int, cfg: ExperimentConfig, seed: int) -> ResidualSeries:
    """LOO predictions on the training block, ensemble mean elsewhere."""
    X, y = series.features, series.outcomes
    params = TreeParams(cfg.point_max_depth, cfg.point_min_leaf, cfg.point_mtry)
    ensemble = fit_forest(X[:train_end], y[:train_end], cfg.point_trees,
                          params, derive_seed(seed, _STREAM_POINT_FOREST))
    per_tree_train = ensemble.predict_matrix(X[:train_end])  # (B, n_train)
    excluded = ~ensemble.bootstrap_masks
    counts = excluded.sum(axis=0)
    loo = np.where(
        counts > 0,
        (per_tree_train * excluded).sum(axis=0) / np.maximum(counts, 1),
        per_tree_train.mean(axis=0),
    )
    preds = np.empty(series.length)
    preds[:train_end] = loo
    if train_end < series.length:
        preds[train_end:] = ensemble.predict_matrix(X[train_end:]).mean(axis=0)
    return compute_residuals(series, preds)


def _decoder_estimator(
    series: ObservationSeries,
    residuals: ResidualSeries,
    sp: Split,
    cfg: ExperimentConfig,
    seed: int,
    level_set: QuantileLevelSet,
) -> DecoderResidualEstimator:
    w = cfg.window_w
    scaler = Standardizer.fit(series.features[: sp.train_end], residuals.residuals[: sp.train_end])
    feats_std = scaler.transform_features(series.features)
    resid_std = scaler.transform_residuals(residuals.residuals)
    train_x, train_y = build_windows(resid_std[: sp.train_end], feats_std[: sp.train_end], w)
    val_lo = sp.train_end - w
    if val_lo < 0 or sp.val_end - sp.train_end < 1:
        raise DataValidationError("validation block too small for the requested window")
    val_x, val_y = build_windows(resid_std[val_lo : sp.val_end], feats_std[val_lo : sp.val_end], w)
    config = DecoderConfig(
        window_w=w,
        input_dim=series.dim + 1,
        quantile_levels=tuple(level_set.levels),
        d_model=cfg.d_model,
        n_heads=cfg.n_heads,
        n_layers=cfg.n_layers,
        dropout=cfg.dropout,
        seed=derive_seed(seed, _STREAM_DECODER),
        learning_rate=cfg.learning_rate,
        batch_size=cfg.batch_size,
        max_epochs=cfg.max_epochs,
        early_stop_patience=cfg.early_stop_patience,
    )
    model, result = train(config, train_x, train_y, val_x, val_y,
                          continue_on_validation=cfg.continue_on_validation)
    return DecoderResidualEstimator(model, scaler, level_set), result


def _forest_estimator(
    series: ObservationSeries,
    residuals: ResidualSeries,
    upto: int,
    cfg: ExperimentConfig,
    seed: int,
    level_set: QuantileLevelSet,
) -> ForestResidualEstimator:
    w = cfg.window_w
    win_x, win_y = build_windows(residuals.residuals[:upto], series.features[:upto], w)
    flat = win_x.reshape(len(win_x), -1)
    mtry = cfg.qrf_mtry if cfg.qrf_mtry is not None else math.ceil(math.sqrt(flat.shape[1]))
    params = TreeParams(cfg.qrf_max_depth, cfg.qrf_min_leaf, mtry)
    ensemble = fit_qrf(flat, win_y, cfg.qrf_trees, params, derive_seed(seed, _STREAM_QRF))
    return ForestResidualEstimator(ensemble, win_y, level_set)


def run_experiment(dataset: DatasetSpec, cfg: ExperimentConfig, seed: int) -> RunResult:
    results = run_multistep(dataset, cfg, seed, horizons=(cfg.horizon_s,))
    return results[cfg.horizon_s]


def run_multistep(
    dataset: DatasetSpec, cfg: ExperimentConfig, seed: int, horizons: tuple[int, ...]
) -> dict[int, RunResult]:
    """Run one method once, emitting intervals for each requested horizon.

    The residual model is trained a single time; horizons beyond 1 use the
    generative rollout and are only defined for the decoder method.
    """
    horizons = tuple(sorted(set(int(s) for s in horizons)))
    if any(s < 1 for s in horizons):
        raise DataValidationError("horizons must be >= 1")
    if any(s > 1 for s in horizons) and cfg.method != "spci-t":
        raise DataValidationError("multi-step rollout is defined for the decoder method only")

    series = _load_series(dataset, seed)
    mode = "spcit_8_1_1" if cfg.method == "spci-t" else "baseline_9_1"
    sp = split(series, mode)
    residuals = loo_residual_series(series, sp.train_end, cfg, seed)
    level_set = QuantileLevelSet.for_alpha(cfg.alpha)
    icfg = cfg.interval_config()
    test_start = sp.test_start

    out: dict[int, RunResult] = {}
    if cfg.method == "nexcp":
        intervals_by_s = {1: sequential_nexcp(series, residuals, icfg, test_start)}
    elif cfg.method == "enbpi":
        intervals_by_s = {1: sequential_enbpi(series, residuals, icfg, test_start)}
    elif cfg.method == "spci":
        estimator = _forest_estimator(series, residuals, sp.train_end, cfg, seed, level_set)
        refit = None
        if cfg.refit_period:
            refit = lambda upto: _forest_estimator(series, residuals, upto, cfg, seed, level_set)
        intervals_by_s = {
            1: sequential_spci(series, residuals, estimator, icfg, test_start, refit=refit)
        }
    elif cfg.method == "spci-t":
        estimator, _ = _decoder_estimator(series, residuals, sp, cfg, seed, level_set)
        intervals_by_s = {
            s: multistep_intervals(series, residuals, estimator, s, icfg, test_start)
            for s in horizons
        }
    else:  # pragma: no cover - config validation catches this
        raise DataValidationError(f"unknown method {cfg.method!r}")

    y_true = series.outcomes[test_start:]
    y_hat = residuals.point_predictions[test_start:]
    for s in horizons:
        intervals = intervals_by_s.get(s)
        if intervals is None:
            raise DataValidationError(f"horizon {s} unavailable for method {cfg.method!r}")
        cov = empirical_coverage(intervals, y_true)
        width, n_inf = mean_width(intervals)
        out[s] = RunResult(
            method=cfg.method,
            dataset=dataset_label(dataset),
            seed=seed,
            alpha=cfg.alpha,
            window_w=cfg.window_w,
            horizon_s=s,
            intervals=intervals,
            y_true=y_true.copy(),
            y_hat=y_hat.copy(),
            coverage=cov,
            mean_width=width,
            infinite_interval_count=n_inf,
        )
    return out


# --------------------------------------------------------------- aggregation

def aggregate(results: list[RunResult]) -> AggregateResult:
    if not results:
        raise DataValidationError("nothing to aggregate")
    keys = {r.config_key() for r in results}
    if len(keys) > 1:
        raise StructuralError(f"heterogeneous configurations in one aggregate: {sorted(keys)}")
    cov = np.array([r.coverage for r in results])
    wid = np.array([r.mean_width for r in results])
    n = len(results)
    head = results[0]
    return AggregateResult(
        method=head.method,
        dataset=head.dataset,
        window_w=head.window_w,
        horizon_s=head.horizon_s,
        alpha=head.alpha,
        n_seeds=n,
        coverage_mean=float(cov.mean()),
        coverage_std=float(cov.std(ddof=1)) if n > 1 else 0.0,
        width_mean=float(wid.mean()),
        width_std=float(wid.std(ddof=1)) if n > 1 else 0.0,
        infinite_total=sum(r.infinite_interval_count for r in results),
        single_seed=n == 1,
    )


def aggregate_by_config(results: list[RunResult]) -> list[AggregateResult]:
    groups: dict[tuple, list[RunResult]] = {}
    for r in results:
        groups.setdefault(r.config_key(), []).append(r)
    return [aggregate(groups[k]) for k in sorted(groups)]


# ------------------------------------------------------------------ reports

_REPORT_COLUMNS = (
    "method", "dataset", "window_w", "horizon_s", "alpha", "n_seeds",
    "coverage_mean", "coverage_std", "width_mean", "width_std", "infinite_total",
)


def _sig4(x: float) -> str:
    return f"{x:.4g}"


def emit_report(aggregates: list[AggregateResult], fmt: str, path: str | Path) -> Path:
    """One row per (method, dataset, w, s); markdown rounds to 4 significant digits."""
    if not aggregates:
        raise DataValidationError("empty report")
    path = Path(path)
    rows = [[getattr(a, c) for c in _REPORT_COLUMNS] for a in aggregates]
    if fmt == "csv":
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(_REPORT_COLUMNS)
            for row in rows:
                writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    elif fmt == "markdown_table":
        lines = ["| " + " | ".join(_REPORT_COLUMNS) + " |",
                 "|" + "|".join(["---"] * len(_REPORT_COLUMNS)) + "|"]
        for row in rows:
            lines.append("| " + " | ".join(_sig4(v) if isinstance(v, float) else str(v) for v in row) + " |")
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    elif fmt == "json":
        path.write_text(json.dumps([asdict(a) for a in aggregates], indent=2), encoding="utf-8")
    else:
        raise DataValidationError(f"unknown report format {fmt!r}")
    return path


def report_from_json(path: str | Path) -> list[AggregateResult]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return [AggregateResult(**entry) for entry in data]


# ----------------------------------------------------------- trace artifacts

def write_trace_csv(run: RunResult, path: str | Path) -> Path:
    """Interval trace: t, y_true, y_hat, lower, upper, covered, width."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "y_true", "y_hat", "lower", "upper", "covered", "width"])
        for iv, y, yh in zip(run.intervals, run.y_true, run.y_hat):
            writer.writerow([
                iv.t, repr(float(y)), repr(float(yh)), repr(iv.lower), repr(iv.upper),
                int(interval_contains(iv, y)), repr(iv.width),
            ])
    return path


def read_trace_csv(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise DataValidationError(f"{path}: empty trace")
    cols = {}
    for key in ("t", "y_true", "y_hat", "lower", "upper", "covered", "width"):
        cols[key] = np.array([float(r[key]) for r in rows])
    return cols


def emit_band_plot_data(run: RunResult, csv_path: str | Path, svg_path: str | Path | None = None) -> Path:
    """Band-plot data (t, y_true, lower, upper) and an optional SVG band.

    The SVG viewBox is expressed in data coordinates (y negated for screen
    orientation), so the polygon's y extent equals [min lower, max upper].
    """
    csv_path = Path(csv_path)
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "y_true", "lower", "upper"])
        for iv, y in zip(run.intervals, run.y_true):
            writer.writerow([iv.t, repr(float(y)), repr(iv.lower), repr(iv.upper)])
    if svg_path is not None:
        _write_band_svg(run, Path(svg_path))
    return csv_path


def _write_band_svg(run: RunResult, path: Path) -> None:
    finite = [iv for iv in run.intervals if iv.is_finite]
    if not finite:
        raise DataValidationError("no finite intervals to plot")
    ts = np.array([iv.t for iv in finite], dtype=float)
    lo = np.array([iv.lower for iv in finite])
    hi = np.array([iv.upper for iv in finite])
    ys = run.y_true
    y_min = min(lo.min(), ys.min())
    y_max = max(hi.max(), ys.max())
    pad_x = max(1.0, 0.02 * (ts[-1] - ts[0]))
    pad_y = max(1e-9, 0.05 * (y_max - y_min))
    band = " ".join(f"{t},{-v}" for t, v in zip(ts, hi)) + " " + " ".join(
        f"{t},{-v}" for t, v in zip(ts[::-1], lo[::-1])
    )
    truth = " ".join(f"{iv.t},{-y}" for iv, y in zip(run.intervals, ys))
    stroke = 0.006 * max(y_max - y_min, 1e-9)
    svg = (
        f'<svg xmlns="http://www.w3.org/2000/svg" '
        f'viewBox="{ts[0] - pad_x} {-(y_max + pad_y)} {ts[-1] - ts[0] + 2 * pad_x} '
        f'{y_max - y_min + 2 * pad_y}">\n'
        f'  <title>{sax.escape(run.method)} on {sax.escape(run.dataset)} '
        f'(seed {run.seed}, alpha {run.alpha})</title>\n'
        f'  <polygon points="{band}" fill="#9ecae1" fill-opacity="0.6" stroke="none"/>\n'
        f'  <polyline points="{truth}" fill="none" stroke="#d62728" stroke-width="{stroke}"/>\n'
        f"</svg>\n"
    )
    path.write_text(svg, encoding="utf-8")


def band_plot_from_trace(
    trace_path: str | Path,
    csv_path: str | Path,
    svg_path: str | Path | None = None,
    alpha: float = 0.1,
) -> Path:
    """Rebuild band-plot files from a previously written trace CSV."""
    cols = read_trace_csv(trace_path)
    level = SignificanceLevel(alpha)
    intervals = [
        PredictionInterval(int(t), lo, hi, level)
        for t, lo, hi in zip(cols["t"], cols["lower"], cols["upper"])
    ]
    width, n_inf = mean_width(intervals)
    run = RunResult(
        method="trace",
        dataset=Path(trace_path).stem,
        seed=0,
        alpha=alpha,
        window_w=0,
        horizon_s=1,
        intervals=intervals,
        y_true=cols["y_true"],
        y_hat=cols["y_hat"],
        coverage=empirical_coverage(intervals, cols["y_true"]),
        mean_width=width,
        infinite_interval_count=n_inf,
    )
    return emit_band_plot_data(run, csv_path, svg_path)


def train_residual_model(dataset: DatasetSpec, cfg: ExperimentConfig, seed: int, out_dir: Path) -> dict[str, Path]:
    """Fit the method's residual model and persist it for later resumption."""
    series = _load_series(dataset, seed)
    mode = "spcit_8_1_1" if cfg.method == "spci-t" else "baseline_9_1"
    sp = split(series, mode)
    residuals = loo_residual_series(series, sp.train_end, cfg, seed)
    level_set = QuantileLevelSet.for_alpha(cfg.alpha)
    out_dir = Path(out_dir)
    label = dataset_label(dataset)
    if cfg.method == "spci-t":
        estimator, result = _decoder_estimator(series, residuals, sp, cfg, seed, level_set)
        ckpt = out_dir / f"decoder_{label}_seed{seed}.npz"
        curve = out_dir / f"losses_{label}_seed{seed}.csv"
        save_checkpoint(ckpt, estimator.model, result)
        write_loss_curve(curve, result)
        return {"checkpoint": ckpt, "loss_curve": curve}
    if cfg.method == "spci":
        estimator = _forest_estimator(series, residuals, sp.train_end, cfg, seed, level_set)
        dump = out_dir / f"qrf_{label}_seed{seed}.json"
        ensemble_to_json(estimator.ensemble, dump)
        return {"forest": dump}
    raise DataValidationError(f"method {cfg.method!r} has no trainable residual model")


def write_manifest(path: str | Path, dataset: DatasetSpec, cfg: ExperimentConfig, seed: int) -> Path:
    """Replay manifest: dataset + effective config + seed + version string."""
    if isinstance(dataset, SimulationSpec):
        ds = {"type": "simulation", **asdict(dataset)}
    else:
        ds = {"type": "csv", "path": str(dataset.path), "schema": asdict(dataset.schema)}
    doc = {
        "version": f"spcit-{__version__}",
        "seed": seed,
        "dataset": ds,
        "config": asdict(cfg),
    }
    path = Path(path)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True), encoding="utf-8")
    return path
