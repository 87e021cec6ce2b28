"""Synthetic series generators, CSV ingestion, feature engineering, splits.

Simulator draw order (per :mod:`spcit.rng`, one Stream per simulation):

1. sparse coefficient vector: ``k = ceil(sparsity * d)`` nonzero positions via
   ``choice_without_replacement(d, k)`` (k uniforms), then k Unif(0,1) values
   assigned to the chosen positions in ascending position order;
2. for each t = 1..T: d uniforms for the feature vector (dimension order),
   then one Gaussian innovation (two uniforms, Box-Muller cosine branch).

Both simulators share the feature law ``X_{t,j} ~ Unif(0, exp(0.01 * mod(t, 100)))``
and the AR(1) recursion ``eps_t = rho * eps_{t-1} + e_t`` with ``eps_0 = 0``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import DataValidationError, ObservationSeries, StructuralError
from .rng import Stream


@dataclass(frozen=True)
class SimulationSpec:
    kind: str  # "nonstationary" | "heteroskedastic"
    T: int = 2000
    d: int = 10
    ar_rho: float = 0.6
    sparsity: float = 0.2
    seed: int = 0
    # When False, heteroskedastic innovations are N(0, sigma^2) without the
    # sqrt(1-rho^2) factor that matches the stationary target variance.
    scale_innovations: bool = True

    def __post_init__(self):
        if self.kind not in ("nonstationary", "heteroskedastic"):
            raise DataValidationError(f"unknown simulation kind {self.kind!r}")
        if self.T < 1 or self.d < 1:
            raise DataValidationError("T and d must be >= 1")
        if not 0.0 <= self.ar_rho < 1.0:
            raise DataValidationError("ar_rho must lie in [0, 1)")
        if not 0.0 < self.sparsity <= 1.0:
            raise DataValidationError("sparsity must lie in (0, 1]")


def cycle_position(t: int) -> int:
    """mod(t, 100) with the zero case mapped to 100 (keeps log finite)."""
    m = t % 100
    return 100 if m == 0 else m


def seasonal_gain(t: int) -> float:
    """log(t') * sin(2 pi t' / 100) with t' = cycle_position(t)."""
    tp = cycle_position(t)
    return math.log(tp) * math.sin(2.0 * math.pi * tp / 100.0)


def feature_response(u: np.ndarray | float) -> np.ndarray | float:
    """(|u| + u^2 + |u|^3)^(1/4), the nonlinear signal in both simulators."""
    a = np.abs(u)
    return (a + a**2 + a**3) ** 0.25


def sparse_coefficients(d: int, sparsity: float, stream: Stream) -> np.ndarray:
    """Sparse Unif(0,1) coefficient vector with ceil(sparsity*d) nonzeros."""
    k = math.ceil(sparsity * d)
    positions = np.sort(stream.choice_without_replacement(d, k))
    beta = np.zeros(d)
    beta[positions] = stream.uniform(k)
    return beta


def ar1_path(innovation_scales: np.ndarray, rho: float, stream: Stream) -> np.ndarray:
    """AR(1) path eps_t = rho*eps_{t-1} + scale_t * n_t, eps_0 = 0.

    Gaussians are drawn in one vectorized block (2*T uniforms); used by tests
    that need long frozen-scale paths. The simulators interleave draws per
    step instead (see module docstring).
    """
    scales = np.asarray(innovation_scales, dtype=np.float64)
    e = scales * stream.normal(len(scales))
    eps = np.empty(len(scales))
    prev = 0.0
    for t in range(len(scales)):
        prev = rho * prev + e[t]
        eps[t] = prev
    return eps


def _simulate(spec: SimulationSpec) -> tuple[ObservationSeries, np.ndarray]:
    stream = Stream(spec.seed)
    beta = sparse_coefficients(spec.d, spec.sparsity, stream)
    rho = spec.ar_rho
    X = np.empty((spec.T, spec.d))
    y = np.empty(spec.T)
    noise = np.empty(spec.T)
    eps = 0.0
    for i in range(spec.T):
        t = i + 1
        envelope = math.exp(0.01 * cycle_position(t))
        x = stream.uniform(spec.d) * envelope
        n = stream.normal()
        u = float(beta @ x)
        if spec.kind == "nonstationary":
            f = seasonal_gain(t) * feature_response(u)
            e = n
        else:
            f = feature_response(u)
            sigma = float(np.sum(x))
            scale = sigma * math.sqrt(1.0 - rho * rho) if spec.scale_innovations else sigma
            e = scale * n
        eps = rho * eps + e
        X[i] = x
        noise[i] = eps
        y[i] = f + eps
    names = tuple(f"x{j + 1}" for j in range(spec.d))
    return ObservationSeries(X, y, t0=1, feature_names=names), noise


def gen_nonstationary(spec: SimulationSpec) -> tuple[ObservationSeries, np.ndarray]:
    if spec.kind != "nonstationary":
        raise DataValidationError("spec.kind must be 'nonstationary'")
    return _simulate(spec)


def gen_heteroskedastic(spec: SimulationSpec) -> tuple[ObservationSeries, np.ndarray]:
    if spec.kind != "heteroskedastic":
        raise DataValidationError("spec.kind must be 'heteroskedastic'")
    return _simulate(spec)


def simulate(spec: SimulationSpec) -> tuple[ObservationSeries, np.ndarray]:
    return _simulate(spec)


# ---------------------------------------------------------------- schemas

@dataclass(frozen=True)
class DatasetSchema:
    """Column roles for a CSV dataset."""

    name: str
    feature_columns: tuple[str, ...]
    outcome_column: str
    hourly_onehot: bool = False
    samples_per_day: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "feature_columns", tuple(self.feature_columns))
        if self.outcome_column in self.feature_columns:
            raise DataValidationError(
                f"outcome column {self.outcome_column!r} also listed as a feature"
            )


def builtin_schemas() -> dict[str, DatasetSchema]:
    """Schemas for the bundled dataset layouts.

    wind: ten farm columns at 15-minute cadence; the first column is the
    outcome by default (overridable via a schema config file).
    """
    return {
        "solar": DatasetSchema(
            "solar",
            ("dni", "dew_point", "surface_albedo", "wind_speed",
             "relative_humidity", "temperature", "pressure"),
            "dhi",
            samples_per_day=48,
        ),
        "solar_hourly": DatasetSchema(
            "solar_hourly",
            ("dni", "dew_point", "surface_albedo", "wind_speed",
             "relative_humidity", "temperature", "pressure"),
            "dhi",
            hourly_onehot=True,
            samples_per_day=48,
        ),
        "wind": DatasetSchema(
            "wind",
            tuple(f"farm_{j}" for j in range(1, 10)),
            "farm_0",
            samples_per_day=96,
        ),
        "electricity": DatasetSchema(
            "electricity",
            ("nswprice", "vicprice", "nswdemand", "vicdemand"),
            "transfer",
            samples_per_day=48,
        ),
    }


def simulated_schema(d: int) -> DatasetSchema:
    """Schema matching the simulator CSV dump (t, x1..xd, y, eps_true)."""
    return DatasetSchema("simulated", tuple(f"x{j + 1}" for j in range(d)), "y")


def load_schema_config(path: str | Path) -> dict[str, DatasetSchema]:
    """Read user schemas from a JSON file: name -> column lists."""
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    out = {}
    for name, entry in raw.items():
        out[name] = DatasetSchema(
            name,
            tuple(entry["feature_columns"]),
            entry["outcome_column"],
            hourly_onehot=bool(entry.get("hourly_onehot", False)),
            samples_per_day=entry.get("samples_per_day"),
        )
    return out


def resolve_schema(name: str, config_path: str | Path | None = None) -> DatasetSchema:
    schemas = builtin_schemas()
    if config_path is not None:
        schemas.update(load_schema_config(config_path))
    if name not in schemas:
        raise DataValidationError(f"unknown schema {name!r}; known: {sorted(schemas)}")
    return schemas[name]


# ---------------------------------------------------------------- CSV io

def load_csv(path: str | Path, schema: DatasetSchema) -> ObservationSeries:
    """Load a header-first CSV ('.' decimals, UTF-8) under a schema.

    Rows become t = 1..T in file order. Any missing or non-numeric cell in a
    schema column aborts with the 1-based data row and the column name.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataValidationError(f"{path}: file is empty (no header row)")
        header = set(reader.fieldnames)
        wanted = list(schema.feature_columns) + [schema.outcome_column]
        missing = [c for c in wanted if c not in header]
        if missing:
            raise DataValidationError(f"{path}: header is missing columns {missing}")
        feats: list[list[float]] = []
        outs: list[float] = []
        for rownum, row in enumerate(reader, start=1):
            vals = []
            for col in wanted:
                cell = row.get(col)
                if cell is None or cell.strip() == "":
                    raise DataValidationError(f"{path}: row {rownum}, column {col!r}: missing value")
                try:
                    v = float(cell)
                except ValueError:
                    raise DataValidationError(
                        f"{path}: row {rownum}, column {col!r}: cannot parse {cell!r} as a number"
                    ) from None
                if not math.isfinite(v):
                    raise DataValidationError(f"{path}: row {rownum}, column {col!r}: non-finite value")
                vals.append(v)
            feats.append(vals[:-1])
            outs.append(vals[-1])
    if not outs:
        raise DataValidationError(f"{path}: no data rows")
    series = ObservationSeries(np.array(feats), np.array(outs), t0=1, feature_names=schema.feature_columns)
    if schema.hourly_onehot:
        if schema.samples_per_day is None:
            raise DataValidationError(f"schema {schema.name!r} sets hourly_onehot without samples_per_day")
        series = add_hourly_onehot(series, schema.samples_per_day)
    return series


def dump_simulation_csv(path: str | Path, series: ObservationSeries, noise: np.ndarray) -> None:
    """Write a simulated series as CSV with columns t, x1..xd, y, eps_true."""
    if len(noise) != series.length:
        raise StructuralError("noise length does not match series")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t"] + [f"x{j + 1}" for j in range(series.dim)] + ["y", "eps_true"])
        for i, t in enumerate(series.times()):
            writer.writerow(
                [int(t)]
                + [repr(float(v)) for v in series.features[i]]
                + [repr(float(series.outcomes[i])), repr(float(noise[i]))]
            )


# ------------------------------------------------------ feature engineering

def add_hourly_onehot(series: ObservationSeries, samples_per_day: int) -> ObservationSeries:
    """Append 24 hour-of-day indicator columns.

    Row i (0-based from the series start) falls in hour
    ``(i mod samples_per_day) // (samples_per_day // 24)``.
    """
    if samples_per_day < 24 or samples_per_day % 24 != 0:
        raise DataValidationError(
            f"samples_per_day={samples_per_day} does not map onto 24 hourly buckets"
        )
    per_hour = samples_per_day // 24
    hours = (np.arange(series.length) % samples_per_day) // per_hour
    onehot = np.zeros((series.length, 24))
    onehot[np.arange(series.length), hours] = 1.0
    names = None
    if series.feature_names is not None:
        names = series.feature_names + tuple(f"hour_{h:02d}" for h in range(24))
    return ObservationSeries(
        np.hstack([series.features, onehot]), series.outcomes, t0=series.t0, feature_names=names
    )


# ---------------------------------------------------------------- splits

@dataclass(frozen=True)
class Split:
    train: ObservationSeries
    validation: ObservationSeries | None
    test: ObservationSeries
    train_end: int
    val_end: int  # == train_end when there is no validation block

    @property
    def test_start(self) -> int:
        return self.val_end


def split(series: ObservationSeries, mode: str) -> Split:
    """Contiguous chronological split.

    The test block is always the final ceil(0.1*T) rows, so both modes score
    the same points. ``spcit_8_1_1`` carves train = floor(0.8*T) with the
    remainder in the middle as validation; ``baseline_9_1`` uses
    train = floor(0.9*T) with no validation block.
    """
    T = series.length
    if T < 10:
        raise DataValidationError(f"series too short to split (T={T} < 10)")
    n_test = math.ceil(0.1 * T)
    test_start = T - n_test
    if mode == "spcit_8_1_1":
        train_end = math.floor(0.8 * T)
        return Split(
            series.slice(0, train_end),
            series.slice(train_end, test_start),
            series.slice(test_start, T),
            train_end,
            test_start,
        )
    if mode == "baseline_9_1":
        train_end = math.floor(0.9 * T)
        assert train_end == test_start
        return Split(series.slice(0, train_end), None, series.slice(test_start, T), train_end, test_start)
    raise DataValidationError(f"unknown split mode {mode!r}")
