"""Long-format CSV ingestion, calendar covariates, scaling, splitting and a synthetic sampler."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

from .errors import AlignmentError, GapError, LengthError, ParseError
from .gp import KernelParams, rbf_kernel_matrix
from .linalg import cholesky

HOUR = np.timedelta64(1, "h")
FEATURES = ("hour_sin", "hour_cos", "dow_sin", "dow_cos", "time")
# Linear time stays opt-in: forecasts would feed the LSTM inputs beyond its training range.
DEFAULT_FEATURES = FEATURES[:4]
CSV_HEADER = ("series_id", "timestamp", "value")
TRUTH_HEADER = ("series_id", "timestamp", "z", "f", "r")
SCALE_FLOOR = 1e-3


@dataclass(frozen=True)
class FeatureSpec:
    features: tuple[str, ...] = DEFAULT_FEATURES

    def __post_init__(self):
        unknown = [f for f in self.features if f not in FEATURES]
        if unknown:
            raise ValueError(f"unknown features {unknown}; choose from {FEATURES}")
        if len(set(self.features)) != len(self.features):
            raise ValueError("duplicate feature names")

    @property
    def d(self) -> int:
        return len(self.features)


@dataclass
class TimeSeries:
    id: str
    timestamps: np.ndarray  # datetime64[s], strictly increasing
    values: np.ndarray  # float64

    def __len__(self) -> int:
        return self.values.size


@dataclass
class TimeSeriesDataset:
    series: list[TimeSeries]
    frequency: np.timedelta64 = HOUR
    covariate_spec: FeatureSpec = field(default_factory=FeatureSpec)

    @property
    def N(self) -> int:
        return len(self.series)

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.series]

    def __getitem__(self, series_id: str) -> TimeSeries:
        for s in self.series:
            if s.id == series_id:
                return s
        raise KeyError(series_id)


# ------------------------------------------------------------------ CSV


def parse_timestamp(text: str) -> np.datetime64:
    """ISO-8601 to a naive UTC ``datetime64[s]``; naive inputs are taken as UTC."""
    text = text.strip()
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is not None:
        dt = dt.astimezone(timezone.utc).replace(tzinfo=None)
    return np.datetime64(dt, "s")


def format_timestamp(ts: np.datetime64) -> str:
    return str(np.datetime64(ts, "s"))


def read_long_rows(path, id_col="series_id", time_col="timestamp",
                   value_col="value") -> dict[str, dict[np.datetime64, float]]:
    """Raw ``{series_id: {timestamp: value}}`` in file order, validated row by row."""
    rows: dict[str, dict[np.datetime64, float]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", line=1) from None
        header = [h.strip() for h in header]
        try:
            ci = (header.index(id_col), header.index(time_col), header.index(value_col))
        except ValueError:
            raise ParseError(f"header must contain {id_col},{time_col},{value_col}; got {header}",
                             line=1) from None
        for rec in reader:
            line = reader.line_num
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(rec)}", line=line)
            sid = rec[ci[0]].strip()
            if not sid:
                raise ParseError("empty series_id", line=line)
            try:
                ts = parse_timestamp(rec[ci[1]])
            except ValueError:
                raise ParseError(f"bad timestamp {rec[ci[1]]!r}", line=line) from None
            try:
                val = float(rec[ci[2]])
            except ValueError:
                raise ParseError(f"bad value {rec[ci[2]]!r}", line=line) from None
            if not math.isfinite(val):
                raise ParseError(f"non-finite value {rec[ci[2]]!r}", line=line)
            series = rows.setdefault(sid, {})
            if ts in series:
                raise ParseError(f"duplicate timestamp {format_timestamp(ts)} for series {sid!r}",
                                 line=line)
            series[ts] = val
    return rows


def load_long_csv(path, id_col="series_id", time_col="timestamp", value_col="value",
                  frequency=HOUR) -> TimeSeriesDataset:
    """Read ``series_id,timestamp,value`` rows into a gap-free hourly dataset.

    A single missing step is filled by linear interpolation; anything longer
    raises :class:`GapError`.
    """
    rows = read_long_rows(path, id_col, time_col, value_col)
    out = []
    for sid, points in rows.items():
        stamps = np.array(sorted(points), dtype="datetime64[s]")
        values = np.array([points[t] for t in stamps], dtype=np.float64)
        out.append(_regularize(sid, stamps, values, np.timedelta64(frequency, "s")))
    return TimeSeriesDataset(series=out, frequency=frequency)


def _regularize(sid, stamps, values, step) -> TimeSeries:
    if stamps.size < 2:
        return TimeSeries(sid, stamps, values)
    gaps = np.diff(stamps)
    if np.any(gaps % step != np.timedelta64(0, "s")):
        bad = int(np.argmax(gaps % step != np.timedelta64(0, "s")))
        raise GapError(f"series {sid!r}: irregular spacing after {format_timestamp(stamps[bad])}")
    steps = (gaps // step).astype(np.int64)
    if np.any(steps > 2):
        bad = int(np.argmax(steps > 2))
        raise GapError(
            f"series {sid!r}: {steps[bad] - 1} missing steps after {format_timestamp(stamps[bad])}"
        )
    if not np.any(steps == 2):
        return TimeSeries(sid, stamps, values)
    full = np.arange(stamps[0], stamps[-1] + step, step)
    filled = np.interp(
        (full - stamps[0]).astype(np.float64), (stamps - stamps[0]).astype(np.float64), values
    )
    return TimeSeries(sid, full, filled)


def write_long_csv(dataset: TimeSeriesDataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for s in dataset.series:
            for ts, v in zip(s.timestamps, s.values):
                w.writerow((s.id, format_timestamp(ts), repr(float(v))))


# ------------------------------------------------------------------ features


def build_features(timestamps, spec: FeatureSpec = FeatureSpec(), train_length: int | None = None) -> np.ndarray:
    """Calendar covariates for an hourly grid, shape (T, d).

    Hour-of-day and day-of-week (Monday = 0) enter as sine/cosine pairs; the
    linear time feature is ``t / train_length`` with ``t`` counted from 1.
    """
    stamps = np.asarray(timestamps, dtype="datetime64[s]")
    T = stamps.size
    train_length = T if train_length is None else train_length
    secs = stamps.astype(np.int64)
    hour = (secs // 3600) % 24
    # 1970-01-01 was a Thursday.
    dow = (secs // 86400 + 3) % 7
    cols = {
        "hour_sin": np.sin(2.0 * np.pi * hour / 24.0),
        "hour_cos": np.cos(2.0 * np.pi * hour / 24.0),
        "dow_sin": np.sin(2.0 * np.pi * dow / 7.0),
        "dow_cos": np.cos(2.0 * np.pi * dow / 7.0),
        "time": np.arange(1, T + 1, dtype=np.float64) / float(max(train_length, 1)),
    }
    if T == 0:
        return np.zeros((0, spec.d))
    return np.column_stack([cols[f] for f in spec.features])


def normalized_time(n_points: int, train_length: int, offset: int = 0) -> np.ndarray:
    """GP inputs ``t / train_length`` for ``t = offset+1 .. offset+n_points``."""
    return np.arange(offset + 1, offset + n_points + 1, dtype=np.float64) / float(train_length)


# ------------------------------------------------------------------ scaling


@dataclass
class SeriesScaler:
    scales: np.ndarray  # (N,)

    def apply(self, values, index=None) -> np.ndarray:
        return np.asarray(values, dtype=np.float64) / self._pick(values, index)

    def inverse(self, values, index=None) -> np.ndarray:
        return np.asarray(values, dtype=np.float64) * self._pick(values, index)

    def _pick(self, values, index):
        if index is not None:
            return self.scales[index]
        v = np.asarray(values)
        return self.scales.reshape((-1,) + (1,) * (v.ndim - 1))


def fit_scaler(train_values) -> SeriesScaler:
    """``s_i = max(mean |z_i|, 1e-3)`` over each row of the training window."""
    z = np.atleast_2d(np.asarray(train_values, dtype=np.float64))
    return SeriesScaler(np.maximum(np.mean(np.abs(z), axis=1), SCALE_FLOOR))


# ------------------------------------------------------------------ splitting


@dataclass
class SplitData:
    """Aligned training windows and evaluation targets over one shared time grid."""

    series_ids: list[str]
    train_timestamps: np.ndarray  # (W,)
    eval_timestamps: np.ndarray  # (tau,)
    train_values: np.ndarray  # (N, W)
    eval_values: np.ndarray  # (N, tau)
    covariates: np.ndarray  # (W + tau, d)
    feature_spec: FeatureSpec

    @property
    def train_window(self) -> int:
        return self.train_values.shape[1]

    @property
    def horizon(self) -> int:
        return self.eval_values.shape[1]


def split_train_eval(dataset: TimeSeriesDataset, train_window: int, horizon: int,
                     spec: FeatureSpec | None = None) -> SplitData:
    """Hold out the last ``horizon`` points; the ``train_window`` before them train."""
    if train_window < 1 or horizon < 0:
        raise ValueError("train_window must be >= 1 and horizon >= 0")
    spec = spec or dataset.covariate_spec
    need = train_window + horizon
    train_vals, eval_vals, grid = [], [], None
    for s in dataset.series:
        if len(s) < need:
            raise LengthError(
                f"series {s.id!r} has {len(s)} points, needs train_window + horizon = {need}"
            )
        stamps = s.timestamps[len(s) - need:]
        if grid is None:
            grid = stamps
        elif not np.array_equal(grid, stamps):
            raise AlignmentError(f"series {s.id!r} is not on the same time grid as {dataset.series[0].id!r}")
        tail = s.values[len(s) - need:]
        train_vals.append(tail[:train_window])
        eval_vals.append(tail[train_window:])
    if grid is None:
        raise LengthError("dataset has no series")
    return SplitData(
        series_ids=dataset.ids,
        train_timestamps=grid[:train_window],
        eval_timestamps=grid[train_window:],
        train_values=np.array(train_vals),
        eval_values=np.array(eval_vals).reshape(len(train_vals), horizon),
        covariates=build_features(grid, spec, train_length=train_window),
        feature_spec=spec,
    )


def future_window(dataset: TimeSeriesDataset, train_window: int, horizon: int,
                  spec: FeatureSpec | None = None) -> SplitData:
    """Condition on the last ``train_window`` points and extend the grid ``horizon`` steps past the data."""
    spec = spec or dataset.covariate_spec
    split = split_train_eval(dataset, train_window, 0, spec)
    step = np.timedelta64(dataset.frequency, "s")
    last = split.train_timestamps[-1]
    future = last + step * np.arange(1, horizon + 1)
    grid = np.concatenate([split.train_timestamps, future]).astype("datetime64[s]")
    split.eval_timestamps = future.astype("datetime64[s]")
    split.eval_values = np.full((len(split.series_ids), horizon), np.nan)
    split.covariates = build_features(grid, spec, train_length=train_window)
    return split


# ------------------------------------------------------------------ synthetic data


@dataclass
class SynthConfig:
    """Sampler settings; lengthscale is in time steps."""

    n_series: int = 20
    length: int = 192
    n_factors: int = 2
    noise: float = 0.1
    gp_amplitude: float = 0.3
    gp_lengthscale: float = 6.0
    seed: int = 0
    start: str = "2014-03-03T00:00:00"
    periods: tuple[float, ...] = (24.0, 12.0, 168.0)
    period_amplitudes: tuple[float, ...] = (1.0, 0.4, 0.4)

    def __post_init__(self):
        if self.n_series < 1 or self.length < 1 or self.n_factors < 1:
            raise ValueError("n_series, length and n_factors must be positive")
        if self.noise < 0 or self.gp_amplitude < 0 or self.gp_lengthscale <= 0:
            raise ValueError("noise and gp_amplitude must be >= 0, gp_lengthscale > 0")
        if len(self.periods) != len(self.period_amplitudes):
            raise ValueError("periods and period_amplitudes must have equal length")


@dataclass
class SynthTruth:
    f: np.ndarray  # (N, T) fixed effect
    r: np.ndarray  # (N, T) GP residual paths
    factors: np.ndarray  # (K, T)
    loadings: np.ndarray  # (N, K)


def synth_generate(config: SynthConfig = SynthConfig()) -> tuple[TimeSeriesDataset, SynthTruth]:
    """Draw series from the factor-plus-GP generative model.

    Each factor is a sum of sinusoids (one per configured period, amplitude
    scaled by Uniform(0.5, 1.5), uniform random phase); loadings are standard
    normal; residuals are RBF-GP paths; observation noise is Gaussian.
    """
    rng = np.random.default_rng(config.seed)
    N, T, K = config.n_series, config.length, config.n_factors
    t = np.arange(T, dtype=np.float64)

    periods = np.asarray(config.periods, dtype=np.float64)
    amps = np.asarray(config.period_amplitudes) * rng.uniform(0.5, 1.5, size=(K, periods.size))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(K, periods.size))
    factors = np.zeros((K, T))
    for k in range(K):
        for j, p in enumerate(periods):
            factors[k] += amps[k, j] * np.sin(2.0 * np.pi * t / p + phases[k, j])
    loadings = rng.normal(0.0, 1.0, size=(N, K))
    f = loadings @ factors

    eps_gp = rng.standard_normal((N, T))
    if config.gp_amplitude > 0:
        kp = KernelParams.from_natural(config.gp_amplitude, config.gp_lengthscale, 1.0)
        L = cholesky(rbf_kernel_matrix(t, t, kp), jitter_schedule=(0.0, 1e-10, 1e-8, 1e-6, 1e-4)).L
        r = eps_gp @ L.T
    else:
        r = np.zeros((N, T))
    eps_obs = rng.standard_normal((N, T))
    z = f + r + config.noise * eps_obs if config.noise > 0 else f + r

    start = parse_timestamp(config.start)
    stamps = (start + HOUR * np.arange(T)).astype("datetime64[s]")
    width = len(str(N - 1))
    series = [TimeSeries(f"s{i:0{width}d}", stamps.copy(), z[i].copy()) for i in range(N)]
    return TimeSeriesDataset(series=series), SynthTruth(f=f, r=r, factors=factors, loadings=loadings)


def write_truth_csv(dataset: TimeSeriesDataset, truth: SynthTruth, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRUTH_HEADER)
        for i, s in enumerate(dataset.series):
            for j, ts in enumerate(s.timestamps):
                w.writerow((s.id, format_timestamp(ts), repr(float(s.values[j])),
                            repr(float(truth.f[i, j])), repr(float(truth.r[i, j]))))
