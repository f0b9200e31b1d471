"""Command-line entry point: ``dfgp {train,forecast,evaluate,synth,gradcheck}``.

Exit codes: 0 success, 1 gradient check failed, 2 configuration error,
3 data error, 4 numeric failure, 5 unknown series, 6 forecast/actuals key
mismatch.

Configuration files are ``key = value`` lines (``#`` starts a comment);
sequences are comma-separated. Unknown keys are rejected.

Checkpoints are text archives::

    DFGP-CHECKPOINT 1
    [config]
    key = value
    [series]
    <one id per line>
    [params]
    <name> <dim0>,<dim1>,...
    <row-major values as float.hex, space-separated, one line per leading index>

Hex floats make the round trip bit-exact.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    FeatureSpec,
    SynthConfig,
    format_timestamp,
    future_window,
    load_long_csv,
    parse_timestamp,
    read_long_rows,
    split_train_eval,
    synth_generate,
    write_long_csv,
    write_truth_csv,
)
from .errors import ConfigError, DataError, NumericError, UnknownSeriesError
from .metrics import evaluate, quantile_key
from .model import ModelConfig, ModelParams, forecast, train

log = logging.getLogger("dfgp")

EXIT_OK = 0
EXIT_GRADCHECK = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_UNKNOWN_SERIES = 5
EXIT_KEY_MISMATCH = 6

CHECKPOINT_MAGIC = "DFGP-CHECKPOINT"
CHECKPOINT_VERSION = 1
FORECAST_BASE_COLUMNS = ("series_id", "timestamp", "mean", "variance")
HISTORY_HEADER = ("epoch", "nll", "grad_norm", "seconds")


class KeyMismatchError(DataError):
    pass


# ------------------------------------------------------------------ config files


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(_format_value(x) for x in v)
    return str(v)


def _parse_value(text: str, default, key: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [p.strip() for p in text.split(",") if p.strip()]
            kind = type(default[0]) if default else str
            return tuple(kind(p) for p in items)
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {text!r}") from None
    return text


def parse_config_text(text: str, cls, source: str = "<config>"):
    """Build a ``cls`` dataclass from ``key = value`` lines over its defaults."""
    defaults = {f.name: f.default for f in dataclasses.fields(cls)}
    values = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key = value, got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in defaults:
            raise ConfigError(f"{source}:{n}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{n}: duplicate key {key!r}")
        values[key] = _parse_value(value, defaults[key], key)
    try:
        return cls(**values)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path, cls):
    if path is None:
        return cls()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config_text(text, cls, str(path))


def format_config(config) -> str:
    return "".join(f"{f.name} = {_format_value(getattr(config, f.name))}\n"
                   for f in dataclasses.fields(config))


# ------------------------------------------------------------------ checkpoints


def save_checkpoint(params: ModelParams, path) -> None:
    lines = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}", "[config]"]
    lines += format_config(params.config).splitlines()
    lines.append("[series]")
    lines += params.series_ids
    lines.append("[params]")
    for name, t in params.named_tensors().items():
        data = np.ascontiguousarray(t.data, dtype=np.float64)
        lines.append(f"{name} {','.join(str(d) for d in data.shape)}")
        rows = data.reshape(data.shape[0], -1) if data.ndim > 1 else data.reshape(1, -1)
        for row in rows:
            lines.append(" ".join(float(v).hex() for v in row))
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path) -> ModelParams:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    if not lines or lines[0].split() != [CHECKPOINT_MAGIC, str(CHECKPOINT_VERSION)]:
        raise DataError(f"{path}: not a version-{CHECKPOINT_VERSION} checkpoint")
    try:
        i_series = lines.index("[series]")
        i_params = lines.index("[params]")
    except ValueError:
        raise DataError(f"{path}: missing [series] or [params] section") from None
    if lines[1] != "[config]" or not 1 < i_series < i_params:
        raise DataError(f"{path}: sections out of order")
    config = parse_config_text("\n".join(lines[2:i_series]), ModelConfig, f"{path}[config]")
    series_ids = lines[i_series + 1:i_params]

    arrays = {}
    k = i_params + 1
    try:
        while k < len(lines):
            name, dims = lines[k].split(" ")
            shape = tuple(int(d) for d in dims.split(","))
            n_rows = shape[0] if len(shape) > 1 else 1
            rows = lines[k + 1:k + 1 + n_rows]
            values = [float.fromhex(v) for row in rows for v in row.split()]
            arrays[name] = np.array(values, dtype=np.float64).reshape(shape)
            k += 1 + n_rows
    except (ValueError, IndexError) as exc:
        raise DataError(f"{path}: malformed parameter block near line {k + 1}: {exc}") from exc
    try:
        return ModelParams.from_arrays(arrays, series_ids, config)
    except KeyError as exc:
        raise DataError(f"{path}: missing parameter {exc}") from None


# ------------------------------------------------------------------ commands


def _load_dataset(path):
    try:
        return load_long_csv(path)
    except FileNotFoundError:
        raise DataError(f"data file not found: {path}") from None
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from exc


def cmd_train(args) -> int:
    config = load_config(args.config, ModelConfig)
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    dataset = _load_dataset(args.data)
    split = split_train_eval(dataset, config.train_window, config.horizon, FeatureSpec(config.features))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log.info("training on %d series, window %d, %d epochs", len(split.series_ids),
             split.train_window, config.epochs)
    params, history = train(split, config)

    save_checkpoint(params, out / "model.ckpt")
    with open(out / "history.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_HEADER)
        for e in range(len(history)):
            w.writerow((e, repr(history.nll[e]), repr(history.grad_norm[e]), repr(history.seconds[e])))
    (out / "config.echo").write_text(format_config(config))
    if len(history):
        print(f"trained {len(history)} epochs: nll {history.nll[0]:.6g} -> {history.nll[-1]:.6g}")
    return EXIT_OK


def forecast_columns(quantiles) -> tuple[str, ...]:
    return FORECAST_BASE_COLUMNS + tuple(quantile_key(q) for q in quantiles)


def cmd_forecast(args) -> int:
    params = load_checkpoint(args.ckpt)
    config = params.config
    if args.horizon < 0:
        raise ConfigError("--horizon must be >= 0")
    dataset = _load_dataset(args.data)
    for sid in dataset.ids:
        params.index_of(sid)
    spec = FeatureSpec(config.features)
    columns = forecast_columns(config.quantiles)

    results = []
    split = None
    if args.horizon > 0:
        make = future_window if args.future else split_train_eval
        split = make(dataset, config.train_window, args.horizon, spec)
        results = forecast(params, split)

    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for res in results:
            for j, ts in enumerate(res.timestamps):
                w.writerow((res.series_id, format_timestamp(ts), repr(float(res.mean[j])),
                            repr(float(res.variance[j])),
                            *(repr(float(res.quantile_values[q][j])) for q in config.quantiles)))

    if args.plot_data:
        _write_plot_data(args.plot_data, split, results, config.quantiles, args.plot_tail)
    return EXIT_OK


def _write_plot_data(path, split, results, quantiles, tail: int) -> None:
    """Tidy CSV of the conditioning tail and the forecast bands, one row per point."""
    keys = tuple(quantile_key(q) for q in quantiles)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("series_id", "timestamp", "segment", "observed", "mean") + keys)
        if split is None:
            return
        W = split.train_window
        lo = max(0, W - tail)
        blank = ("",) * (1 + len(keys))
        for b, res in enumerate(results):
            for j in range(lo, W):
                w.writerow((res.series_id, format_timestamp(split.train_timestamps[j]), "history",
                            repr(float(split.train_values[b, j])), *blank))
            for j, ts in enumerate(res.timestamps):
                actual = split.eval_values[b, j]
                w.writerow((res.series_id, format_timestamp(ts), "forecast",
                            "" if np.isnan(actual) else repr(float(actual)), repr(float(res.mean[j])),
                            *(repr(float(res.quantile_values[q][j])) for q in quantiles)))


def read_forecast_csv(path):
    """Return ``(keys, mean, {rho: values})`` from a forecast file."""
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot read forecast {path}: {exc.strerror}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header[:4]) != FORECAST_BASE_COLUMNS:
            raise DataError(f"{path}: header must start with {','.join(FORECAST_BASE_COLUMNS)}")
        qcols = []
        for name in header[4:]:
            try:
                qcols.append(float(name[1:]) / 100.0 if name.startswith("p") else None)
            except ValueError:
                qcols.append(None)
            if qcols[-1] is None:
                raise DataError(f"{path}: unexpected column {name!r}")
        keys, mean, qv = [], [], {q: [] for q in qcols}
        for rec in reader:
            if not rec:
                continue
            if len(rec) != len(header):
                raise DataError(f"{path}: line {reader.line_num}: expected {len(header)} fields")
            try:
                keys.append((rec[0], parse_timestamp(rec[1])))
                mean.append(float(rec[2]))
                for q, v in zip(qcols, rec[4:]):
                    qv[q].append(float(v))
            except ValueError as exc:
                raise DataError(f"{path}: line {reader.line_num}: {exc}") from None
    return keys, np.array(mean), {q: np.array(v) for q, v in qv.items()}


def cmd_evaluate(args) -> int:
    keys, mean, qv = read_forecast_csv(args.forecast)
    try:
        actual_rows = read_long_rows(args.actuals)
    except OSError as exc:
        raise DataError(f"cannot read actuals {args.actuals}: {exc.strerror}") from exc
    missing = [k for k in keys if k[1] not in actual_rows.get(k[0], {})]
    if missing:
        shown = ", ".join(f"{s}@{format_timestamp(t)}" for s, t in missing[:10])
        raise KeyMismatchError(f"{len(missing)} forecast key(s) have no actual value: {shown}")
    if not keys:
        raise DataError("forecast file has no rows to evaluate")
    targets = np.array([actual_rows[s][t] for s, t in keys])
    per_series: dict[str, int] = {}
    for s, _ in keys:
        per_series[s] = per_series.get(s, 0) + 1
    report = evaluate(targets, mean, qv, horizon=max(per_series.values()))

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_text())
    json_path = out.with_suffix(".json")
    if json_path == out:
        json_path = out.with_name(out.name + ".json")
    json_path.write_text(report.to_json())
    sys.stdout.write(report.to_text())
    return EXIT_OK


def cmd_synth(args) -> int:
    config = load_config(args.config, SynthConfig)
    dataset, truth = synth_generate(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_long_csv(dataset, out / "data.csv")
    write_truth_csv(dataset, truth, out / "truth.csv")
    print(f"wrote {dataset.N} series x {config.length} steps to {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    report = run_gradcheck(args.seed, args.n_seeds)
    for line in report.lines():
        print(line)
    return EXIT_OK if report.passed else EXIT_GRADCHECK


# ------------------------------------------------------------------ entry point


# Most specific first: KeyMismatchError is also a DataError.
_EXIT_CODES = (
    (ConfigError, EXIT_CONFIG),
    (KeyMismatchError, EXIT_KEY_MISMATCH),
    (UnknownSeriesError, EXIT_UNKNOWN_SERIES),
    (DataError, EXIT_DATA),
    (NumericError, EXIT_NUMERIC),
)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dfgp", description="Deep factor model with GP random effects.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="fit a model and write a checkpoint")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    f = sub.add_parser("forecast", help="predictive marginals from a checkpoint")
    f.add_argument("--ckpt", required=True)
    f.add_argument("--data", required=True)
    f.add_argument("--horizon", type=int, required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--future", action="store_true",
                   help="forecast past the end of the data instead of the last HORIZON points")
    f.add_argument("--plot-data", help="also write history tail and forecast bands as tidy CSV")
    f.add_argument("--plot-tail", type=int, default=72, help="history points per series in --plot-data")
    f.set_defaults(func=cmd_forecast)

    e = sub.add_parser("evaluate", help="score a forecast file against actuals")
    e.add_argument("--forecast", required=True)
    e.add_argument("--actuals", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("synth", help="sample a synthetic dataset with ground truth")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-seeds", type=int, default=20)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DataError, NumericError, UnknownSeriesError) as exc:
        code = next(c for cls, c in _EXIT_CODES if isinstance(exc, cls))
        message = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"dfgp {args.command}: {type(exc).__name__}: {message}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
