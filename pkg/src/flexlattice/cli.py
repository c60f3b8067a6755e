"""``flexlattice`` command line.

Exit codes: 0 success, 1 configuration error, 2 runtime error, 3 FF fit failure.
"""

from __future__ import annotations

import argparse
import csv
import glob
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import load_scenario
from .engine import default_workers, run, sweep, write_outputs, write_sweep_table
from .errors import (
    ConfigError, FlexLatticeError, GridMismatch, MalformedRow, MissingFile, MissingTrace,
    NoResponse, NonCanonical,
)
from .flexfunc import cumulative_response, fit_from_step, from_record, step_response, to_record
from .signals import TimeGrid, Unit, load_price_csv
from .signals import _parse_rows  # header and ordering checks shared with price files

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_FIT = 0, 1, 2, 3
CONFIG_ERRORS = (ConfigError, MissingFile, MalformedRow, GridMismatch)

log = logging.getLogger("flexlattice")


def _fail(code: int, exc: Exception) -> int:
    print(f"flexlattice: error: {exc}", file=sys.stderr)
    return code


def _summary_line(metrics) -> str:
    parts = [f"{metrics.name}:",
             f"cost={metrics.total_cost:.4g}",
             f"baseline={metrics.baseline_cost:.4g}",
             f"savings={metrics.savings_fraction:.3f}",
             f"peak_kw={metrics.peak_kw:.4g}",
             f"violations={metrics.violations}"]
    if metrics.sync_index is not None:
        parts.append(f"sync={metrics.sync_index:.3g}")
    return " ".join(parts)


def cmd_run(args) -> int:
    try:
        config = load_scenario(args.scenario, args.set)
    except CONFIG_ERRORS as exc:
        return _fail(EXIT_CONFIG, exc)
    try:
        metrics = run(config)
        out = write_outputs(metrics, args.out or Path("runs") / config.name)
    except FlexLatticeError as exc:
        return _fail(EXIT_RUNTIME, exc)
    print(_summary_line(metrics), f"-> {out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    paths = sorted(glob.glob(args.pattern))
    if not paths:
        return _fail(EXIT_CONFIG, ConfigError("sweep", f"no scenario matches {args.pattern!r}"))
    try:
        configs = [load_scenario(p, args.set) for p in paths]
    except CONFIG_ERRORS as exc:
        return _fail(EXIT_CONFIG, exc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = sweep(configs, workers=args.workers or default_workers())
    for path, metrics in zip(paths, result.results):
        if metrics is not None:
            write_outputs(metrics, out / Path(path).stem)
            print(_summary_line(metrics))
    write_sweep_table(result, out / "sweep.csv")
    for i, message in result.errors.items():
        print(f"flexlattice: {paths[i]}: {message}", file=sys.stderr)
    return EXIT_RUNTIME if result.errors else EXIT_OK


def _grid_from_csv(path: Path) -> TimeGrid:
    if not path.is_file():
        raise MissingFile(f"no such file: {path}")
    rows = _parse_rows(path)
    if len(rows) < 2:
        raise MalformedRow(1, "response needs at least two rows")
    stamps = np.array([ts for _, ts, _ in rows])
    step = float(stamps[1] - stamps[0])
    steps = int(round((stamps[-1] - stamps[0]) / step)) + 1
    return TimeGrid(float(stamps[0]), step, steps)


def cmd_fit_ff(args) -> int:
    path = Path(args.response)
    try:
        grid = _grid_from_csv(path)
        observed = load_price_csv(path, grid, Unit.KW)
    except CONFIG_ERRORS as exc:
        return _fail(EXIT_CONFIG, exc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        fit = fit_from_step(observed, args.p_base)
    except NoResponse as exc:
        return _fail(EXIT_FIT, exc)
    except NonCanonical as exc:
        _write_fit(out, exc.fit, observed, canonical=False)
        return _fail(EXIT_FIT, exc)
    except ValueError as exc:
        return _fail(EXIT_CONFIG, exc)
    _write_fit(out, fit, observed, canonical=True)
    print(f"fit: residual_fraction={fit.residual_fraction:.3g} rmse_kw={fit.rmse:.4g} -> {out}")
    return EXIT_OK


def _write_fit(out: Path, fit, observed, canonical: bool) -> None:
    (out / "ff.txt").write_text(to_record(fit.ff), encoding="utf-8")
    diag = {"residual_fraction": fit.residual_fraction, "rmse_kw": fit.rmse,
            "canonical": canonical, "steps": observed.grid.steps,
            "step_s": observed.grid.step}
    (out / "fit_diagnostics.json").write_text(json.dumps(diag, sort_keys=True, indent=2) + "\n",
                                              encoding="utf-8")
    t = observed.grid.hours
    fitted = step_response(fit.ff, t)
    with open(out / "fit_residuals.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time_h", "observed_kw", "fitted_kw", "residual_kw"])
        for h, y, f in zip(t, observed.values, fitted):
            w.writerow([repr(float(h)), repr(float(y)), repr(float(f)), repr(float(y - f))])


def _read_trace(run_dir: Path) -> dict[str, np.ndarray]:
    path = run_dir / "trace.csv"
    if not path.is_file():
        raise MissingTrace(f"no trace.csv in {run_dir}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        data = np.array([[float(v) for v in row] for row in reader], dtype=float)
    data = data.reshape(-1, len(header))
    return {name: data[:, i] for i, name in enumerate(header)}


def _write_columns(path: Path, columns: dict[str, np.ndarray]) -> None:
    names = list(columns)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for row in zip(*(columns[n] for n in names)):
            w.writerow([repr(float(v)) for v in row])


def report(run_dir) -> list[Path]:
    """Write the plot-ready CSVs for a finished run directory; returns the files written."""
    run_dir = Path(run_dir)
    trace = _read_trace(run_dir)
    steps = trace["step"].size
    time_h = trace["time_h"]
    dt = float(time_h[1] - time_h[0]) if steps > 1 else 1.0
    written = []

    ff_path = run_dir / "ff.txt"
    if ff_path.is_file():
        ff = from_record(ff_path.read_text(encoding="utf-8"))
        edges = dt * np.arange(steps + 1)
        energy = np.diff(cumulative_response(ff, edges))
        _write_columns(run_dir / "fig_ff_step.csv", {
            "time_h": time_h,
            "penalty": np.ones(steps),
            "response_kw": step_response(ff, time_h - time_h[0]),
            "response_kwh": energy,
        })
        written.append(run_dir / "fig_ff_step.csv")
    else:
        print(f"notice: {run_dir} has no ff.txt; fig_ff_step.csv omitted", file=sys.stderr)

    if "purchased_kwh" in trace:
        _write_columns(run_dir / "fig_purchases.csv", {
            "time_h": time_h,
            "spot": trace["spot"],
            "baseline_kwh": trace["baseline_kw"] * dt,
            "purchased_kwh": trace["purchased_kwh"],
        })
        written.append(run_dir / "fig_purchases.csv")
    else:
        print(f"notice: {run_dir} has no market stage; fig_purchases.csv omitted", file=sys.stderr)

    _write_columns(run_dir / "fig_broadcast.csv", {
        "time_h": time_h, "spot": trace["spot"], "penalty": trace["penalty"],
    })
    _write_columns(run_dir / "fig_sync.csv", {
        "time_h": time_h,
        "aggregate_kw": trace["aggregate_kw"],
        "aggregate_nodither_kw": trace["aggregate_nodither_kw"],
    })
    written += [run_dir / "fig_broadcast.csv", run_dir / "fig_sync.csv"]
    return written


def cmd_report(args) -> int:
    try:
        written = report(args.run_dir)
    except MissingTrace as exc:
        return _fail(EXIT_CONFIG, exc)
    except (ValueError, KeyError) as exc:
        return _fail(EXIT_RUNTIME, exc)
    for path in written:
        print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="flexlattice", description="Demand-side flexibility simulator.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one scenario")
    p.add_argument("scenario")
    p.add_argument("--out", help="output directory (default runs/<name>)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a scenario key, e.g. engine.seed=7")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run every scenario matching a glob")
    p.add_argument("pattern")
    p.add_argument("--out", required=True)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--workers", type=int, help="worker processes (default FLEXLATTICE_THREADS)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("fit-ff", help="identify a Flexibility Function from a step response")
    p.add_argument("response", help="timestamp,value CSV of deviation (kW) after a unit step")
    p.add_argument("--p-base", type=float, required=True, help="baseline load, kW")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_ff)

    p = sub.add_parser("report", help="write plot-ready CSVs for a run directory")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
