"""Discrete time axis, value sequences on it, and CSV ingestion of price series."""

from __future__ import annotations

import csv
import enum
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .errors import GridMismatch, MalformedRow, MissingFile, NonFiniteInput

log = logging.getLogger(__name__)

MIN_COVERAGE = 0.5


class Unit(str, enum.Enum):
    CURRENCY_PER_KWH = "currency_per_kWh"
    KW = "kW"
    KWH = "kWh"
    DIMENSIONLESS = "dimensionless"


@dataclass(frozen=True)
class TimeGrid:
    """Uniform time axis: ``steps`` intervals of ``step`` seconds from ``start``."""

    start: float
    step: float
    steps: int

    def __post_init__(self):
        if not (self.step > 0 and math.isfinite(self.step)):
            raise ValueError(f"step must be positive, got {self.step}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError(f"steps must be an integer >= 1, got {self.steps}")
        object.__setattr__(self, "steps", int(self.steps))

    @property
    def step_h(self) -> float:
        return self.step / 3600.0

    @property
    def times(self) -> np.ndarray:
        return self.start + self.step * np.arange(self.steps)

    @property
    def hours(self) -> np.ndarray:
        """Elapsed hours since ``start`` at each step."""
        return self.step_h * np.arange(self.steps)

    def index_of(self, timestamp: float) -> int | None:
        """Step index whose left edge is ``timestamp``, or None if not on the grid."""
        offset = (timestamp - self.start) / self.step
        k = round(offset)
        if abs(offset - k) > 1e-9:
            return None
        return int(k)

    def steps_per_day(self) -> int:
        return max(1, int(round(86400.0 / self.step)))


@dataclass(frozen=True, eq=False)
class Signal:
    grid: TimeGrid
    values: np.ndarray
    unit: Unit = Unit.DIMENSIONLESS
    # steps filled by carry-forward when loaded from a file
    gaps: tuple[int, ...] = field(default=(), compare=False)

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 1 or values.shape[0] != self.grid.steps:
            raise GridMismatch(
                f"signal has {values.size} values but grid has {self.grid.steps} steps"
            )
        if not np.all(np.isfinite(values)):
            raise NonFiniteInput("signal values must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "unit", Unit(self.unit))

    def __len__(self) -> int:
        return self.grid.steps

    def with_values(self, values, unit: Unit | None = None) -> "Signal":
        return Signal(self.grid, values, self.unit if unit is None else unit)


class PenaltySignal(Signal):
    """Dimensionless signal whose every value lies in [0, 1]."""

    def __init__(self, grid: TimeGrid, values, unit: Unit = Unit.DIMENSIONLESS, gaps=()):
        super().__init__(grid, values, Unit.DIMENSIONLESS, tuple(gaps))
        if np.any(self.values < 0.0) or np.any(self.values > 1.0):
            raise ValueError("penalty values must lie in [0, 1]")


def constant(grid: TimeGrid, value: float, unit: Unit = Unit.DIMENSIONLESS) -> Signal:
    return Signal(grid, np.full(grid.steps, float(value)), unit)


def parse_timestamp(text: str) -> float:
    """Integer epoch seconds or an ISO-8601 UTC timestamp."""
    text = text.strip()
    try:
        return float(int(text))
    except ValueError:
        pass
    iso = text[:-1] + "+00:00" if text.endswith("Z") else text
    dt = datetime.fromisoformat(iso)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def _parse_rows(path: Path) -> list[tuple[int, float, float]]:
    rows = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["timestamp", "value"]:
            raise MalformedRow(1, "expected header 'timestamp,value'")
        last_ts = -math.inf
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                raise MalformedRow(lineno, f"expected 2 fields, got {len(row)}")
            try:
                ts = parse_timestamp(row[0])
                value = float(row[1])
            except ValueError as exc:
                raise MalformedRow(lineno, str(exc)) from None
            if not math.isfinite(value):
                raise MalformedRow(lineno, "non-finite value")
            if ts <= last_ts:
                raise MalformedRow(lineno, "timestamps must be strictly increasing")
            last_ts = ts
            rows.append((lineno, ts, value))
    return rows


def load_price_csv(path, grid: TimeGrid, unit: Unit = Unit.CURRENCY_PER_KWH) -> Signal:
    """Read a ``timestamp,value`` CSV onto ``grid``.

    Rows outside the grid are dropped. Missing steps take the last observed
    value; leading missing steps take the first observed value. The filled
    step indices are available as ``signal.gaps``.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"no such file: {path}")
    values = np.full(grid.steps, np.nan)
    dropped = 0
    for lineno, ts, value in _parse_rows(path):
        k = grid.index_of(ts)
        if k is None:
            if grid.start <= ts < grid.start + grid.step * grid.steps:
                raise MalformedRow(lineno, "timestamp is not aligned to the grid step")
            dropped += 1
            continue
        if not 0 <= k < grid.steps:
            dropped += 1
            continue
        values[k] = value
    covered = np.isfinite(values)
    if covered.sum() < MIN_COVERAGE * grid.steps:
        raise GridMismatch(
            f"{path}: {int(covered.sum())} of {grid.steps} grid steps covered (< 50%)"
        )
    gaps = tuple(int(k) for k in np.flatnonzero(~covered))
    if gaps:
        first = values[np.argmax(covered)]
        last = first
        for k in range(grid.steps):
            if covered[k]:
                last = values[k]
            else:
                values[k] = last
        log.warning("%s: filled %d gap step(s): %s", path, len(gaps), list(gaps))
    if dropped:
        log.info("%s: dropped %d row(s) outside the grid", path, dropped)
    return Signal(grid, values, unit, gaps)


def write_signal_csv(signal: Signal, path) -> None:
    """Write ``signal`` as ``timestamp,value`` with integer epoch seconds where exact."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        fh.write("timestamp,value\n")
        for ts, v in zip(signal.grid.times, signal.values):
            stamp = str(int(ts)) if float(ts).is_integer() else repr(float(ts))
            fh.write(f"{stamp},{float(v)!r}\n")


def normalize_penalty(prices: Signal) -> PenaltySignal:
    """Min-max map prices onto [0, 1]; a constant series maps to 0.5 everywhere."""
    values = np.asarray(prices.values, dtype=float)
    if not np.all(np.isfinite(values)):
        raise NonFiniteInput("prices must be finite")
    lo, hi = values.min(), values.max()
    if hi == lo:
        return PenaltySignal(prices.grid, np.full(values.shape, 0.5))
    out = np.clip((values - lo) / (hi - lo), 0.0, 1.0)
    return PenaltySignal(prices.grid, out)
