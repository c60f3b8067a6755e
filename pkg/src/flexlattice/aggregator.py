"""Fleet layer: state estimation, capability aggregation and broadcast pricing.

Nothing in this module sees a device's internals beyond its spec and the
aggregator's own estimate. The only downstream output is the penalty
signal; the only upstream input is metered energy.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .devices import BakerySpec, BatterySpec, BucketSpec
from .errors import MissingEstimate, NonFiniteMeasurement, TargetUnreachable
from .flexfunc import FlexibilityFunction, impulse_kernel, predict_response
from .signals import PenaltySignal, Signal, Unit

UNREACHABLE_FRACTION = 0.2
NEUTRAL_PENALTY = 0.5


class CommMode(str, enum.Enum):
    BROADCAST = "broadcast"
    SEQUENTIAL = "sequential"


@dataclass(frozen=True)
class CommModel:
    cycle_time: float = 1.0  # s
    mode: CommMode = CommMode.BROADCAST
    per_device_latency: float = 0.0  # s

    def __post_init__(self):
        if not self.cycle_time > 0:
            raise ValueError("cycle_time must be > 0")
        if self.per_device_latency < 0:
            raise ValueError("per_device_latency must be >= 0")
        object.__setattr__(self, "mode", CommMode(self.mode))


@dataclass(frozen=True)
class FleetDevice:
    id: str
    spec: BucketSpec | BatterySpec | BakerySpec
    node: str = "root"
    marginal_cost: float = 0.0
    initial_energy: float = 0.0
    noise_std: float = 0.0  # kWh per step
    initial_running: bool = False

    @property
    def kind(self) -> str:
        return {BucketSpec: "bucket", BatterySpec: "battery", BakerySpec: "bakery"}[type(self.spec)]


@dataclass(frozen=True)
class Fleet:
    devices: tuple[FleetDevice, ...]
    comm: CommModel = field(default_factory=CommModel)

    def __post_init__(self):
        object.__setattr__(self, "devices", tuple(self.devices))
        ids = [d.id for d in self.devices]
        if len(set(ids)) != len(ids):
            raise ValueError("device ids must be unique")

    def __len__(self) -> int:
        return len(self.devices)

    def buckets(self) -> list[FleetDevice]:
        return [d for d in self.devices if isinstance(d.spec, BucketSpec)]


@dataclass(frozen=True)
class CapabilityEnvelope:
    p_up: float
    p_down: float
    e_up: float
    e_down: float
    ramp: float
    valid_at: int


# estimation -----------------------------------------------------------------

@dataclass(frozen=True)
class Estimate:
    """Scalar Kalman estimate of one bucket's stored energy."""

    mean: float
    var: float
    q: float  # process noise variance per step, kWh^2
    m: float  # measurement noise variance, kWh^2


EstimatorState = Mapping[str, Estimate]


def kalman_update(spec: BucketSpec, est: Estimate, u: float, y: float, dt: float) -> Estimate:
    """One predict/correct cycle using the bucket's exact step transition."""
    if not math.isfinite(y):
        raise NonFiniteMeasurement(f"measurement {y}")
    phi = spec.decay(dt)
    mean = phi * est.mean + spec.drive(dt) * u
    var = phi * phi * est.var + est.q
    if math.isinf(est.m):
        gain = 0.0
    else:
        gain = var / (var + est.m) if var + est.m > 0 else 1.0
    return Estimate(mean + gain * (y - mean), (1.0 - gain) * var, est.q, est.m)


def kalman_predict(spec: BucketSpec, est: Estimate, u: float, dt: float) -> Estimate:
    phi = spec.decay(dt)
    return Estimate(phi * est.mean + spec.drive(dt) * u, phi * phi * est.var + est.q, est.q, est.m)


def riccati_fixed_point(phi: float, q: float, m: float) -> float:
    """Steady-state posterior variance of the scalar filter."""
    c = m * (1.0 - phi * phi) - q
    prior = (-c + math.sqrt(c * c + 4.0 * q * m)) / 2.0
    return prior * m / (prior + m)


# capability -----------------------------------------------------------------

def emergent_ramp(n: int, p_bar: float, comm: CommModel) -> float:
    """Fleet ramp limit (kW/s) imposed by the actuation cycle."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if comm.mode is CommMode.BROADCAST:
        return n * p_bar / comm.cycle_time
    return p_bar / comm.cycle_time


def aggregate_capability(fleet: Fleet, estimates: EstimatorState, step: int,
                         commands: Mapping[str, float] | None = None) -> CapabilityEnvelope:
    """Sum per-bucket power and energy headroom at the estimated states."""
    commands = commands or {}
    buckets = fleet.buckets()
    p_up = p_down = e_up = e_down = 0.0
    for dev in buckets:
        if dev.id not in estimates:
            raise MissingEstimate(dev.id)
        spec = dev.spec
        x = estimates[dev.id].mean
        cmd = commands.get(dev.id, 0.0)
        if x < spec.e_max:
            p_up += spec.p_max - cmd
        p_down += cmd
        e_up += max(spec.e_max - x, 0.0)
        e_down += max(x - spec.e_min, 0.0)
    if buckets:
        p_bar = sum(d.spec.p_max for d in buckets) / len(buckets)
        ramp = emergent_ramp(len(buckets), p_bar, fleet.comm)
    else:
        ramp = 0.0
    return CapabilityEnvelope(p_up, p_down, e_up, e_down, ramp, step)


CAPABILITY_COLUMNS = ("step", "p_up_kw", "p_down_kw", "e_up_kwh", "e_down_kwh", "ramp_kw_per_s")


def write_capability_csv(rows: Sequence[CapabilityEnvelope], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CAPABILITY_COLUMNS)
        for r in rows:
            w.writerow([r.valid_at, repr(r.p_up), repr(r.p_down), repr(r.e_up),
                        repr(r.e_down), repr(r.ramp)])


# broadcast ------------------------------------------------------------------

@dataclass(frozen=True)
class BroadcastResult:
    penalty: PenaltySignal
    predicted: Signal  # kW deviation expected from the penalty
    residual: Signal  # requested minus predicted deviation, kW
    residual_fraction: float


def broadcast_penalty(target: Signal, ff: FlexibilityFunction, baseline: Signal,
                      initial: float = NEUTRAL_PENALTY,
                      raise_unreachable: bool = True) -> BroadcastResult:
    """Penalty trajectory whose predicted response tracks ``target - baseline``.

    Works forward one step at a time. The increment at step k is the
    least-squares coefficient of the step response against the tracking
    error still left over the response's support, clipped so the penalty
    stays in [0, 1]. ``initial`` is the penalty level in force before the
    grid starts.
    """
    if target.grid != baseline.grid:
        raise ValueError("target and baseline must share a grid")
    grid = target.grid
    n, dt = grid.steps, grid.step_h
    wanted = np.asarray(target.values) - np.asarray(baseline.values)
    horizon = min(n, int(math.ceil(ff.support / dt)) + 1)
    kernel = impulse_kernel(ff, horizon, dt)
    predicted = np.zeros(n)
    penalty = np.empty(n)
    level = float(initial)
    for k in range(n):
        span = min(horizon, n - k)
        h = kernel[:span]
        norm = float(h @ h)
        error = wanted[k:k + span] - predicted[k:k + span]
        step = float(h @ error) / norm if norm > 0 else 0.0
        new_level = min(max(level + step, 0.0), 1.0)
        increment = new_level - level
        if increment != 0.0:
            predicted[k:k + span] += increment * h
        level = new_level
        penalty[k] = level
    pen = PenaltySignal(grid, penalty)
    # recompute via the LTI contract so predicted matches predict_response exactly
    predicted = np.asarray(predict_response(ff, pen, initial=initial).values)
    residual = wanted - predicted
    requested = float(np.abs(wanted).sum())
    fraction = float(np.abs(residual).sum()) / requested if requested > 0 else 0.0
    result = BroadcastResult(pen, Signal(grid, predicted, Unit.KW),
                             Signal(grid, residual, Unit.KW), fraction)
    if raise_unreachable and fraction > UNREACHABLE_FRACTION:
        raise TargetUnreachable(result.penalty, result.residual, fraction)
    return result


def apply_latency(commands, comm: CommModel, engine_step: float) -> np.ndarray:
    """Effective actuation step for each device's commanded activation step.

    Broadcast reaches every device after one cycle; sequential actuation
    reaches the k-th device (in id order) after k + 1 cycles.
    """
    commands = np.asarray(commands, dtype=int)
    return commands + latency_steps(commands.size, comm, engine_step)


def latency_steps(n: int, comm: CommModel, engine_step: float) -> np.ndarray:
    if comm.mode is CommMode.BROADCAST:
        delay = np.full(n, comm.cycle_time)
    else:
        delay = comm.cycle_time * (np.arange(n) + 1.0)
    delay = delay + comm.per_device_latency
    return np.ceil(delay / engine_step - 1e-9).astype(int)
