"""Two-stage simulation: day-ahead market stage, then per-step control.

The control stage broadcasts one penalty trajectory, delays it per device
by the communication model (plus optional dither), lets every device
self-dispatch, gates the resulting dispatch through the governance mode and
advances device physics with seeded noise. A penalty-blind run with the
same noise provides the baseline.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .aggregator import (
    NEUTRAL_PENALTY, CapabilityEnvelope, CommModel, Estimate, aggregate_capability,
    broadcast_penalty, emergent_ramp, kalman_update, latency_steps, write_capability_csv,
)
from .config import ScenarioConfig
from .devices import BakerySpec, BatterySpec, BucketSpec, bakery_power, bakery_schedule, battery_schedule
from .errors import ConfigError, FlexLatticeError, NonCanonical, ZeroMeanLoad
from .flexfunc import FlexibilityFunction, fit_from_step, to_record
from .grid import Dispatch, Violation, compute_envelopes, gate_dispatch, write_violations_csv
from .market import (
    clear_flexi_order, optimize_purchases, settle, write_settlement_csv,
)
from .signals import PenaltySignal, Signal, Unit, normalize_penalty

log = logging.getLogger(__name__)

STREAM_PROCESS, STREAM_MEASURE, STREAM_DITHER = 0, 1, 2


def substream(seed: int, device: int, purpose: int) -> np.random.Generator:
    """Counter-based generator keyed by (seed, device index, purpose)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, device, purpose])))


def sync_index(aggregate) -> float:
    """Largest one-step rise divided by the mean absolute one-step change."""
    values = np.asarray(getattr(aggregate, "values", aggregate), dtype=float)
    if values.size == 0 or not values.mean() > 0:
        raise ZeroMeanLoad("aggregate load must have a positive mean")
    change = np.diff(values)
    mean_change = np.abs(change).mean() if change.size else 0.0
    if mean_change == 0.0:
        return 1.0
    return float(max(change.max(), 0.0) / mean_change)


def max_ramp(aggregate, step_s: float) -> float:
    """Largest one-step rise of ``aggregate`` (kW) per second."""
    change = np.diff(np.asarray(aggregate, dtype=float))
    return float(max(change.max(initial=0.0), 0.0) / step_s)


def simulate_activation(n: int, p_bar: float, comm: CommModel, step_s: float,
                        steps: int | None = None) -> np.ndarray:
    """Aggregate power when n idle devices are all commanded on at step 0."""
    delays = latency_steps(n, comm, step_s)
    steps = steps or int(delays.max()) + 2
    agg = np.zeros(steps)
    for d in delays:
        agg[d:] += p_bar
    return agg


# control stage ----------------------------------------------------------------

@dataclass
class SimResult:
    power: np.ndarray  # (devices, steps) effective kW
    requested: np.ndarray
    violations: list[Violation]
    capability: list[CapabilityEnvelope]
    clamp_events: int
    penalty_seen: np.ndarray
    drawn_kwh: np.ndarray  # per-device meter accumulated step by step

    @property
    def aggregate(self) -> np.ndarray:
        return self.power.sum(axis=0)


class _BucketArrays:
    def __init__(self, specs: list[BucketSpec], dt: float):
        def col(name):
            return np.array([getattr(s, name) for s in specs], dtype=float)
        self.p_max = col("p_max")
        self.e_min, self.e_max = col("e_min"), col("e_max")
        self.center, self.half = col("comfort_center"), col("comfort_halfwidth")
        self.shift = col("penalty_shift_gain")
        self.decay = np.array([s.decay(dt) for s in specs])
        self.drive = np.array([s.drive(dt) for s in specs])

    def control(self, x, running, penalty):
        setpoint = self.center - self.shift * (penalty - 0.5)
        on = np.where(x < setpoint - self.half, True,
                      np.where(x > setpoint + self.half, False, running))
        return np.where(on, self.p_max, 0.0), on

    def step(self, x, u, noise):
        nxt = x * self.decay + self.drive * u + noise
        clipped = np.clip(nxt, self.e_min, self.e_max)
        return clipped, int(np.count_nonzero(clipped != nxt))


def _delays(config: ScenarioConfig, dither_steps: int) -> np.ndarray:
    n = len(config.fleet)
    delay = latency_steps(n, config.fleet.comm, config.grid.step)
    if dither_steps > 1:
        offsets = np.array([substream(config.seed, i, STREAM_DITHER).integers(0, dither_steps)
                            for i in range(n)])
        delay = delay + offsets
    return delay


def simulate(config: ScenarioConfig, penalty: np.ndarray, dither_steps: int | None = None,
             estimate: bool = False) -> SimResult:
    grid = config.grid
    devices = config.fleet.devices
    n, steps, dt = len(devices), grid.steps, grid.step_h
    penalty = np.asarray(penalty, dtype=float)
    dither = config.dither_steps if dither_steps is None else dither_steps
    delay = _delays(config, dither)
    idx = np.maximum(np.arange(steps)[None, :] - delay[:, None], 0)
    seen = penalty[idx]

    b_idx = [i for i, d in enumerate(devices) if isinstance(d.spec, BucketSpec)]
    buckets = _BucketArrays([devices[i].spec for i in b_idx], dt)
    x = np.array([devices[i].initial_energy for i in b_idx], dtype=float)
    running = np.array([devices[i].initial_running for i in b_idx], dtype=bool)
    noise = np.zeros((len(b_idx), steps))
    for j, i in enumerate(b_idx):
        if devices[i].noise_std > 0:
            noise[j] = devices[i].noise_std * substream(config.seed, i, STREAM_PROCESS).standard_normal(steps)

    schedules = np.zeros((n, steps))
    for i, dev in enumerate(devices):
        signal = Signal(grid, seen[i])
        if isinstance(dev.spec, BatterySpec):
            schedules[i] = battery_schedule(dev.spec, signal)
        elif isinstance(dev.spec, BakerySpec):
            start = bakery_schedule(dev.spec, signal)
            schedules[i] = bakery_power(dev.spec, start, steps, dt)
    bat_idx = [i for i, d in enumerate(devices) if isinstance(d.spec, BatterySpec)]
    bat_energy = np.array([devices[i].initial_energy for i in bat_idx], dtype=float)
    bat_pmax = np.array([devices[i].spec.p_max for i in bat_idx], dtype=float)
    bat_emax = np.array([devices[i].spec.e_max for i in bat_idx], dtype=float)
    bat_eff = np.array([devices[i].spec.efficiency for i in bat_idx], dtype=float)

    feeder = config.feeder
    envelopes = compute_envelopes(feeder, config.margin) if feeder is not None else None
    ids = [d.id for d in devices]
    costs = {d.id: d.marginal_cost for d in devices}

    estimates = {}
    meas = {}
    if estimate:
        for j, i in enumerate(b_idx):
            estimates[devices[i].id] = Estimate(float(x[j]), config.meas_var, config.process_var,
                                                config.meas_var)
            meas[devices[i].id] = math.sqrt(config.meas_var) * substream(
                config.seed, i, STREAM_MEASURE).standard_normal(steps)

    power = np.zeros((n, steps))
    requested = np.zeros((n, steps))
    violations: list[Violation] = []
    capability: list[CapabilityEnvelope] = []
    clamps = 0
    drawn = np.zeros(n)
    for k in range(steps):
        req = schedules[:, k].copy()
        if b_idx:
            bucket_req, running = buckets.control(x, running, seen[b_idx, k])
            req[b_idx] = bucket_req
        if bat_idx:
            room = np.maximum(bat_emax - bat_energy, 0.0) / (bat_eff * dt)
            req[bat_idx] = np.minimum(req[bat_idx], room)
        requested[:, k] = req
        u = req
        if feeder is not None:
            caps = req.copy()
            if b_idx:
                caps[b_idx] = np.where(x < buckets.e_max, buckets.p_max, 0.0)
            if bat_idx:
                caps[bat_idx] = np.minimum(bat_pmax, room)
            gated = gate_dispatch(config.governance, Dispatch(ids, req[:, None]), envelopes,
                                  feeder, costs=costs, caps=caps[:, None], step_offset=k)
            u = gated.dispatch.power[:, 0]
            violations.extend(gated.violations)
        power[:, k] = u
        drawn += u * dt
        if b_idx:
            x, c = buckets.step(x, u[b_idx], noise[:, k])
            clamps += c
        if bat_idx:
            bat_energy = bat_energy + bat_eff * u[bat_idx] * dt
        if estimate and b_idx:
            for j, i in enumerate(b_idx):
                dev = devices[i]
                y = float(x[j]) + float(meas[dev.id][k])
                estimates[dev.id] = kalman_update(dev.spec, estimates[dev.id], float(u[i]), y, dt)
            commands = {devices[i].id: float(u[i]) for i in b_idx}
            capability.append(aggregate_capability(config.fleet, estimates, k, commands))
    return SimResult(power, requested, violations, capability, clamps, seen, drawn)


# market stage -----------------------------------------------------------------

@dataclass
class MarketPlan:
    purchased: np.ndarray  # kWh per step, spot stream plus flexi streams
    spot_stream: np.ndarray
    flexi_stream: np.ndarray
    flexi_cost: float


def market_stage(config: ScenarioConfig, baseline_energy: np.ndarray) -> MarketPlan:
    grid = config.grid
    spot = config.spot
    stream = baseline_energy.copy()
    if config.purchases is not None:
        plan = config.purchases
        per_day = grid.steps_per_day()
        cap = plan.cap_factor * float(baseline_energy.max())
        for day_start in range(0, grid.steps, per_day):
            lo = day_start + plan.window[0]
            hi = min(day_start + plan.window[1], grid.steps)
            window = range(lo, hi)
            if lo >= hi:
                continue
            available = float(stream[lo:hi].sum())
            flex = min(plan.flexible_energy, available)
            if flex < plan.flexible_energy:
                log.warning("day at step %d: only %.3g kWh shiftable", day_start, available)
            sched = optimize_purchases(flex, window, Signal(grid, stream, Unit.KWH), spot, cap=cap)
            stream = np.asarray(sched.purchased.values).copy()
    flexi = np.zeros(grid.steps)
    flexi_cost = 0.0
    for order in config.flexi_orders:
        cleared = clear_flexi_order(order, spot)
        flexi += cleared.energy_profile(grid.steps)
        flexi_cost += cleared.cost
    return MarketPlan(stream + flexi, stream, flexi, flexi_cost)


def identify_fleet_ff(config: ScenarioConfig, best_effort: bool = True) -> FlexibilityFunction:
    """Fit a Flexibility Function to the fleet's simulated response to a penalty step."""
    steps = config.grid.steps
    warm = steps // 4
    low = np.zeros(steps)
    stepped = low.copy()
    stepped[warm:] = 1.0
    ref = simulate(config, low, dither_steps=0).aggregate
    resp = simulate(config, stepped, dither_steps=0).aggregate
    p_base = float(ref[warm:].mean())
    if not p_base > 0:
        raise ConfigError("ff", "fleet has no baseline load to identify a response from")
    grid = replace(config.grid, start=config.grid.start + warm * config.grid.step,
                   steps=steps - warm)
    observed = Signal(grid, resp[warm:] - ref[warm:], Unit.KW)
    try:
        return fit_from_step(observed, p_base).ff
    except NonCanonical as exc:
        if not best_effort:
            raise
        log.warning("fleet response is not canonical (%s); using best-effort fit", exc)
        return exc.fit.ff


# run ----------------------------------------------------------------------------

METRIC_FIELDS = ("total_cost", "baseline_cost", "savings_fraction", "peak_kw", "violations",
                 "sync_index", "rebound_ratio_observed")


@dataclass
class RunMetrics:
    total_cost: float
    baseline_cost: float
    savings_fraction: float
    peak_kw: float
    violations: int
    sync_index: float | None
    rebound_ratio_observed: float | None
    traces: dict[str, np.ndarray] = field(default_factory=dict)
    extra: dict[str, object] = field(default_factory=dict)
    # artifacts for the output directory
    violation_rows: list[Violation] = field(default_factory=list, repr=False)
    capability: list[CapabilityEnvelope] = field(default_factory=list, repr=False)
    settlement: object = field(default=None, repr=False)
    ff: FlexibilityFunction | None = None
    name: str = "scenario"
    grid: object = None

    def summary(self) -> dict:
        out = {k: getattr(self, k) for k in METRIC_FIELDS}
        out.update(self.extra)
        return out

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.summary()), sort_keys=True, indent=2) + "\n"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _penalty(config: ScenarioConfig, plan: MarketPlan | None, baseline_kw: np.ndarray,
             ff: FlexibilityFunction | None):
    grid = config.grid
    if config.penalty_source == "neutral":
        return np.full(grid.steps, NEUTRAL_PENALTY), None
    if config.penalty_source == "price":
        return np.asarray(normalize_penalty(config.spot).values), None
    target = Signal(grid, plan.purchased / grid.step_h, Unit.KW)
    result = broadcast_penalty(target, ff, Signal(grid, baseline_kw, Unit.KW),
                               raise_unreachable=False)
    if result.residual_fraction > 0.2:
        log.warning("target partly unreachable: residual %.1f%%", 100 * result.residual_fraction)
    return np.asarray(result.penalty.values), result


def run(config: ScenarioConfig) -> RunMetrics:
    """Execute one scenario; identical config and seed give identical metrics."""
    grid = config.grid
    dt = grid.step_h
    spot = np.asarray(config.spot.values)
    neutral = np.full(grid.steps, NEUTRAL_PENALTY)
    base = simulate(config, neutral, dither_steps=0)
    baseline_kw = base.aggregate

    plan = market_stage(config, baseline_kw * dt) if config.has_market else None
    ff = config.ff
    if ff == "fit":
        ff = identify_fleet_ff(config)
    penalty, tracking = _penalty(config, plan, baseline_kw, ff)

    ctrl = simulate(config, penalty, estimate=bool(config.fleet.buckets()))
    if config.dither_steps > 1:
        nodither = simulate(config, penalty, dither_steps=0).aggregate
    else:
        nodither = ctrl.aggregate
    agg = ctrl.aggregate
    delivered = agg * dt

    total_cost = float(delivered @ spot)
    baseline_cost = float((baseline_kw * dt) @ spot)
    savings = 1.0 - total_cost / baseline_cost if baseline_cost != 0 else 0.0
    try:
        sync = sync_index(agg)
    except ZeroMeanLoad:
        sync = None
    deviation = (agg - baseline_kw) * dt
    reduced = float(-deviation[deviation < 0].sum())
    rebound = float(deviation[deviation > 0].sum())
    drawn = float(ctrl.drawn_kwh.sum())
    metered = float(delivered.sum())
    node_load = None
    if config.feeder is not None:
        node_load = np.zeros((len(config.feeder.nodes), grid.steps))
        nodes = config.feeder.device_nodes([d.id for d in config.fleet.devices])
        np.add.at(node_load, nodes, ctrl.power)
        metered = float(node_load.sum() * dt)
    balance = abs(metered - drawn) / max(abs(drawn), 1e-300) if drawn else abs(metered)

    traces = {
        "spot": spot,
        "penalty": penalty,
        "aggregate_kw": agg,
        "baseline_kw": baseline_kw,
        "aggregate_nodither_kw": nodither,
    }
    extra = {
        "name": config.name,
        "seed": config.seed,
        "governance": config.governance.value,
        "dither_steps": config.dither_steps,
        "penalty_source": config.penalty_source,
        "devices": len(config.fleet),
        "steps": grid.steps,
        "step_s": grid.step,
        "delivered_kwh": metered,
        "drawn_kwh": drawn,
        "energy_balance_rel_error": balance,
        "max_ramp_kw_per_s": max_ramp(agg, grid.step),
        "emergent_ramp_kw_per_s": _fleet_ramp(config),
        "curtailed_kwh": float((ctrl.requested - ctrl.power).sum() * dt),
        "clamp_events": ctrl.clamp_events,
        "reduced_kwh": reduced,
        "rebound_kwh": rebound,
    }
    settlement = None
    if plan is not None:
        traces["purchased_kwh"] = plan.purchased
        imbalance = config.imbalance or config.spot
        settlement = settle(Signal(grid, plan.purchased, Unit.KWH), Signal(grid, delivered, Unit.KWH),
                            config.spot, imbalance, config.imbalance_sell)
        extra.update({
            "settlement_cost": settlement.total,
            "settlement_spot_cost": settlement.spot_cost,
            "imbalance_cost": settlement.imbalance_cost,
            "flexi_order_cost": plan.flexi_cost,
            "purchased_kwh": float(plan.purchased.sum()),
        })
    if tracking is not None:
        extra["tracking_residual_fraction"] = tracking.residual_fraction
    if node_load is not None:
        for i, nid in enumerate(config.feeder.ids):
            traces[f"node_{nid}_kw"] = node_load[i]
    return RunMetrics(
        total_cost=total_cost, baseline_cost=baseline_cost, savings_fraction=savings,
        peak_kw=float(agg.max()), violations=len(ctrl.violations), sync_index=sync,
        rebound_ratio_observed=rebound / reduced if reduced > 0 else None,
        traces=traces, extra=extra, violation_rows=ctrl.violations,
        capability=ctrl.capability, settlement=settlement,
        ff=ff if isinstance(ff, FlexibilityFunction) else None, name=config.name, grid=grid,
    )


def _fleet_ramp(config: ScenarioConfig) -> float | None:
    devices = config.fleet.devices
    if not devices:
        return None
    p_bar = float(np.mean([d.spec.p_max if hasattr(d.spec, "p_max") else 0.0 for d in devices]))
    return emergent_ramp(len(devices), p_bar, config.fleet.comm)


TRACE_ORDER = ("spot", "penalty", "aggregate_kw", "baseline_kw", "aggregate_nodither_kw",
               "purchased_kwh")


def write_outputs(metrics: RunMetrics, out_dir) -> Path:
    """Write metrics.json, trace.csv, violations.csv and, when present, settlement data."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(metrics.to_json(), encoding="utf-8")
    grid = metrics.grid
    cols = [c for c in TRACE_ORDER if c in metrics.traces]
    cols += sorted(c for c in metrics.traces if c not in TRACE_ORDER)
    with open(out / "trace.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "time_h"] + cols)
        for k in range(grid.steps):
            w.writerow([k, repr(k * grid.step_h)] + [repr(float(metrics.traces[c][k])) for c in cols])
    write_violations_csv(metrics.violation_rows, out / "violations.csv")
    if metrics.settlement is not None:
        delivered = Signal(grid, metrics.traces["aggregate_kw"] * grid.step_h, Unit.KWH)
        purchased = Signal(grid, metrics.traces["purchased_kwh"], Unit.KWH)
        write_settlement_csv(purchased, delivered, Signal(grid, metrics.traces["spot"]),
                             metrics.settlement, out / "settlement.csv")
    if metrics.capability:
        write_capability_csv(metrics.capability, out / "capability.csv")
    if metrics.ff is not None:
        (out / "ff.txt").write_text(to_record(metrics.ff), encoding="utf-8")
    return out


# sweep --------------------------------------------------------------------------

@dataclass
class SweepResult:
    results: list[RunMetrics | None]
    errors: dict[int, str]

    def table(self) -> list[dict]:
        rows = []
        for i, r in enumerate(self.results):
            row = {"index": i}
            if r is None:
                row["error"] = self.errors[i]
            else:
                row.update({k: r.summary()[k] for k in ("name", "governance", "devices",
                                                        "dither_steps", "seed")})
                row.update({k: getattr(r, k) for k in METRIC_FIELDS})
                row["max_ramp_kw_per_s"] = r.extra["max_ramp_kw_per_s"]
            rows.append(row)
        return rows


def _run_safe(config: ScenarioConfig):
    try:
        return run(config), None
    except FlexLatticeError as exc:
        return None, f"{type(exc).__name__}: {exc}"


def default_workers() -> int:
    env = os.environ.get("FLEXLATTICE_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            log.warning("ignoring FLEXLATTICE_THREADS=%r", env)
    return os.cpu_count() or 1


def sweep(configs: Sequence[ScenarioConfig], workers: int | None = None) -> SweepResult:
    """Run independent scenarios, preserving input order and collecting failures."""
    workers = workers or default_workers()
    if workers <= 1 or len(configs) <= 1:
        outcomes = [_run_safe(c) for c in configs]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, len(configs))) as pool:
            outcomes = list(pool.map(_run_safe, configs))
    results = [r for r, _ in outcomes]
    errors = {i: e for i, (_, e) in enumerate(outcomes) if e is not None}
    return SweepResult(results, errors)


def write_sweep_table(result: SweepResult, path) -> None:
    rows = result.table()
    keys: list[str] = []
    for row in rows:
        keys += [k for k in row if k not in keys]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _jsonable(v) for k, v in row.items()})
