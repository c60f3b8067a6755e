"""Bucket, battery and bakery devices: dynamics and local price response.

All operations are pure. Buckets are leaky energy stores driven by a
hysteresis thermostat whose setpoint moves with the broadcast penalty;
batteries must reach an energy target by a deadline; bakeries run a fixed
profile once started.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import Infeasible, NegativePower, NonFiniteState
from .signals import Signal

POWER_TOL = 1e-9


@dataclass(frozen=True)
class BucketSpec:
    leak_rate: float  # 1/h
    input_gain: float
    p_max: float  # kW
    e_min: float  # kWh
    e_max: float
    comfort_center: float
    comfort_halfwidth: float
    penalty_shift_gain: float = 0.0  # kWh per unit penalty

    def __post_init__(self):
        if not self.leak_rate > 0:
            raise ValueError("leak_rate must be > 0")
        if not self.input_gain > 0:
            raise ValueError("input_gain must be > 0")
        if self.p_max < 0:
            raise ValueError("p_max must be >= 0")
        if not self.comfort_halfwidth > 0:
            raise ValueError("comfort_halfwidth must be > 0")
        lo = self.comfort_center - self.comfort_halfwidth
        hi = self.comfort_center + self.comfort_halfwidth
        if not (self.e_min <= lo < hi <= self.e_max):
            raise ValueError("comfort band must lie inside [e_min, e_max]")

    def decay(self, dt: float) -> float:
        return math.exp(-self.leak_rate * dt)

    def drive(self, dt: float) -> float:
        """Energy gained per kW held over ``dt`` hours."""
        return self.input_gain / self.leak_rate * (1.0 - self.decay(dt))

    def setpoint(self, penalty: float) -> float:
        return self.comfort_center - self.penalty_shift_gain * (penalty - 0.5)


@dataclass(frozen=True)
class BatterySpec:
    p_max: float
    e_target: float
    deadline_step: int
    e_max: float
    efficiency: float = 1.0
    e_initial: float = 0.0

    def __post_init__(self):
        if self.p_max < 0:
            raise ValueError("p_max must be >= 0")
        if self.e_target > self.e_max:
            raise ValueError("e_target must not exceed e_max")
        if not 0.0 < self.efficiency <= 1.0:
            raise ValueError("efficiency must be in (0, 1]")
        if self.deadline_step < 0:
            raise ValueError("deadline_step must be >= 0")


@dataclass(frozen=True)
class BakerySpec:
    run_profile: tuple[float, ...]  # kWh per step
    earliest_start: int
    latest_start: int

    def __post_init__(self):
        object.__setattr__(self, "run_profile", tuple(float(e) for e in self.run_profile))
        if not self.run_profile or any(e <= 0 for e in self.run_profile):
            raise ValueError("run_profile entries must be > 0")
        if not 0 <= self.earliest_start <= self.latest_start:
            raise ValueError("need 0 <= earliest_start <= latest_start")

    @property
    def duration(self) -> int:
        return len(self.run_profile)


@dataclass(frozen=True)
class DeviceState:
    energy: float = 0.0
    running: bool = False
    run_elapsed: int = 0
    last_command_step: int = -1
    clamped: bool = False


def bucket_step(spec: BucketSpec, state: DeviceState, u: float, dt: float,
                noise: float = 0.0) -> DeviceState:
    """Advance a bucket by ``dt`` hours holding input power ``u``.

    Uses the exact solution of the linear leak ODE over the step, then adds
    ``noise`` and clamps to [e_min, e_max].
    """
    if u < 0:
        raise NegativePower(f"input power {u} < 0")
    if u > spec.p_max * (1 + POWER_TOL) + POWER_TOL:
        raise ValueError(f"input power {u} exceeds p_max {spec.p_max}")
    if not dt > 0:
        raise ValueError("dt must be > 0")
    x = state.energy * spec.decay(dt) + spec.drive(dt) * u + noise
    if not math.isfinite(x):
        raise NonFiniteState(f"energy became {x}")
    clipped = min(max(x, spec.e_min), spec.e_max)
    return replace(state, energy=clipped, clamped=clipped != x)


def bucket_local_control(spec: BucketSpec, state: DeviceState, penalty: float) -> float:
    """Hysteresis thermostat around the penalty-shifted setpoint; returns 0 or p_max."""
    center = spec.setpoint(penalty)
    if state.energy < center - spec.comfort_halfwidth:
        return spec.p_max
    if state.energy > center + spec.comfort_halfwidth:
        return 0.0
    return spec.p_max if state.running else 0.0


def battery_schedule(spec: BatterySpec, prices: Signal) -> np.ndarray:
    """Charge at p_max in the cheapest steps up to the deadline.

    The last step used may be fractional so the stored energy reaches
    ``e_target`` exactly. Equal prices favour the earlier step.
    """
    dt = prices.grid.step_h
    n = prices.grid.steps
    if spec.deadline_step >= n:
        raise ValueError("deadline_step must lie on the price grid")
    need = max(spec.e_target - spec.e_initial, 0.0)
    per_step = spec.efficiency * spec.p_max * dt
    capacity = per_step * (spec.deadline_step + 1)
    if need > capacity * (1 + 1e-12):
        raise Infeasible(need - capacity)
    power = np.zeros(n)
    if need == 0.0:
        return power
    window = np.asarray(prices.values[: spec.deadline_step + 1])
    order = np.lexsort((np.arange(window.size), window))
    remaining = need
    for k in order:
        if remaining <= 0.0:
            break
        take = min(per_step, remaining)
        power[k] = spec.p_max if take == per_step else take / (spec.efficiency * dt)
        remaining -= take
    return power


def bakery_schedule(spec: BakerySpec, prices: Signal) -> int:
    """Start step minimising profile cost over the allowed window; ties go earliest."""
    values = np.asarray(prices.values)
    if spec.latest_start + spec.duration > values.size:
        raise ValueError("bakery window extends past the price grid")
    profile = np.asarray(spec.run_profile)
    best, best_cost = spec.earliest_start, math.inf
    for s in range(spec.earliest_start, spec.latest_start + 1):
        cost = float(profile @ values[s:s + spec.duration])
        if cost < best_cost:
            best, best_cost = s, cost
    return best


def bakery_power(spec: BakerySpec, start: int, steps: int, dt: float) -> np.ndarray:
    """Per-step power (kW) of an uninterrupted run beginning at ``start``."""
    power = np.zeros(steps)
    end = min(start + spec.duration, steps)
    power[start:end] = np.asarray(spec.run_profile[: end - start]) / dt
    return power
