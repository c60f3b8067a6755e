import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.optimize import linprog

from oracles import brute_bakery, brute_battery, euler_bucket
from flexlattice.devices import (
    BakerySpec, BatterySpec, BucketSpec, DeviceState, bakery_power, bakery_schedule,
    battery_schedule, bucket_local_control, bucket_step,
)
from flexlattice.errors import Infeasible, NegativePower, NonFiniteState
from flexlattice.signals import Signal, TimeGrid

WIDE = BucketSpec(0.2, 1.0, 5.0, 0.0, 40.0, 10.0, 1.0, 4.0)


def hourly(values):
    return Signal(TimeGrid(0, 3600, len(values)), values)


def test_fixed_point():
    state = DeviceState(energy=0.0)
    for _ in range(800):
        state = bucket_step(WIDE, state, 2.0, 0.25)
    assert state.energy == pytest.approx(10.0, abs=1e-8)


def test_free_decay():
    state = DeviceState(energy=20.0)
    for k in range(1, 6):
        state = bucket_step(WIDE, state, 0.0, 0.5)
        assert state.energy == pytest.approx(20.0 * math.exp(-0.1 * k), rel=1e-14)


def test_worked_step_against_euler():
    x1 = bucket_step(WIDE, DeviceState(energy=5.0), 4.0, 0.25).energy
    assert x1 == pytest.approx(5 * math.exp(-0.05) + 20 * (1 - math.exp(-0.05)), rel=1e-15)
    assert abs(x1 - euler_bucket(0.2, 1.0, 5.0, 4.0, 0.25)) < 1e-4


@given(a=st.floats(0.01, 2.0), b=st.floats(0.1, 3.0), x0=st.floats(0.0, 30.0),
       u=st.floats(0.0, 5.0), dt=st.floats(0.01, 0.25))
def test_matches_euler(a, b, x0, u, dt):
    spec = BucketSpec(a, b, 5.0, -1e9, 1e9, 0.0, 1.0)
    exact = bucket_step(spec, DeviceState(energy=x0), u, dt).energy
    assert abs(exact - euler_bucket(a, b, x0, u, dt, substeps=20000)) < 1e-4


@given(st.lists(st.floats(0.0, 5.0), min_size=1, max_size=60),
       st.lists(st.floats(-3.0, 3.0), min_size=60, max_size=60), st.floats(0.0, 40.0))
def test_energy_stays_in_bounds(inputs, noise, x0):
    state = DeviceState(energy=x0)
    for u, w in zip(inputs, noise):
        state = bucket_step(WIDE, state, u, 0.25, w)
        assert WIDE.e_min <= state.energy <= WIDE.e_max


def test_clamp_recorded_and_errors():
    state = bucket_step(WIDE, DeviceState(energy=39.9), 5.0, 1.0, noise=5.0)
    assert state.energy == WIDE.e_max and state.clamped
    with pytest.raises(NegativePower):
        bucket_step(WIDE, DeviceState(energy=1.0), -0.1, 0.25)
    with pytest.raises(NonFiniteState):
        bucket_step(WIDE, DeviceState(energy=1.0), 1.0, 0.25, noise=math.inf)


def test_spec_validation():
    with pytest.raises(ValueError):
        BucketSpec(0.2, 1.0, 5.0, 0.0, 10.0, 9.5, 1.0)  # band exceeds e_max
    with pytest.raises(ValueError):
        BucketSpec(0.0, 1.0, 5.0, 0.0, 10.0, 5.0, 1.0)


def test_control_neutral_penalty_is_plain_hysteresis():
    spec = WIDE
    assert bucket_local_control(spec, DeviceState(energy=8.9), 0.5) == spec.p_max
    assert bucket_local_control(spec, DeviceState(energy=11.1), 0.5) == 0.0
    assert bucket_local_control(spec, DeviceState(energy=10.0, running=True), 0.5) == spec.p_max
    assert bucket_local_control(spec, DeviceState(energy=10.0, running=False), 0.5) == 0.0


def test_control_high_penalty_lowers_thresholds():
    spec = BucketSpec(0.2, 1.0, 5.0, 0.0, 40.0, 10.0, 1.0, penalty_shift_gain=1.0)
    # thresholds drop by k_p / 2 = 0.5
    assert spec.setpoint(1.0) == pytest.approx(9.5)
    state = DeviceState(energy=10.6, running=True)
    assert bucket_local_control(spec, state, 0.5) == spec.p_max
    assert bucket_local_control(spec, state, 1.0) == 0.0


@given(st.floats(0.0, 40.0), st.booleans(), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_control_monotone_in_penalty(x, running, p1, p2):
    lo, hi = sorted((p1, p2))
    state = DeviceState(energy=x, running=running)
    assert bucket_local_control(WIDE, state, hi) <= bucket_local_control(WIDE, state, lo)


def test_battery_example():
    spec = BatterySpec(p_max=5.0, e_target=20.0, deadline_step=7, e_max=40.0)
    power = battery_schedule(spec, hourly([9, 1, 8, 2, 7, 3, 6, 4]))
    assert set(np.flatnonzero(power)) == {1, 3, 5, 7}
    assert power.sum() == 20.0
    cost, subset = brute_battery([9, 1, 8, 2, 7, 3, 6, 4], 5.0, 4, 7)
    assert subset == (1, 3, 5, 7) and cost == 50.0


def test_battery_no_slack_and_infeasible():
    spec = BatterySpec(p_max=5.0, e_target=40.0, deadline_step=7, e_max=40.0)
    assert np.all(battery_schedule(spec, hourly([9, 1, 8, 2, 7, 3, 6, 4])) == 5.0)
    spec = BatterySpec(p_max=5.0, e_target=30.0, deadline_step=3, e_max=40.0, efficiency=0.9)
    with pytest.raises(Infeasible) as err:
        battery_schedule(spec, hourly([1, 2, 3, 4, 5]))
    assert err.value.deficit == pytest.approx(30.0 - 0.9 * 5.0 * 4)


def test_battery_fractional_last_step():
    spec = BatterySpec(p_max=4.0, e_target=10.0, deadline_step=5, e_max=20.0, efficiency=0.8)
    power = battery_schedule(spec, hourly([3, 1, 2, 5, 4, 6]))
    assert (0.8 * power).sum() == pytest.approx(10.0, rel=1e-12)
    # cheapest three full steps give 9.6 kWh; the fourth cheapest tops up the rest
    assert power[1] == power[2] == power[0] == 4.0
    assert power[4] == pytest.approx(0.4 / 0.8)
    assert power[3] == power[5] == 0.0


@given(st.lists(st.integers(1, 6), min_size=2, max_size=12), st.data())
def test_battery_matches_enumeration(prices, data):
    n = len(prices)
    deadline = data.draw(st.integers(0, n - 1))
    blocks = data.draw(st.integers(0, deadline + 1))
    spec = BatterySpec(p_max=2.0, e_target=2.0 * blocks, deadline_step=deadline, e_max=100.0)
    power = battery_schedule(spec, hourly(prices))
    cost = float(power @ np.array(prices, dtype=float))
    if blocks:
        best_cost, best = brute_battery(prices, 2.0, blocks, deadline)
        assert cost == pytest.approx(best_cost, abs=1e-12)
        assert tuple(np.flatnonzero(power)) == best  # earliest-on-tie subset
    assert power.sum() == pytest.approx(2.0 * blocks)


@given(st.lists(st.floats(0.1, 10.0), min_size=2, max_size=12), st.data())
def test_battery_fractional_matches_lp(prices, data):
    n = len(prices)
    deadline = data.draw(st.integers(0, n - 1))
    eff = data.draw(st.floats(0.5, 1.0))
    fill = data.draw(st.one_of(st.just(0.0), st.floats(1e-3, 1.0)))
    target = fill * eff * 3.0 * 0.5 * (deadline + 1)
    spec = BatterySpec(p_max=3.0, e_target=target, deadline_step=deadline, e_max=1e3, efficiency=eff)
    grid = TimeGrid(0, 1800, n)
    power = battery_schedule(spec, Signal(grid, prices))
    bounds = [(0, 3.0)] * (deadline + 1) + [(0, 0)] * (n - deadline - 1)
    lp = linprog(np.array(prices) * 0.5, A_eq=[[eff * 0.5] * n], b_eq=[target], bounds=bounds)
    assert lp.status == 0
    assert float(power @ prices) * 0.5 == pytest.approx(lp.fun, rel=1e-9, abs=1e-9)
    assert float(power.sum()) * eff * 0.5 == pytest.approx(target, rel=1e-12, abs=1e-12)
    assert np.all(power[deadline + 1:] == 0)


def test_bakery_examples():
    spec = BakerySpec((2.0, 3.0), 0, 2)
    assert bakery_schedule(spec, hourly([5, 1, 1, 5])) == 1
    assert brute_bakery([2, 3], [5, 1, 1, 5], 0, 2) == (1, 5.0)
    assert bakery_schedule(BakerySpec((1.0, 1.0), 2, 5), hourly([3] * 8)) == 2
    assert bakery_schedule(BakerySpec((1.0,), 4, 4), hourly([9, 1, 1, 1, 9, 1])) == 4


@given(st.lists(st.integers(1, 9), min_size=3, max_size=12), st.data())
def test_bakery_matches_enumeration(prices, data):
    n = len(prices)
    length = data.draw(st.integers(1, n))
    profile = data.draw(st.lists(st.integers(1, 4), min_size=length, max_size=length))
    earliest = data.draw(st.integers(0, n - length))
    latest = data.draw(st.integers(earliest, n - length))
    spec = BakerySpec(tuple(profile), earliest, latest)
    assert bakery_schedule(spec, hourly(prices)) == brute_bakery(profile, prices, earliest, latest)[0]


def test_bakery_power_runs_uninterrupted():
    spec = BakerySpec((0.5, 1.0, 0.25), 0, 3)
    power = bakery_power(spec, 2, 8, 0.25)
    assert list(power) == [0, 0, 2.0, 4.0, 1.0, 0, 0, 0]
