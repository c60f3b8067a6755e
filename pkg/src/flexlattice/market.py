"""Day-ahead stage: Flexi Order clearing, purchase shifting and settlement."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import EmptyWindow, WindowOutOfGrid
from .signals import Signal, Unit

DEFAULT_CAP_FACTOR = 2.0


@dataclass(frozen=True)
class FlexiOrder:
    """Buy ``energy`` kWh over ``duration`` steps inside [window_start, window_end)."""

    energy: float
    window_start: int
    window_end: int
    duration: int

    def __post_init__(self):
        if not self.energy > 0:
            raise ValueError("energy must be > 0")
        if not self.window_start < self.window_end:
            raise ValueError("window_start must precede window_end")
        if not 1 <= self.duration <= self.window_end - self.window_start:
            raise ValueError("duration must fit inside the window")


@dataclass(frozen=True)
class ClearedOrder:
    order: FlexiOrder
    selected_steps: tuple[int, ...]
    per_step_energy: float
    cost: float

    def energy_profile(self, steps: int) -> np.ndarray:
        out = np.zeros(steps)
        out[list(self.selected_steps)] = self.per_step_energy
        return out


def clear_flexi_order(order: FlexiOrder, prices: Signal) -> ClearedOrder:
    """Pick the ``duration`` cheapest steps of the window; ties go earlier."""
    if order.window_start < 0 or order.window_end > prices.grid.steps:
        raise WindowOutOfGrid(
            f"window [{order.window_start}, {order.window_end}) outside {prices.grid.steps} steps"
        )
    idx = np.arange(order.window_start, order.window_end)
    window = np.asarray(prices.values)[idx]
    chosen = idx[np.lexsort((idx, window))[: order.duration]]
    selected = tuple(sorted(int(k) for k in chosen))
    per_step = order.energy / order.duration
    cost = float(sum(per_step * prices.values[k] for k in selected))
    return ClearedOrder(order, selected, per_step, cost)


@dataclass(frozen=True)
class PortfolioSchedule:
    purchased: Signal  # kWh per step
    spot_cost: float
    baseline_cost: float

    @property
    def savings(self) -> float:
        return self.baseline_cost - self.spot_cost


def optimize_purchases(flexible_energy: float, shiftable_window, baseline: Signal,
                       prices: Signal, cap: float | None = None,
                       cap_factor: float = DEFAULT_CAP_FACTOR) -> PortfolioSchedule:
    """Shift up to ``flexible_energy`` kWh from expensive to cheap window steps.

    Every step in the window may rise to ``cap`` (default ``cap_factor``
    times the baseline peak) and fall to zero. Moves pair the dearest
    remaining source with the cheapest remaining sink until no move saves
    money, which is optimal for this linear problem with box limits.
    """
    window = sorted(set(int(k) for k in shiftable_window))
    if not window:
        raise EmptyWindow("shiftable window is empty")
    n = baseline.grid.steps
    if window[0] < 0 or window[-1] >= n:
        raise WindowOutOfGrid("shiftable window outside the grid")
    base = np.asarray(baseline.values, dtype=float)
    price = np.asarray(prices.values, dtype=float)
    if np.any(base < 0):
        raise ValueError("baseline energy must be >= 0")
    if flexible_energy < 0:
        raise ValueError("flexible_energy must be >= 0")
    if flexible_energy > base[window].sum() + 1e-9:
        raise ValueError("cannot shift more energy than the window's baseline holds")
    if cap is None:
        cap = cap_factor * float(base.max())
    purchased = base.copy()
    budget = float(flexible_energy)
    win = np.array(window)
    # dearest first for sources, cheapest first for sinks; ties resolved by step index
    sources = list(win[np.lexsort((win, -price[win]))])
    sinks = list(win[np.lexsort((win, price[win]))])
    while budget > 0 and sources and sinks:
        s, d = sources[0], sinks[0]
        if price[s] <= price[d]:
            break
        room = cap - purchased[d]
        avail = purchased[s]
        if avail <= 0:
            sources.pop(0)
            continue
        if room <= 0:
            sinks.pop(0)
            continue
        amount = min(avail, room, budget)
        purchased[s] -= amount
        purchased[d] += amount
        budget -= amount
    schedule = Signal(baseline.grid, purchased, Unit.KWH)
    return PortfolioSchedule(schedule, float(purchased @ price), float(base @ price))


@dataclass(frozen=True)
class Settlement:
    spot: np.ndarray
    shortfall: np.ndarray  # delivered above purchase, bought at imbalance price
    surplus: np.ndarray  # purchased but not delivered

    @property
    def spot_cost(self) -> float:
        return float(self.spot.sum())

    @property
    def imbalance_cost(self) -> float:
        return float(self.shortfall.sum() + self.surplus.sum())

    @property
    def total(self) -> float:
        return self.spot_cost + self.imbalance_cost


def settle(purchased: Signal, delivered: Signal, spot: Signal, imbalance: Signal,
           sell_penalty: Signal | None = None) -> Settlement:
    """Two-price settlement of metered delivery against purchases.

    Under-purchased energy is bought at ``imbalance``; over-purchased energy
    is charged ``sell_penalty`` per kWh (defaults to ``imbalance``).
    """
    grid = purchased.grid
    for s in (delivered, spot, imbalance) + ((sell_penalty,) if sell_penalty else ()):
        if s.grid != grid:
            raise ValueError("settlement inputs must share a grid")
    bought = np.asarray(purchased.values)
    used = np.asarray(delivered.values)
    sell = np.asarray((sell_penalty or imbalance).values)
    return Settlement(
        spot=bought * np.asarray(spot.values),
        shortfall=np.maximum(used - bought, 0.0) * np.asarray(imbalance.values),
        surplus=np.maximum(bought - used, 0.0) * sell,
    )


SETTLEMENT_COLUMNS = ("step", "purchased_kwh", "delivered_kwh", "spot", "imbalance_component")


def write_settlement_csv(purchased: Signal, delivered: Signal, spot: Signal,
                         result: Settlement, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SETTLEMENT_COLUMNS)
        imbalance = result.shortfall + result.surplus
        for k in range(purchased.grid.steps):
            w.writerow([k, repr(float(purchased.values[k])), repr(float(delivered.values[k])),
                        repr(float(spot.values[k])), repr(float(imbalance[k]))])
