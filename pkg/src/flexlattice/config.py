"""Scenario files: JSON schema, defaults, dotted-key overrides and loading."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .aggregator import CommModel, Fleet, FleetDevice
from .devices import BakerySpec, BatterySpec, BucketSpec
from .errors import ConfigError, FlexLatticeError, MissingFile
from .flexfunc import FlexibilityFunction
from .grid import FeederModel, GovernanceMode, load_feeder
from .market import FlexiOrder
from .signals import Signal, TimeGrid, Unit, load_price_csv, parse_timestamp

PENALTY_SOURCES = ("price", "ff_tracking", "neutral")

DEFAULTS: dict[str, Any] = {
    "name": "scenario",
    "grid": {"start": 0, "step_s": 300, "steps": 288},
    "engine": {"seed": None, "dither_steps": 0, "penalty_source": "price"},
    "prices": {"spot": None, "imbalance": None, "imbalance_sell": None},
    "comm": {"cycle_time_s": 1.0, "mode": "broadcast", "per_device_latency_s": 0.0},
    "governance": "HybridDSO",
    "feeder": None,
    "fleet": [],
    "market": None,
    "ff": None,
    "estimation": {"process_var_kwh2": 0.01, "meas_var_kwh2": 0.25},
}

FEEDER_DEFAULTS = {"nodes": None, "baseline_files": {}, "baseline_kw": {}, "margin": 0.0}
MARKET_DEFAULTS = {"flexi_orders": [], "purchases": None}
PURCHASE_DEFAULTS = {"flexible_energy_kwh": 0.0, "window": None, "cap_factor": 2.0}

BUCKET_KEYS = {
    "leak_rate_per_h": "leak_rate", "input_gain": "input_gain", "p_max_kw": "p_max",
    "e_min_kwh": "e_min", "e_max_kwh": "e_max", "comfort_center_kwh": "comfort_center",
    "comfort_halfwidth_kwh": "comfort_halfwidth",
    "penalty_shift_gain_kwh": "penalty_shift_gain",
}
BATTERY_KEYS = {
    "p_max_kw": "p_max", "e_target_kwh": "e_target", "deadline_step": "deadline_step",
    "e_max_kwh": "e_max", "efficiency": "efficiency",
}


def _merge(defaults: dict, given: dict) -> dict:
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def with_defaults(raw: dict) -> dict:
    data = _merge(DEFAULTS, raw)
    if data["feeder"] is not None:
        data["feeder"] = _merge(FEEDER_DEFAULTS, data["feeder"])
    if data["market"] is not None:
        data["market"] = _merge(MARKET_DEFAULTS, data["market"])
        if data["market"]["purchases"] is not None:
            data["market"]["purchases"] = _merge(PURCHASE_DEFAULTS, data["market"]["purchases"])
    return data


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides) -> dict:
    """Apply ``key.sub=value`` overrides; every key must already exist."""
    data = copy.deepcopy(data)
    for item in overrides or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(item, "override must look like key=value")
        parts = key.strip().split(".")
        node = data
        for depth, part in enumerate(parts):
            if isinstance(node, list):
                try:
                    idx = int(part)
                    node[idx]
                except (ValueError, IndexError):
                    raise ConfigError(key, "no such list index") from None
                part = idx
            elif not isinstance(node, dict) or part not in node:
                raise ConfigError(key, "not a schema key")
            if depth == len(parts) - 1:
                node[part] = _parse_value(value)
            else:
                node = node[part]
    return data


@dataclass(frozen=True)
class PurchasePlan:
    flexible_energy: float
    window: tuple[int, int]  # step range within each day
    cap_factor: float


@dataclass(frozen=True, eq=False)
class ScenarioConfig:
    name: str
    grid: TimeGrid
    fleet: Fleet
    spot: Signal
    imbalance: Signal | None
    imbalance_sell: Signal | None
    governance: GovernanceMode
    feeder: FeederModel | None
    margin: float
    flexi_orders: tuple[FlexiOrder, ...]
    purchases: PurchasePlan | None
    ff: FlexibilityFunction | str | None
    seed: int
    dither_steps: int
    penalty_source: str
    process_var: float
    meas_var: float
    raw: dict = field(default_factory=dict)

    @property
    def has_market(self) -> bool:
        return bool(self.flexi_orders) or self.purchases is not None


def _require(d: dict, key: str, where: str):
    if key not in d or d[key] is None:
        raise ConfigError(f"{where}.{key}", "required")
    return d[key]


def _initial_values(value, count: int, where: str) -> np.ndarray:
    if isinstance(value, (int, float)):
        return np.full(count, float(value))
    if isinstance(value, list) and len(value) == 2:
        lo, hi = float(value[0]), float(value[1])
        if count == 1:
            return np.array([(lo + hi) / 2.0])
        return np.linspace(lo, hi, count)
    if isinstance(value, list) and len(value) == count:
        return np.asarray(value, dtype=float)
    raise ConfigError(where, "initial energy must be a number, [lo, hi] or one value per device")


def build_fleet(groups: list, comm: CommModel) -> Fleet:
    devices = []
    for g_idx, group in enumerate(groups):
        where = f"fleet.{g_idx}"
        kind = _require(group, "kind", where)
        count = int(group.get("count", 1))
        prefix = group.get("id_prefix", f"{kind}{g_idx}_")
        nodes = group.get("nodes") or [group.get("node", "root")]
        cost = float(group.get("marginal_cost", 0.0))
        noise = float(group.get("noise_std_kwh", 0.0))
        on_fraction = float(group.get("initial_on_fraction", 0.0))
        if not 0.0 <= on_fraction <= 1.0:
            raise ConfigError(f"{where}.initial_on_fraction", "must lie in [0, 1]")
        try:
            if kind == "bucket":
                kwargs = {v: float(_require(group, k, where)) for k, v in BUCKET_KEYS.items()
                          if k != "penalty_shift_gain_kwh"}
                kwargs["penalty_shift_gain"] = float(group.get("penalty_shift_gain_kwh", 0.0))
                spec = BucketSpec(**kwargs)
                init = _initial_values(group.get("initial_energy_kwh", spec.comfort_center),
                                       count, f"{where}.initial_energy_kwh")
            elif kind == "battery":
                kwargs = {v: _require(group, k, where) for k, v in BATTERY_KEYS.items()
                          if k != "efficiency"}
                kwargs["deadline_step"] = int(kwargs["deadline_step"])
                kwargs["efficiency"] = float(group.get("efficiency", 1.0))
                kwargs["e_initial"] = float(group.get("initial_energy_kwh", 0.0))
                spec = BatterySpec(**kwargs)
                init = np.full(count, spec.e_initial)
            elif kind == "bakery":
                spec = BakerySpec(tuple(_require(group, "run_profile_kwh", where)),
                                  int(_require(group, "earliest_start", where)),
                                  int(_require(group, "latest_start", where)))
                init = np.zeros(count)
            else:
                raise ConfigError(f"{where}.kind", f"unknown device kind {kind!r}")
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(where, str(exc)) from None
        width = len(str(count - 1))
        for k in range(count):
            devices.append(FleetDevice(
                id=f"{prefix}{k:0{width}d}", spec=spec, node=nodes[k % len(nodes)],
                marginal_cost=cost, initial_energy=float(init[k]), noise_std=noise,
                # spreads the running devices evenly through the group
                initial_running=math.floor((k + 1) * on_fraction) > math.floor(k * on_fraction),
            ))
    try:
        return Fleet(tuple(devices), comm)
    except ValueError as exc:
        raise ConfigError("fleet", str(exc)) from None


def _load_signal(base_dir: Path, rel, grid: TimeGrid, where: str) -> Signal:
    path = base_dir / rel
    try:
        return load_price_csv(path, grid)
    except MissingFile:
        raise ConfigError(where, f"no such file: {path}") from None
    except FlexLatticeError as exc:
        raise ConfigError(where, f"{path}: {exc}") from None


def config_from_dict(raw: dict, base_dir=".") -> ScenarioConfig:
    base_dir = Path(base_dir)
    data = with_defaults(raw)
    g = data["grid"]
    try:
        start = g["start"]
        start = parse_timestamp(str(start)) if not isinstance(start, (int, float)) else float(start)
        grid = TimeGrid(start, float(g["step_s"]), int(g["steps"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError("grid", str(exc)) from None

    eng = data["engine"]
    if isinstance(eng.get("seed"), bool) or not isinstance(eng.get("seed"), int):
        raise ConfigError("engine.seed", "an explicit integer seed is required")
    seed = int(eng["seed"]) & 0xFFFFFFFFFFFFFFFF
    dither = int(eng.get("dither_steps", 0))
    if dither < 0:
        raise ConfigError("engine.dither_steps", "must be >= 0")
    source = eng.get("penalty_source", "price")
    if source not in PENALTY_SOURCES:
        raise ConfigError("engine.penalty_source", f"one of {PENALTY_SOURCES}")

    c = data["comm"]
    try:
        comm = CommModel(float(c["cycle_time_s"]), c["mode"], float(c["per_device_latency_s"]))
    except ValueError as exc:
        raise ConfigError("comm", str(exc)) from None
    fleet = build_fleet(data["fleet"], comm)

    prices = data["prices"]
    spot = _load_signal(base_dir, _require(prices, "spot", "prices"), grid, "prices.spot")
    imbalance = sell = None
    if prices.get("imbalance"):
        imbalance = _load_signal(base_dir, prices["imbalance"], grid, "prices.imbalance")
    if prices.get("imbalance_sell"):
        sell = _load_signal(base_dir, prices["imbalance_sell"], grid, "prices.imbalance_sell")

    try:
        governance = GovernanceMode(data["governance"])
    except ValueError:
        raise ConfigError("governance", "one of TotalTSO, HybridDSO, TotalDSO") from None

    feeder, margin = None, 0.0
    if data["feeder"] is not None:
        f = data["feeder"]
        margin = float(f["margin"])
        device_map = {d.id: d.node for d in fleet.devices}
        try:
            feeder = load_feeder(_require(f, "nodes", "feeder"), grid, device_map,
                                 f["baseline_files"], f["baseline_kw"], base_dir)
        except MissingFile as exc:
            raise ConfigError("feeder", str(exc)) from None
        except (ValueError, FlexLatticeError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError("feeder", str(exc)) from None

    orders, purchases = (), None
    if data["market"] is not None:
        m = data["market"]
        try:
            orders = tuple(
                FlexiOrder(float(o["energy_kwh"]), int(o["window_start"]), int(o["window_end"]),
                           int(o["duration_steps"]))
                for o in m["flexi_orders"]
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError("market.flexi_orders", str(exc)) from None
        if m["purchases"] is not None:
            p = m["purchases"]
            window = p["window"] or [0, grid.steps_per_day()]
            purchases = PurchasePlan(float(p["flexible_energy_kwh"]),
                                     (int(window[0]), int(window[1])), float(p["cap_factor"]))

    ff = data["ff"]
    if isinstance(ff, dict):
        keys = {"tau_h": "tau", "alpha_h": "alpha", "beta_h": "beta", "delta": "delta",
                "rebound_ratio": "rebound_ratio", "rebound_duration_h": "rebound_duration",
                "p_base_kw": "p_base"}
        try:
            ff = FlexibilityFunction(**{v: float(ff[k]) for k, v in keys.items()})
        except (KeyError, ValueError) as exc:
            raise ConfigError("ff", str(exc)) from None
    elif ff not in (None, "fit"):
        raise ConfigError("ff", "expected parameters, 'fit' or null")
    if source == "ff_tracking":
        if ff is None:
            raise ConfigError("ff", "required when penalty_source is ff_tracking")
        if not (orders or purchases):
            raise ConfigError("market", "ff_tracking needs a market stage to track")

    est = data["estimation"]
    return ScenarioConfig(
        name=str(data["name"]), grid=grid, fleet=fleet, spot=spot, imbalance=imbalance,
        imbalance_sell=sell, governance=governance, feeder=feeder, margin=margin,
        flexi_orders=orders, purchases=purchases, ff=ff, seed=seed, dither_steps=dither,
        penalty_source=source, process_var=float(est["process_var_kwh2"]),
        meas_var=float(est["meas_var_kwh2"]), raw=data,
    )


def load_scenario(path, overrides=()) -> ScenarioConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError("scenario", f"no such file: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError("scenario", f"{path}: {exc}") from None
    data = apply_overrides(with_defaults(raw), overrides)
    return config_from_dict(data, base_dir=path.parent)
