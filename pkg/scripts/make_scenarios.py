"""Regenerate the shipped scenarios under scenarios/.

    python scripts/make_scenarios.py [--out scenarios]
"""

import argparse
import json
from pathlib import Path

import numpy as np

DAY0 = 1704067200  # 2024-01-01T00:00:00Z


def write_series(path: Path, start: float, step: float, values) -> None:
    with path.open("w", encoding="utf-8") as fh:
        fh.write("timestamp,value\n")
        for k, v in enumerate(values):
            fh.write(f"{int(start + k * step)},{float(v)!r}\n")


def night_valley(out: Path, count: int = 50, name: str = "night_valley") -> dict:
    steps, step = 24, 3600
    prices = [0.10] * 12 + [0.30] * 12
    write_series(out / "data" / "night_valley_spot.csv", DAY0, step, prices)
    return {
        "name": name,
        "grid": {"start": DAY0, "step_s": step, "steps": steps},
        "engine": {"seed": 1, "dither_steps": 0, "penalty_source": "price"},
        "prices": {"spot": "data/night_valley_spot.csv"},
        "comm": {"cycle_time_s": 1.0, "mode": "broadcast"},
        "governance": "HybridDSO",
        "feeder": {"nodes": "data/night_valley_feeder.csv", "baseline_kw": {"sub": 50.0}},
        "fleet": [{
            "kind": "bucket", "count": count, "id_prefix": "pool", "node": "sub",
            "leak_rate_per_h": 0.005, "input_gain": 1.0, "p_max_kw": 2.0,
            "e_min_kwh": 90.0, "e_max_kwh": 110.0, "comfort_center_kwh": 100.0,
            "comfort_halfwidth_kwh": 2.0, "penalty_shift_gain_kwh": 12.0,
            "initial_energy_kwh": [99.0, 101.0],
        }],
    }


def midnight_sync(out: Path) -> dict:
    step = 300
    start = DAY0 - 3 * 3600  # 21:00 the evening before
    steps = 9 * 12
    prices = [0.30] * 36 + [0.10] * (steps - 36)
    write_series(out / "data" / "midnight_spot.csv", start, step, prices)
    return {
        "name": "midnight_sync",
        "grid": {"start": start, "step_s": step, "steps": steps},
        "engine": {"seed": 1, "dither_steps": 0, "penalty_source": "price"},
        "prices": {"spot": "data/midnight_spot.csv"},
        "comm": {"cycle_time_s": 1.0, "mode": "broadcast"},
        "governance": "TotalTSO",
        "fleet": [{
            "kind": "bucket", "count": 200, "id_prefix": "hp",
            "leak_rate_per_h": 0.2, "input_gain": 1.0, "p_max_kw": 5.0,
            "e_min_kwh": 0.0, "e_max_kwh": 25.0, "comfort_center_kwh": 10.0,
            "comfort_halfwidth_kwh": 1.0, "penalty_shift_gain_kwh": 14.0,
            "initial_energy_kwh": [8.0, 14.0], "noise_std_kwh": 0.02,
        }],
    }


def congestion(out: Path) -> dict:
    step, steps = 300, 288
    hours = np.arange(steps) * step / 3600
    prices = np.where((hours >= 1) & (hours < 6), 0.08, 0.25)
    write_series(out / "data" / "congestion_spot.csv", DAY0, step, prices)
    (out / "data" / "congestion_feeder.csv").write_text(
        "node_id,parent_id,capacity_kva\nsub,,400\nlv_a,sub,60\nlv_b,sub,200\n", encoding="utf-8")
    bucket = {
        "kind": "bucket", "count": 12,
        "leak_rate_per_h": 0.2, "input_gain": 1.0, "p_max_kw": 5.0,
        "e_min_kwh": 0.0, "e_max_kwh": 25.0, "comfort_center_kwh": 10.0,
        "comfort_halfwidth_kwh": 1.0, "penalty_shift_gain_kwh": 10.0,
        "initial_energy_kwh": [9.0, 11.0], "noise_std_kwh": 0.02,
    }
    return {
        "name": "congestion",
        "grid": {"start": DAY0, "step_s": step, "steps": steps},
        "engine": {"seed": 1, "dither_steps": 0, "penalty_source": "price"},
        "prices": {"spot": "data/congestion_spot.csv"},
        "comm": {"cycle_time_s": 1.0, "mode": "broadcast"},
        "governance": "TotalTSO",
        "feeder": {"nodes": "data/congestion_feeder.csv",
                   "baseline_kw": {"lv_a": 20.0, "lv_b": 20.0}, "margin": 0.0},
        "fleet": [dict(bucket, id_prefix="a", node="lv_a", marginal_cost=1.0),
                  dict(bucket, id_prefix="b", node="lv_b", marginal_cost=2.0)],
    }


def flexi_portfolio(out: Path) -> dict:
    step, steps = 900, 96
    hours = np.arange(steps) * step / 3600
    spot = 0.20 + 0.08 * np.sin(2 * np.pi * (hours - 10) / 24) + 0.05 * ((hours >= 17) & (hours < 20))
    imbalance = spot * 1.4
    write_series(out / "data" / "flexi_spot.csv", DAY0, step, np.round(spot, 5))
    write_series(out / "data" / "flexi_imbalance.csv", DAY0, step, np.round(imbalance, 5))
    return {
        "name": "flexi_portfolio",
        "grid": {"start": DAY0, "step_s": step, "steps": steps},
        "engine": {"seed": 3, "dither_steps": 2, "penalty_source": "ff_tracking"},
        "prices": {"spot": "data/flexi_spot.csv", "imbalance": "data/flexi_imbalance.csv"},
        "comm": {"cycle_time_s": 1.0, "mode": "broadcast"},
        "governance": "HybridDSO",
        "feeder": {"nodes": "data/flexi_feeder.csv", "baseline_kw": {"sub": 80.0}},
        "fleet": [{
            "kind": "bucket", "count": 60, "id_prefix": "house", "node": "sub",
            "leak_rate_per_h": 0.1, "input_gain": 1.0, "p_max_kw": 3.0,
            "e_min_kwh": 0.0, "e_max_kwh": 30.0, "comfort_center_kwh": 15.0,
            "comfort_halfwidth_kwh": 1.0, "penalty_shift_gain_kwh": 6.0,
            "initial_energy_kwh": [14.0, 16.0], "initial_on_fraction": 0.5,
            "noise_std_kwh": 0.05,
        }, {
            "kind": "battery", "count": 4, "id_prefix": "ev", "node": "sub",
            "p_max_kw": 7.0, "e_target_kwh": 20.0, "deadline_step": 30, "e_max_kwh": 40.0,
            "efficiency": 0.9,
        }, {
            "kind": "bakery", "count": 6, "id_prefix": "dw", "node": "sub",
            "run_profile_kwh": [0.3, 0.4, 0.3, 0.2], "earliest_start": 72, "latest_start": 90,
        }],
        "market": {
            "flexi_orders": [{"energy_kwh": 20.0, "window_start": 32, "window_end": 48,
                              "duration_steps": 8}],
            "purchases": {"flexible_energy_kwh": 40.0, "window": [0, 96], "cap_factor": 1.25},
        },
        "ff": {"tau_h": 0.25, "alpha_h": 1.0, "beta_h": 2.5, "delta": 0.6,
               "rebound_ratio": 1.0, "rebound_duration_h": 2.0, "p_base_kw": 80.0},
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=str(Path(__file__).resolve().parent.parent / "scenarios"))
    args = ap.parse_args(argv)
    out = Path(args.out)
    (out / "data").mkdir(parents=True, exist_ok=True)
    (out / "data" / "night_valley_feeder.csv").write_text(
        "node_id,parent_id,capacity_kva\nsub,,400\n", encoding="utf-8")
    (out / "data" / "flexi_feeder.csv").write_text(
        "node_id,parent_id,capacity_kva\nsub,,400\n", encoding="utf-8")
    for scenario in (night_valley(out), midnight_sync(out), congestion(out), flexi_portfolio(out)):
        path = out / f"{scenario['name']}.json"
        path.write_text(json.dumps(scenario, indent=2) + "\n", encoding="utf-8")
        print(path)


if __name__ == "__main__":
    main()
