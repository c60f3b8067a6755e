import json

import pytest

from scenario_utils import bucket_group, tiny_scenario, write_prices
from flexlattice.aggregator import CommMode
from flexlattice.config import apply_overrides, build_fleet, load_scenario, with_defaults
from flexlattice.aggregator import CommModel
from flexlattice.devices import BakerySpec, BatterySpec, BucketSpec
from flexlattice.errors import ConfigError
from flexlattice.grid import GovernanceMode


def test_defaults_and_load(tmp_path):
    cfg = load_scenario(tiny_scenario(tmp_path))
    assert cfg.grid.steps == 48 and cfg.grid.step == 300
    assert cfg.governance is GovernanceMode.TOTAL_TSO
    assert cfg.fleet.comm.mode is CommMode.BROADCAST
    assert [d.id for d in cfg.fleet.devices] == [f"bucket0_{k}" for k in range(6)]
    assert [d.initial_energy for d in cfg.fleet.devices] == pytest.approx([9, 9.4, 9.8, 10.2, 10.6, 11])
    assert not cfg.has_market and cfg.feeder is None


def test_overrides(tmp_path):
    path = tiny_scenario(tmp_path)
    cfg = load_scenario(path, ["engine.seed=7", "fleet.0.count=3", 'governance="TotalDSO"'])
    assert cfg.seed == 7 and len(cfg.fleet) == 3 and cfg.governance is GovernanceMode.TOTAL_DSO
    for bad in ("engine.nope=1", "fleet.5.count=1", "engine.seed"):
        with pytest.raises(ConfigError):
            load_scenario(path, [bad])


def test_apply_overrides_does_not_mutate():
    data = with_defaults({"engine": {"seed": 3}})
    out = apply_overrides(data, ["engine.dither_steps=4"])
    assert data["engine"]["dither_steps"] == 0 and out["engine"]["dither_steps"] == 4


def test_seed_required(tmp_path):
    path = tiny_scenario(tmp_path, engine={"dither_steps": 0})
    with pytest.raises(ConfigError) as err:
        load_scenario(path)
    assert err.value.field == "engine.seed"
    assert load_scenario(path, ["engine.seed=5"]).seed == 5


def test_missing_price_file_names_path(tmp_path):
    path = tiny_scenario(tmp_path, prices={"spot": "absent.csv"})
    with pytest.raises(ConfigError) as err:
        load_scenario(path)
    assert "absent.csv" in str(err.value)
    with pytest.raises(ConfigError):
        load_scenario(tmp_path / "nothing.json")


@pytest.mark.parametrize("patch, field", [
    ({"governance": "Anarchy"}, "governance"),
    ({"engine": {"seed": 1, "penalty_source": "vibes"}}, "engine.penalty_source"),
    ({"engine": {"seed": 1, "dither_steps": -1}}, "engine.dither_steps"),
    ({"fleet": [{"kind": "teapot"}]}, "fleet.0.kind"),
    ({"fleet": [bucket_group(2, e_max_kwh=5.0)]}, "fleet.0"),
    ({"fleet": [bucket_group(2, initial_on_fraction=2.0)]}, "fleet.0.initial_on_fraction"),
    ({"engine": {"seed": 1, "penalty_source": "ff_tracking"}}, "ff"),
    ({"ff": "maybe"}, "ff"),
])
def test_config_errors(tmp_path, patch, field):
    with pytest.raises(ConfigError) as err:
        load_scenario(tiny_scenario(tmp_path, **patch))
    assert err.value.field == field


def test_fleet_kinds_and_nodes():
    groups = [
        bucket_group(4, nodes=["a", "b"], marginal_cost=2.5, initial_on_fraction=0.5),
        {"kind": "battery", "count": 2, "id_prefix": "ev", "p_max_kw": 7, "e_target_kwh": 10,
         "deadline_step": 5, "e_max_kwh": 40, "efficiency": 0.9},
        {"kind": "bakery", "count": 1, "run_profile_kwh": [1, 2], "earliest_start": 0,
         "latest_start": 3},
    ]
    fleet = build_fleet(groups, CommModel())
    kinds = [type(d.spec) for d in fleet.devices]
    assert kinds == [BucketSpec] * 4 + [BatterySpec] * 2 + [BakerySpec]
    assert [d.node for d in fleet.devices[:4]] == ["a", "b", "a", "b"]
    assert [d.initial_running for d in fleet.devices[:4]] == [False, True, False, True]
    assert fleet.devices[4].id == "ev0" and fleet.devices[4].spec.efficiency == 0.9
    assert fleet.devices[0].marginal_cost == 2.5
    with pytest.raises(ConfigError):
        build_fleet([bucket_group(2, id_prefix="x"), bucket_group(2, id_prefix="x")], CommModel())


def test_market_and_feeder_sections(tmp_path):
    (tmp_path / "nodes.csv").write_text("node_id,parent_id,capacity_kva\nroot,,100\n")
    path = tiny_scenario(
        tmp_path, feeder={"nodes": "nodes.csv", "baseline_kw": {"root": 10}},
        fleet=[bucket_group(2, node="root")],
        market={"flexi_orders": [{"energy_kwh": 5, "window_start": 0, "window_end": 8,
                                  "duration_steps": 2}],
                "purchases": {"flexible_energy_kwh": 3}},
    )
    cfg = load_scenario(path)
    assert cfg.has_market and cfg.flexi_orders[0].duration == 2
    assert cfg.purchases.window == (0, 288) and cfg.purchases.cap_factor == 2.0
    assert cfg.feeder.ids == ["root"]
    bad = json.loads(path.read_text())
    bad["fleet"][0]["node"] = "elsewhere"
    path.write_text(json.dumps(bad))
    with pytest.raises(ConfigError):
        load_scenario(path)
