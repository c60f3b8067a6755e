import csv
import json
import shutil
import subprocess

import numpy as np
import pytest

from conftest import SCENARIOS, SHIPPED
from scenario_utils import tiny_scenario, write_prices
from strategies import rel_errors
from flexlattice.cli import main, report
from flexlattice.errors import MissingTrace
from flexlattice.flexfunc import FlexibilityFunction, from_record, rebound_areas, step_response

FF = FlexibilityFunction(0.5, 1.5, 3.0, 0.4, 1.0, 2.0, 10.0)


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_run_writes_metrics(tmp_path, capsys):
    out = tmp_path / "nv"
    assert main(["run", str(SCENARIOS / "night_valley.json"), "--out", str(out)]) == 0
    assert "night_valley:" in capsys.readouterr().out
    data = json.loads((out / "metrics.json").read_text())
    assert data["savings_fraction"] >= 0.2


def test_run_missing_price_file(tmp_path, capsys):
    path = tiny_scenario(tmp_path, prices={"spot": "gone.csv"})
    assert main(["run", str(path), "--out", str(tmp_path / "o")]) == 1
    assert "gone.csv" in capsys.readouterr().err


def test_run_bad_override(tmp_path, capsys):
    assert main(["run", str(tiny_scenario(tmp_path)), "--set", "engine.nope=3"]) == 1


def test_seed_override(tmp_path):
    scen = str(SCENARIOS / "midnight_sync.json")
    outs = {}
    for tag, seed in (("a", 1), ("b", 7), ("c", 7)):
        assert main(["run", scen, "--out", str(tmp_path / tag), "--set", f"engine.seed={seed}"]) == 0
        outs[tag] = (tmp_path / tag / "metrics.json").read_bytes()
    assert outs["a"] != outs["b"] and outs["b"] == outs["c"]


def _response_csv(path, values, step=180):
    write_prices(path, values, step=step)
    return path


def test_fit_ff_round_trip(tmp_path):
    t = np.arange(140) * 0.05
    path = _response_csv(tmp_path / "resp.csv", step_response(FF, t))
    out = tmp_path / "fit"
    assert main(["fit-ff", str(path), "--p-base", "10", "--out", str(out)]) == 0
    fit = from_record((out / "ff.txt").read_text())
    assert rel_errors(fit, FF).max() < 1e-6
    diag = json.loads((out / "fit_diagnostics.json").read_text())
    assert diag["canonical"] and diag["steps"] == 140
    assert len(read_rows(out / "fit_residuals.csv")) == 140


def test_fit_ff_noisy_and_failing(tmp_path):
    t = np.arange(140) * 0.05
    rng = np.random.default_rng(2)
    noisy = step_response(FF, t) + rng.normal(0, 0.01 * FF.depth, t.size)
    path = _response_csv(tmp_path / "noisy.csv", noisy)
    assert main(["fit-ff", str(path), "--p-base", "10", "--out", str(tmp_path / "n")]) == 0
    zero = _response_csv(tmp_path / "zero.csv", np.zeros(140))
    assert main(["fit-ff", str(zero), "--p-base", "10", "--out", str(tmp_path / "z")]) == 3
    wiggle = _response_csv(tmp_path / "w.csv", 3 * np.sin(4 * np.pi * t))
    assert main(["fit-ff", str(wiggle), "--p-base", "10", "--out", str(tmp_path / "w")]) == 3
    assert (tmp_path / "w" / "ff.txt").is_file()
    assert main(["fit-ff", str(tmp_path / "none.csv"), "--p-base", "10",
                 "--out", str(tmp_path / "x")]) == 1


def test_report_with_market_and_ff(tmp_path):
    out = tmp_path / "flexi"
    assert main(["run", str(SCENARIOS / "flexi_portfolio.json"), "--out", str(out)]) == 0
    written = report(out)
    assert {p.name for p in written} == {"fig_ff_step.csv", "fig_purchases.csv",
                                         "fig_broadcast.csv", "fig_sync.csv"}
    for p in written:
        assert len(read_rows(p)) == 96
    ff = from_record((out / "ff.txt").read_text())
    area_a, _ = rebound_areas(ff)
    energy = sum(float(r["response_kwh"]) for r in read_rows(out / "fig_ff_step.csv"))
    assert abs(energy) < 1e-6 * area_a  # unit rebound ratio: the step is energy neutral


def test_report_without_market(tmp_path, capsys):
    out = tmp_path / "ms"
    assert main(["run", str(SCENARIOS / "midnight_sync.json"), "--out", str(out)]) == 0
    assert main(["report", str(out)]) == 0
    err = capsys.readouterr().err
    assert "fig_purchases.csv omitted" in err and "fig_ff_step.csv omitted" in err
    assert not (out / "fig_purchases.csv").exists()
    sync = read_rows(out / "fig_sync.csv")
    assert len(sync) == 108 and set(sync[0]) == {"time_h", "aggregate_kw", "aggregate_nodither_kw"}


def test_report_missing_trace(tmp_path):
    with pytest.raises(MissingTrace):
        report(tmp_path)
    assert main(["report", str(tmp_path)]) == 1


def test_sweep(tmp_path, capsys):
    for p in SHIPPED:
        if p.stem in ("congestion", "night_valley"):
            shutil.copy(p, tmp_path / p.name)
    shutil.copytree(SCENARIOS / "data", tmp_path / "data")
    out = tmp_path / "out"
    assert main(["sweep", str(tmp_path / "*.json"), "--out", str(out), "--workers", "2"]) == 0
    rows = read_rows(out / "sweep.csv")
    assert [r["name"] for r in rows] == ["congestion", "night_valley"]
    assert (out / "congestion" / "metrics.json").is_file()
    assert main(["sweep", str(tmp_path / "nothing*.json"), "--out", str(out)]) == 1


def test_console_script():
    exe = shutil.which("flexlattice")
    if exe is None:
        pytest.skip("console script not installed")
    res = subprocess.run([exe, "--version"], capture_output=True, text=True, check=True)
    assert res.stdout.startswith("flexlattice ")
