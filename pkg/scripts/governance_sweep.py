"""Governance modes against feeder margin on the congestion scenario.

    python scripts/governance_sweep.py [--out results/governance.csv] [--workers N]
"""

import argparse
from pathlib import Path

from flexlattice import load_scenario, sweep
from flexlattice.engine import write_sweep_table

ROOT = Path(__file__).resolve().parent.parent
MODES = ("TotalTSO", "HybridDSO", "TotalDSO")
MARGINS = (0.0, 0.1, 0.2)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--scenario", default=str(ROOT / "scenarios" / "congestion.json"))
    ap.add_argument("--out", default="results/governance.csv")
    ap.add_argument("--workers", type=int, default=None)
    args = ap.parse_args(argv)
    cases = [(g, m) for m in MARGINS for g in MODES]
    configs = [load_scenario(args.scenario, [f'governance="{g}"', f"feeder.margin={m}"])
               for g, m in cases]
    result = sweep(configs, workers=args.workers)
    for (g, margin), r in zip(cases, result.results):
        if r is None:
            continue
        print(f"{g:10s} margin={margin:.1f} violations={r.violations:4d} "
              f"cost={r.total_cost:8.2f} curtailed={r.extra['curtailed_kwh']:8.2f} kWh")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_sweep_table(result, out)
    print(out)
    return 1 if result.errors else 0


if __name__ == "__main__":
    raise SystemExit(main())
