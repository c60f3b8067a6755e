"""Aggregate ramp of an all-on activation versus fleet size and actuation mode.

    python scripts/ramp_scaling.py [--p-bar 5] [--cycle 1] [--out results/ramp.csv]
"""

import argparse
import csv
from pathlib import Path

import numpy as np

from flexlattice.aggregator import CommModel, emergent_ramp
from flexlattice.engine import max_ramp, simulate_activation

SIZES = (10, 30, 100, 300, 1000, 3000)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--p-bar", type=float, default=5.0, help="per-device power, kW")
    ap.add_argument("--cycle", type=float, default=1.0, help="actuation cycle, s")
    ap.add_argument("--step", type=float, default=1.0, help="engine step, s")
    ap.add_argument("--out", default="results/ramp.csv")
    args = ap.parse_args(argv)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n", "mode", "simulated_kw_per_s", "formula_kw_per_s"])
        for mode in ("broadcast", "sequential"):
            comm = CommModel(args.cycle, mode)
            for n in SIZES:
                agg = simulate_activation(n, args.p_bar, comm, args.step)
                sim = max_ramp(agg, args.step)
                formula = emergent_ramp(n, args.p_bar, comm)
                w.writerow([n, mode, sim, formula])
                print(f"{mode:10s} n={n:5d} simulated={sim:9.1f} formula={formula:9.1f} kW/s")
    print(out)


if __name__ == "__main__":
    main()
