#!/usr/bin/env python3
"""Test-set MAPE and OPR of the quantile models at every grid quantile, per firmware.

Writes a CSV suitable for plotting MAPE-vs-quantile and OPR-vs-quantile curves.

Usage: quantile_sweep.py [--seed N] [--out FILE]
"""

import argparse
from pathlib import Path

from maintsched.experiment import ExperimentConfig, run_sweep, sweep_csv
from maintsched.workload import WorkloadSpec


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="out/sweep.csv")
    args = ap.parse_args()

    rows = run_sweep(ExperimentConfig(workload=WorkloadSpec(seed=args.seed), seed=args.seed))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(sweep_csv(rows))

    for fw in dict.fromkeys(r.firmware for r in rows):
        mine = [r for r in rows if r.firmware == fw]
        print(fw)
        for r in mine:
            bar = "#" * int(round(40 * r.test_opr))
            print(f"  q={r.quantile:.2f}  MAPE {r.test_mape:7.1f}%  OPR {r.test_opr:.3f} {bar}{'  <- chosen' if r.chosen else ''}")
    print(f"\nwrote {args.out}")


if __name__ == "__main__":
    main()
