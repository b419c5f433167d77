#!/usr/bin/env python3
"""Generate the default workload and print its per-firmware mix and tail statistics.

Usage: characterize_workload.py [--seed N] [--out DIR]
"""

import argparse
from pathlib import Path

from maintsched.domain import write_csv
from maintsched.workload import WorkloadSpec, characterize, generate, write_characterization


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="out/characterize")
    args = ap.parse_args()

    data = generate(WorkloadSpec(seed=args.seed))
    stats = characterize(data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(data, out / "dataset.csv")
    write_characterization(stats, out / "characterization.csv", out / "cdf.csv")

    print(f"{'firmware':<9} {'share%':>7} {'median s':>9} {'p99 s':>9} {'median/p99':>11} {'max/median':>11}")
    for s in stats.values():
        print(f"{s.firmware.value:<9} {100 * s.n / len(data):>7.2f} {s.median:>9.0f} {s.p99:>9.0f} "
              f"{s.median_tail_ratio:>11.3f} {s.max / s.median:>11.2f}")
    print(f"\nwrote {out}/dataset.csv, characterization.csv, cdf.csv")


if __name__ == "__main__":
    main()
