#!/usr/bin/env python3
"""Compare ACELA against the GBT-MSE and linear baselines over several seeds.

For each seed: generate the default workload, train every method, simulate
three maintenance cycles on the held-out week and print the comparison table.
A summary of offline-server and downtime ratios follows.

Usage: compare_methods.py [--seeds 0 1 2] [--oracle]
"""

import argparse
import time

from maintsched.experiment import ExperimentConfig, run_evaluation
from maintsched.metrics import osr_dtr
from maintsched.predictor import Method
from maintsched.workload import WorkloadSpec


def ratio_text(r, other, ref):
    return f"{r:.2f}x" if r is not None else f"unbounded ({other:g} vs {ref:g})"


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--oracle", action="store_true", help="also simulate perfect predictions")
    args = ap.parse_args()

    summary = []
    for seed in args.seeds:
        start = time.perf_counter()
        cfg = ExperimentConfig(workload=WorkloadSpec(seed=seed), seed=seed, oracle=args.oracle)
        res = run_evaluation(cfg)
        u = res.unit_config
        print(f"## seed {seed}  (tau={u.tau:.0f}s T={u.T:.0f}s, {time.perf_counter() - start:.0f}s)\n")
        print(res.comparison.to_markdown())
        for run in res.runs:
            if run.predictor is not None and run.method == Method.ACELA.value:
                qs = ", ".join(f"{fw.value}={q}" for fw, q in run.predictor.quantiles.items())
                print(f"ACELA quantiles: {qs}\n")
        a, g = res.run(Method.ACELA).report, res.run(Method.GBT_MSE).report
        osr, dtr = osr_dtr(a, g)
        summary.append((seed, ratio_text(osr, g.offline_servers, a.offline_servers),
                        ratio_text(dtr, g.downtime_seconds, a.downtime_seconds)))

    print("GBT_MSE relative to ACELA")
    for seed, osr, dtr in summary:
        print(f"  seed {seed}: OSR {osr}, DTR {dtr}")


if __name__ == "__main__":
    main()
