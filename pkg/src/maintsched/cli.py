"""Command-line driver.

    maintsched generate       synthetic workload + per-firmware characterization
    maintsched evaluate       train methods, simulate cycles, write comparison reports
    maintsched sweep          per-quantile test MAPE/OPR for every firmware
    maintsched replay-table1  three-job asymmetric-cost example

Exit codes: 0 success, 2 configuration error, 3 runtime or assertion failure.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path
from typing import Sequence

from .domain import ConfigError, write_csv
from .experiment import (
    ExperimentConfig, atomic_write_text, default_file_mode, ensure_out_dir, load_config, load_dataset,
    replay_table1, run_evaluation, run_sweep, sweep_csv,
)
from .predictor import save_predictor_set
from .scheduler import write_trace
from .workload import characterize, write_characterization

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("maintsched")


@contextlib.contextmanager
def _atomic_path(path: Path):
    """Yield a temporary sibling path; rename it onto ``path`` on success."""
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        yield tmp
        os.chmod(tmp, default_file_mode())
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def _replace_dir(src: Path, dst: Path) -> None:
    if dst.exists():
        shutil.rmtree(dst)
    os.replace(src, dst)


def _config(args: argparse.Namespace) -> ExperimentConfig:
    overrides = {
        "seed": args.seed,
        "out": args.out,
        "n_jobs": getattr(args, "n_jobs", None),
        "n_servers": getattr(args, "n_servers", None),
        "n_days": getattr(args, "n_days", None),
        "methods": getattr(args, "methods", None),
        "n_cycles": getattr(args, "n_cycles", None),
        "quantiles": getattr(args, "quantiles", None),
        "dataset_path": getattr(args, "dataset", None),
        "oracle": True if getattr(args, "oracle", False) else None,
    }
    return load_config(args.config, overrides)


def cmd_generate(args: argparse.Namespace) -> int:
    cfg = _config(args)
    out = ensure_out_dir(cfg.out)
    data = load_dataset(cfg)
    stats = characterize(data)
    with _atomic_path(out / "dataset.csv") as tmp:
        write_csv(data, tmp)
    with _atomic_path(out / "characterization.csv") as s_tmp, _atomic_path(out / "cdf.csv") as c_tmp:
        write_characterization(stats, s_tmp, c_tmp)
    print(f"{len(data)} jobs written to {out / 'dataset.csv'}")
    print(f"{'firmware':<9} {'jobs':>6} {'share%':>7} {'median/p99':>11} {'max_norm':>9}")
    for s in stats.values():
        flag = "  (low confidence)" if s.low_confidence else ""
        print(f"{s.firmware.value:<9} {s.n:>6} {100 * s.n / len(data):>7.2f} {s.median_tail_ratio:>11.3f} "
              f"{s.max_norm:>9.3f}{flag}")
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = _config(args)
    out = ensure_out_dir(cfg.out)
    result = run_evaluation(cfg)
    for run in result.runs:
        if run.predictor is not None:
            for w in run.predictor.warnings:
                log.warning("%s: %s", run.method, w)

    staging = Path(tempfile.mkdtemp(dir=out, prefix=".staging."))
    try:
        for run in result.runs:
            tdir = staging / "traces" / run.method
            tdir.mkdir(parents=True)
            for k, cycle in enumerate(run.campaign.cycles, start=1):
                write_trace((e for u in cycle for e in u.trace), tdir / f"cycle{k}.jsonl")
            if run.predictor is not None:
                save_predictor_set(run.predictor, staging / "predictors" / run.method)
        for name in ("traces", "predictors"):
            if (staging / name).exists():
                _replace_dir(staging / name, out / name)
    finally:
        shutil.rmtree(staging, ignore_errors=True)
    atomic_write_text(out / "metrics.csv", result.comparison.to_csv())
    atomic_write_text(out / "comparison.md", result.comparison.to_markdown())

    u = result.unit_config
    print(f"beta={u.beta} tau={u.tau:.1f}s T={u.T:.1f}s cycles={cfg.n_cycles} test jobs={len(result.split.test)}")
    print(result.comparison.to_markdown())
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = _config(args)
    out = ensure_out_dir(cfg.out)
    rows = run_sweep(cfg)
    atomic_write_text(out / "sweep.csv", sweep_csv(rows))
    print(f"{'firmware':<9} {'q':>5} {'MAPE%':>9} {'OPR':>6}")
    for r in rows:
        mark = " *" if r.chosen else ""
        print(f"{r.firmware:<9} {r.quantile:>5.2f} {r.test_mape:>9.2f} {r.test_opr:>6.3f}{mark}")
    return EXIT_OK


def cmd_replay_table1(args: argparse.Namespace) -> int:
    rows = replay_table1()
    for r in rows:
        verdict = "PASS" if r.passed else "FAIL"
        carried = ",".join(r.carried) or "-"
        print(f"{verdict} {r.name:<16} predicted={list(r.predictions)} scheduled={r.scheduled} "
              f"completed={r.completed} {r.status} carried={carried}")
    return EXIT_OK if all(r.passed for r in rows) else EXIT_RUNTIME


def _common(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = {"default": argparse.SUPPRESS} if suppress else {"default": None}
    parser.add_argument("--config", help="YAML experiment config", **d)
    parser.add_argument("--seed", type=int, help="random seed (workload, split)", **d)
    parser.add_argument("--out", help="output directory", **d)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="maintsched", description=__doc__.split("\n\n")[0])
    _common(p, suppress=False)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic workload and its characterization")
    _common(g, suppress=True)
    g.add_argument("--n-jobs", type=int)
    g.add_argument("--n-servers", type=int)
    g.add_argument("--n-days", type=int)
    g.set_defaults(func=cmd_generate)

    e = sub.add_parser("evaluate", help="compare methods through multi-cycle simulation")
    _common(e, suppress=True)
    e.add_argument("--n-jobs", type=int)
    e.add_argument("--dataset", help="CSV dataset instead of a generated workload")
    e.add_argument("--methods", help="comma-separated subset of ACELA,GBT_MSE,LR")
    e.add_argument("--n-cycles", type=int)
    e.add_argument("--oracle", action="store_true", help="also simulate perfect predictions")
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("sweep", help="per-quantile test MAPE/OPR per firmware")
    _common(s, suppress=True)
    s.add_argument("--n-jobs", type=int)
    s.add_argument("--dataset", help="CSV dataset instead of a generated workload")
    s.add_argument("--quantiles", help="comma-separated quantile grid")
    s.set_defaults(func=cmd_sweep)

    r = sub.add_parser("replay-table1", help="replay the three-job over/under-prediction example")
    _common(r, suppress=True)
    r.set_defaults(func=cmd_replay_table1)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, KeyError, AssertionError, OSError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
