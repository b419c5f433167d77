#!/usr/bin/env python3
"""Replay the three-job example: 10/20/21 s jobs on one server with 50 s budgets."""

import sys

from maintsched.experiment import replay_table1


def main() -> int:
    rows = replay_table1()
    print(f"{'scenario':<16} {'predicted':<20} {'scheduled':>9} {'completed':>9}  outcome")
    for r in rows:
        print(f"{r.name:<16} {str(list(r.predictions)):<20} {r.scheduled:>9} {r.completed:>9}  {r.status}"
              + ("" if r.passed else "  <-- unexpected"))
    return 0 if all(r.passed for r in rows) else 1


if __name__ == "__main__":
    sys.exit(main())
