import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from maintsched.scheduler import (
    CAP_FLOORED, UNIT_BUDGET_EXPIRED, Event, PlannedJob, ServerPlan, UnitConfig, escalate_priorities,
    select_next_job, simulate_cycles, simulate_unit, write_trace,
)
from scheduler_checks import check_unit, random_instance

TRUE = {"A": 10.0, "B": 20.0, "C": 21.0}
ONE_SERVER = UnitConfig(beta=0.5, tau=50.0, T=50.0)


def table1_plan(preds):
    return [ServerPlan.of("s", [(j, p, 0, TRUE[j]) for j, p in zip("ABC", preds)])]


def test_select_largest_fitting_on_equal_priority():
    assert select_next_job([("A", 9, 1), ("B", 19, 1), ("C", 20, 1)], 50) == "C"


def test_select_fit_filter_precedes_priority():
    assert select_next_job([("A", 40, 5), ("B", 10, 1)], 30) == "B"


def test_select_none_fits():
    assert select_next_job([("A", 40, 5), ("B", 31, 1)], 30) is None
    assert select_next_job([], 30) is None


def test_select_tie_goes_to_lowest_id():
    assert select_next_job([("b", 5, 1), ("a", 5, 1)], 10) == "a"


def test_select_rejects_negative_budget():
    with pytest.raises(ValueError):
        select_next_job([("a", 1, 0)], -1)


def test_underprediction_goes_offline():
    out = simulate_unit(table1_plan((9, 19, 20)), ONE_SERVER)
    assert out.scheduled_jobs == 3
    assert out.completed_jobs_total == 2 and out.completed_jobs_online == 0
    assert out.offline_servers == ["s"]
    assert out.downtime_seconds == pytest.approx(1.0)
    assert out.unfinished_jobs == 1


def test_overprediction_stays_online():
    out = simulate_unit(table1_plan((11, 21, 22)), ONE_SERVER)
    assert out.scheduled_jobs == 2 and out.completed_jobs_online == 2
    assert out.returned_servers == ["s"] and out.downtime_seconds == 0.0
    assert out.carried_ids == ["A"]


def test_cap_floor_event():
    out = simulate_unit(table1_plan((11, 21, 22)), ONE_SERVER)
    assert out.concurrency_cap == 1
    assert out.trace[0].kind == CAP_FLOORED


def test_perfect_predictions_never_offline():
    plans = [ServerPlan.of(f"s{i}", [(f"j{i}{k}", d, 0, d) for k, d in enumerate((7.0, 12.0, 30.0))])
             for i in range(5)]
    out = simulate_unit(plans, UnitConfig(0.4, 40.0, 200.0))
    assert out.offline_servers == [] and out.downtime_seconds == 0.0


def test_servers_that_fit_nothing_return_at_once():
    plans = [ServerPlan.of(f"s{i}", [(f"j{i}", 10.0, 0, 10.0)]) for i in range(4)]
    out = simulate_unit(plans, UnitConfig(0.3, 10.0, 15.0))
    # cap 1: s0 runs [0, 10]; at t=10 only 5 s of unit budget remain, so the rest return empty-handed
    assert out.returned_servers == ["s0", "s1", "s2", "s3"]
    assert out.completed_jobs_total == 1
    assert out.carried_ids == ["j1", "j2", "j3"]


def test_no_launch_at_or_after_unit_budget():
    plans = [ServerPlan.of("s0", [("j0", 10.0, 0, 15.0)])]
    plans += [ServerPlan.of(f"s{i}", [(f"j{i}", 1.0, 0, 1.0)]) for i in range(1, 4)]
    out = simulate_unit(plans, UnitConfig(0.3, 15.0, 15.0))
    assert out.returned_servers == ["s0"]
    assert out.never_launched == ["s1", "s2", "s3"]
    assert out.unscheduled_jobs == 3
    assert any(e.kind == UNIT_BUDGET_EXPIRED and e.time == 15.0 for e in out.trace)


def test_pending_downtime_mode():
    plans = [ServerPlan.of("s", [("a", 5.0, 1, 60.0), ("b", 5.0, 0, 7.0)])]
    with_pending = simulate_unit(plans, UnitConfig(0.5, 50.0, 100.0, downtime_includes_pending=True))
    without = simulate_unit(plans, UnitConfig(0.5, 50.0, 100.0, downtime_includes_pending=False))
    assert with_pending.downtime_seconds == pytest.approx(17.0)
    assert without.downtime_seconds == pytest.approx(10.0)
    assert without.carried_ids == ["b"] and with_pending.carried_ids == []


def test_invalid_config_and_input():
    with pytest.raises(ValueError):
        UnitConfig(0.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        UnitConfig(0.5, 2.0, 1.0)
    with pytest.raises(ValueError, match="empty input"):
        simulate_unit([], ONE_SERVER)
    with pytest.raises(ValueError):
        PlannedJob("x", 0.0, 0, 1.0)


@settings(max_examples=300)
@given(st.integers(0, 2**32 - 1), st.booleans())
def test_random_units_satisfy_invariants(seed, oracle):
    plans, config = random_instance(np.random.default_rng(seed), oracle)
    if not plans:
        return
    out = simulate_unit(plans, config)
    assert check_unit(plans, config, out) == []
    again = simulate_unit(plans, config)
    assert again.trace == out.trace
    if oracle:
        assert out.offline_servers == []


def test_escalation():
    assert escalate_priorities([], {"a": 0}) == {"a": 0}
    once = escalate_priorities(["a"], {"a": 0, "b": 0})
    assert escalate_priorities(["a"], once) == {"a": 2, "b": 0}
    with pytest.raises(KeyError, match="unknown job"):
        escalate_priorities(["zz"], {"a": 0})


def test_escalated_job_outranks_fresh_one():
    # cycle 1: A (largest) goes first, B no longer fits; cycle 2: escalated B beats fresh bigger C
    first = [ServerPlan.of("s", [("A", 30.0, 0, 30.0), ("B", 25.0, 0, 25.0)])]
    camp = simulate_cycles([first], UnitConfig(0.5, 40.0, 40.0), None, 1)
    assert camp.remaining == ["B"]
    pr = camp.priorities
    pending = [("B", 25.0, pr["B"]), ("C", 35.0, 0)]
    assert select_next_job(pending, 40.0) == "B"


def test_one_cycle_equals_unit_simulation():
    units = [table1_plan((11, 21, 22)), [ServerPlan.of("t", [("D", 5.0, 0, 5.0)])]]
    camp = simulate_cycles(units, ONE_SERVER, None, 1)
    direct = [simulate_unit(u, ONE_SERVER) for u in units]
    assert [c.trace for c in camp.cycles[0]] == [d.trace for d in direct]


def test_three_cycles_overpredictor():
    preds = {"A": 11.0, "B": 21.0, "C": 22.0}
    camp = simulate_cycles([table1_plan((11, 21, 22))], ONE_SERVER, lambda ids: {i: preds[i] for i in ids}, 3)
    assert [sum(u.completed_jobs_total for u in c) for c in camp.cycles] == [2, 1, 0]
    assert camp.cycles[2] == [] and camp.remaining == []
    assert camp.priorities["A"] == 1


def test_oracle_reaches_fixpoint():
    rng = np.random.default_rng(0)
    units = []
    for u in range(4):
        units.append([ServerPlan.of(f"u{u}s{s}", [(f"u{u}s{s}j{k}", d, 0, d) for k, d in
                                                  enumerate(rng.uniform(1, 10, 6))]) for s in range(5)])
    total = sum(len(p.jobs) for u in units for p in u)
    camp = simulate_cycles(units, UnitConfig(0.2, 12.0, 24.0), None, total)
    assert camp.remaining == [] and camp.offline_servers == 0
    assert camp.completed_jobs_total == total


def test_cycle_errors_name_the_unit():
    with pytest.raises(ValueError, match="n_cycles"):
        simulate_cycles([table1_plan((1, 1, 1))], ONE_SERVER, None, 0)
    dup = [[ServerPlan.of("s", [("a", 1.0, 0, 1.0)]), ServerPlan.of("s", [("b", 1.0, 0, 1.0)])]]
    with pytest.raises(ValueError, match="unit 0"):
        simulate_cycles(dup, ONE_SERVER, None, 1)


def test_trace_export(tmp_path):
    out = simulate_unit(table1_plan((9, 19, 20)), ONE_SERVER)
    path = tmp_path / "t.jsonl"
    write_trace(out.trace, path)
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    assert len(rows) == len(out.trace)
    assert all(set(r) == {"time", "kind", "server_id", "job_id"} for r in rows)
    assert Event(**rows[1]) == out.trace[1]
