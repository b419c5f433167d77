"""Event-driven simulation of per-unit maintenance scheduling.

At most ``max(1, floor(beta * M))`` servers of a unit are under maintenance at
once.  A launched server repeatedly picks its next job by predicted duration
and priority.  A job may start only if its prediction fits every budget:

* the per-server budget left after the true time already spent,
* the per-server budget left after the predictions already committed,
* the unit budget left on the clock.

A server whose running job would still be busy at ``tau`` is taken offline at
exactly ``tau``.  Otherwise it returns to production as soon as nothing else
fits.  New servers launch into freed slots until the unit clock reaches ``T``.
"""

from __future__ import annotations

import heapq
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

log = logging.getLogger(__name__)

SERVER_LAUNCHED = "ServerLaunched"
JOB_STARTED = "JobStarted"
JOB_FINISHED = "JobFinished"
SERVER_RETURNED = "ServerReturned"
SERVER_OFFLINE = "ServerOffline"
UNIT_BUDGET_EXPIRED = "UnitBudgetExpired"
CAP_FLOORED = "CapFloored"


@dataclass(frozen=True)
class PlannedJob:
    job_id: str
    predicted: float
    priority: int
    true_duration: float

    def __post_init__(self):
        if not (self.predicted > 0 and self.true_duration > 0):
            raise ValueError(f"job {self.job_id}: predicted and true durations must be positive")


@dataclass(frozen=True)
class ServerPlan:
    server_id: str
    jobs: tuple[PlannedJob, ...]

    @classmethod
    def of(cls, server_id: str, jobs: Iterable[tuple]) -> "ServerPlan":
        """Build from ``(job_id, predicted, priority, true)`` tuples."""
        return cls(server_id, tuple(j if isinstance(j, PlannedJob) else PlannedJob(*j) for j in jobs))


@dataclass(frozen=True)
class UnitConfig:
    beta: float
    tau: float
    T: float
    downtime_includes_pending: bool = True

    def __post_init__(self):
        if not 0 < self.beta < 1:
            raise ValueError("beta must be in (0, 1)")
        if not 0 < self.tau <= self.T:
            raise ValueError("need 0 < tau <= T")


@dataclass(frozen=True)
class Event:
    time: float
    kind: str
    server_id: str
    job_id: str | None = None

    def to_json(self) -> str:
        return json.dumps({"time": self.time, "kind": self.kind, "server_id": self.server_id,
                           "job_id": self.job_id})


@dataclass
class UnitOutcome:
    completed_jobs_online: int = 0
    completed_jobs_total: int = 0
    offline_servers: list[str] = field(default_factory=list)
    returned_servers: list[str] = field(default_factory=list)
    never_launched: list[str] = field(default_factory=list)
    downtime_seconds: float = 0.0
    unfinished_jobs: int = 0
    unscheduled_jobs: int = 0
    scheduled_jobs: int = 0
    total_jobs: int = 0
    concurrency_cap: int = 1
    completed_ids: list[str] = field(default_factory=list)
    # jobs left over for a later cycle: never started on a returned or unlaunched
    # server, plus (only when downtime excludes them) never started on an offline one
    carried_ids: list[str] = field(default_factory=list)
    trace: list[Event] = field(default_factory=list)


def select_next_job(pending: Sequence[tuple], remaining_budget: float) -> str | None:
    """Highest priority among jobs whose prediction fits, then largest prediction, then lowest id.

    ``pending`` holds ``(job_id, predicted, priority)`` tuples.
    """
    if remaining_budget < 0:
        raise ValueError("remaining_budget must be non-negative")
    return _select(pending, lambda d: d <= remaining_budget)


def _select(pending, fits: Callable[[float], bool]) -> str | None:
    best = None
    for job_id, predicted, priority, *_ in pending:
        if not fits(predicted):
            continue
        key = (-priority, -predicted, job_id)
        if best is None or key < best[0]:
            best = (key, job_id)
    return None if best is None else best[1]


class _Server:
    __slots__ = ("plan", "launch", "elapsed", "committed", "pending", "current", "done")

    def __init__(self, plan: ServerPlan, launch: float):
        self.plan = plan
        self.launch = launch
        self.elapsed = 0.0
        self.committed = 0.0
        self.pending = {j.job_id: j for j in plan.jobs}
        self.current: PlannedJob | None = None
        self.done: list[str] = []


def simulate_unit(plans: Sequence[ServerPlan], config: UnitConfig) -> UnitOutcome:
    if not plans:
        raise ValueError("empty input")
    ids = [p.server_id for p in plans]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate server_id in unit")
    M = len(plans)
    tau, T = config.tau, config.T
    m = math.floor(config.beta * M)
    out = UnitOutcome(total_jobs=sum(len(p.jobs) for p in plans))
    trace = out.trace
    if m < 1:
        m = 1
        trace.append(Event(0.0, CAP_FLOORED, ""))
        log.debug("floor(beta*M) is 0 for M=%d; concurrency cap raised to 1", M)
    out.concurrency_cap = m

    queue = list(plans)[::-1]  # pop() yields plans in input order
    heap: list[tuple[float, int, str, _Server | None]] = []
    seq = 0
    active = 0

    def push(t, kind, server):
        nonlocal seq
        heapq.heappush(heap, (t, seq, kind, server))
        seq += 1

    def try_start(s: _Server, t: float) -> bool:
        def fits(d):
            return s.elapsed + d <= tau and s.committed + d <= tau and t + d <= T

        pick = _select([(j.job_id, j.predicted, j.priority) for j in s.pending.values()], fits)
        if pick is None:
            return False
        job = s.pending.pop(pick)
        s.current = job
        s.committed += job.predicted
        out.scheduled_jobs += 1
        trace.append(Event(t, JOB_STARTED, s.plan.server_id, job.job_id))
        end = s.elapsed + job.true_duration
        if end > tau:
            push(s.launch + tau, "offline", s)
        else:
            push(s.launch + end, "finish", s)
        return True

    def release(s: _Server, t: float, kind: str):
        nonlocal active
        active -= 1
        if kind == SERVER_RETURNED:
            out.returned_servers.append(s.plan.server_id)
            out.completed_jobs_online += len(s.done)
            out.unscheduled_jobs += len(s.pending)
            out.carried_ids.extend(s.pending)
        else:
            out.offline_servers.append(s.plan.server_id)
            job = s.current
            out.downtime_seconds += s.elapsed + job.true_duration - tau
            out.unfinished_jobs += 1 + len(s.pending)
            if config.downtime_includes_pending:
                out.downtime_seconds += sum(j.true_duration for j in s.pending.values())
            else:
                out.carried_ids.extend(s.pending)
        out.completed_jobs_total += len(s.done)
        out.completed_ids.extend(s.done)
        trace.append(Event(t, kind, s.plan.server_id))
        fill(t)

    def launch(t: float):
        nonlocal active
        s = _Server(queue.pop(), t)
        active += 1
        trace.append(Event(t, SERVER_LAUNCHED, s.plan.server_id))
        if not try_start(s, t):
            release(s, t, SERVER_RETURNED)

    def fill(t: float):
        while active < m and queue and t < T:
            launch(t)

    push(T, "budget", None)
    fill(0.0)
    while heap:
        t, _, kind, s = heapq.heappop(heap)
        if kind == "budget":
            if queue or active:
                trace.append(Event(t, UNIT_BUDGET_EXPIRED, ""))
            continue
        if kind == "finish":
            job = s.current
            s.elapsed += job.true_duration
            s.done.append(job.job_id)
            s.current = None
            trace.append(Event(t, JOB_FINISHED, s.plan.server_id, job.job_id))
            if not try_start(s, t):
                release(s, t, SERVER_RETURNED)
        else:  # offline at the tau boundary
            release(s, t, SERVER_OFFLINE)

    for plan in reversed(queue):
        out.never_launched.append(plan.server_id)
        out.unscheduled_jobs += len(plan.jobs)
        out.carried_ids.extend(j.job_id for j in plan.jobs)
    return out


def escalate_priorities(unscheduled: Iterable[str], priorities: Mapping[str, int]) -> dict[str, int]:
    """Return a copy of ``priorities`` with every listed job bumped by one."""
    out = dict(priorities)
    for job_id in unscheduled:
        if job_id not in out:
            raise KeyError(f"unknown job: {job_id}")
        out[job_id] += 1
    return out


@dataclass
class CampaignOutcome:
    cycles: list[list[UnitOutcome]]
    remaining: list[str]
    priorities: dict[str, int]

    def unit_outcomes(self) -> list[UnitOutcome]:
        return [u for cycle in self.cycles for u in cycle]

    @property
    def offline_servers(self) -> int:
        return sum(len(u.offline_servers) for u in self.unit_outcomes())

    @property
    def downtime_seconds(self) -> float:
        return sum(u.downtime_seconds for u in self.unit_outcomes())

    @property
    def completed_jobs_online(self) -> int:
        return sum(u.completed_jobs_online for u in self.unit_outcomes())

    @property
    def completed_jobs_total(self) -> int:
        return sum(u.completed_jobs_total for u in self.unit_outcomes())

    @property
    def unfinished_jobs(self) -> int:
        return sum(u.unfinished_jobs for u in self.unit_outcomes())

    @property
    def servers_visited(self) -> int:
        return sum(len(u.offline_servers) + len(u.returned_servers) for u in self.unit_outcomes())


def simulate_cycles(
    units: Sequence[Sequence[ServerPlan]],
    config: UnitConfig,
    predictor: Callable[[list[str]], Mapping[str, float]] | None,
    n_cycles: int,
) -> CampaignOutcome:
    """Run ``n_cycles`` maintenance cycles over the same units.

    Each cycle asks ``predictor`` for fresh predictions of the jobs still
    outstanding (``None`` keeps the plans' predictions), simulates every unit,
    and carries leftover jobs into the next cycle with priority raised by one.
    Jobs on servers taken offline are finished during the downtime; when the
    downtime does not count never-started jobs those are carried instead.
    """
    if n_cycles < 1:
        raise ValueError("n_cycles must be >= 1")
    jobs = {j.job_id: j for unit in units for plan in unit for j in plan.jobs}
    if len(jobs) != sum(len(plan.jobs) for unit in units for plan in unit):
        raise ValueError("duplicate job_id across plans")
    priorities = {k: j.priority for k, j in jobs.items()}
    remaining = set(jobs)
    cycles: list[list[UnitOutcome]] = []
    for _ in range(n_cycles):
        if predictor is not None and remaining:
            preds = predictor(sorted(remaining))
        else:
            preds = {}
        outcomes = []
        carried: list[str] = []
        for u_idx, unit in enumerate(units):
            plans = []
            for plan in unit:
                left = [
                    PlannedJob(j.job_id, preds.get(j.job_id, j.predicted), priorities[j.job_id], j.true_duration)
                    for j in plan.jobs if j.job_id in remaining
                ]
                if left:
                    plans.append(ServerPlan(plan.server_id, tuple(left)))
            if not plans:
                continue
            try:
                outcome = simulate_unit(plans, config)
            except ValueError as e:
                raise ValueError(f"unit {u_idx}: {e}") from e
            outcomes.append(outcome)
            carried.extend(outcome.carried_ids)
        cycles.append(outcomes)
        remaining = set(carried)
        priorities = escalate_priorities(carried, priorities)
    return CampaignOutcome(cycles, sorted(remaining), priorities)


def write_trace(events: Iterable[Event], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for e in events:
            f.write(e.to_json() + "\n")
