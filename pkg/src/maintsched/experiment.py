"""End-to-end experiment pipeline: workload, split, training, simulation, reports."""

from __future__ import annotations

import math
import os
import tempfile
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import yaml

from .domain import ConfigError, Dataset, DatasetSplit, read_csv, split_by_time
from .gbt import Hyperparams
from .metrics import ComparisonReport, MetricsReport, mape, opr
from .predictor import (
    DEFAULT_HP_GRID, DEFAULT_QUANTILES, Method, PredictorSet, QuantileGrid, Slo,
    predict_durations, train_predictor_set,
)
from .scheduler import CampaignOutcome, PlannedJob, ServerPlan, UnitConfig, simulate_cycles, simulate_unit
from .workload import WorkloadSpec, generate, size_tau, unit_of


@dataclass(frozen=True)
class ExperimentConfig:
    workload: WorkloadSpec = WorkloadSpec()
    dataset_path: str | None = None
    beta: float = 0.2
    tau: float | None = None  # None: sized from the training history
    T: float | None = None  # None: tau * ceil(1 / beta)
    jobs_per_visit: float = 1.57
    downtime_includes_pending: bool = True
    methods: tuple[Method, ...] = (Method.ACELA, Method.GBT_MSE, Method.LR)
    quantiles: tuple[float, ...] = DEFAULT_QUANTILES
    slo: Slo = Slo()
    hp_grid: tuple[Hyperparams, ...] = DEFAULT_HP_GRID
    n_cycles: int = 3
    test_window_days: float = 7.0
    validation_fraction: float = 0.1
    seed: int = 0
    out: str = "out"
    oracle: bool = False

    def __post_init__(self):
        methods = tuple(Method(m) for m in self.methods)
        object.__setattr__(self, "methods", methods)
        if not methods:
            raise ConfigError("invalid config: methods must be non-empty")
        if self.n_cycles < 1:
            raise ConfigError("invalid config: n_cycles must be >= 1")
        if not 0 < self.beta < 1:
            raise ConfigError("invalid config: beta must be in (0, 1)")
        if self.dataset_path is not None and not Path(self.dataset_path).is_file():
            raise ConfigError(f"invalid config: dataset not found: {self.dataset_path}")
        try:
            QuantileGrid(tuple(self.quantiles))
        except ValueError as e:
            raise ConfigError(f"invalid config: {e}") from None

    @property
    def reference(self) -> Method:
        return Method.ACELA if Method.ACELA in self.methods else self.methods[0]


_WORKLOAD_KEYS = {f.name for f in fields(WorkloadSpec)} - {"profiles"}
_SCALAR_KEYS = {
    "dataset_path", "beta", "tau", "T", "jobs_per_visit", "downtime_includes_pending", "n_cycles",
    "test_window_days", "validation_fraction", "seed", "out", "oracle",
}


def config_from_mapping(doc: Mapping[str, Any] | None, overrides: Mapping[str, Any] | None = None) -> ExperimentConfig:
    """Build a config from a parsed document; non-``None`` overrides win.

    Recognised top-level keys: the scalar fields of :class:`ExperimentConfig`,
    ``methods``, ``quantiles``, ``slo`` (a number), ``hp_grid`` (list of
    mappings), ``workload`` (mapping of :class:`WorkloadSpec` fields) and
    ``unit`` (mapping with ``beta``, ``tau``, ``T``).
    """
    doc = dict(doc or {})
    flat = dict(doc.pop("unit", None) or {})
    flat.update(doc)
    for k, v in (overrides or {}).items():
        if v is not None:
            flat[k] = v
    wl = dict(flat.pop("workload", None) or {})
    for key in ("n_jobs", "n_servers", "n_days"):
        if key in flat:
            wl[key] = flat.pop(key)
    kwargs: dict[str, Any] = {}
    try:
        unknown = set(wl) - _WORKLOAD_KEYS
        if unknown:
            raise ConfigError(f"invalid spec: unknown workload keys {sorted(unknown)}")
        if "seed" in flat:
            wl["seed"] = flat["seed"]
        kwargs["workload"] = WorkloadSpec(**wl)
        for key in list(flat):
            if key in _SCALAR_KEYS:
                kwargs[key] = flat.pop(key)
        if "methods" in flat:
            m = flat.pop("methods")
            kwargs["methods"] = tuple(m.split(",") if isinstance(m, str) else m)
        if "quantiles" in flat:
            q = flat.pop("quantiles")
            kwargs["quantiles"] = tuple(float(x) for x in (q.split(",") if isinstance(q, str) else q))
        if "slo" in flat:
            kwargs["slo"] = Slo(float(flat.pop("slo")))
        if "hp_grid" in flat:
            kwargs["hp_grid"] = tuple(Hyperparams(**h) for h in flat.pop("hp_grid"))
        if flat:
            raise ConfigError(f"invalid config: unknown keys {sorted(flat)}")
        return ExperimentConfig(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid config: {e}") from None


def load_config(path: str | Path | None, overrides: Mapping[str, Any] | None = None) -> ExperimentConfig:
    doc = None
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"invalid config: file not found: {p}")
        try:
            doc = yaml.safe_load(p.read_text(encoding="utf-8"))
        except yaml.YAMLError as e:
            raise ConfigError(f"invalid config: {e}") from None
        if doc is not None and not isinstance(doc, dict):
            raise ConfigError("invalid config: top level must be a mapping")
    return config_from_mapping(doc, overrides)


def load_dataset(config: ExperimentConfig) -> Dataset:
    if config.dataset_path is not None:
        return read_csv(config.dataset_path)
    return generate(config.workload)


def build_units(test: Dataset) -> list[list[ServerPlan]]:
    """Group test jobs by unit prefix, then by server; predictions start as placeholders."""
    units: dict[str, dict[str, list[PlannedJob]]] = {}
    for r in test:
        servers = units.setdefault(unit_of(r.server_id), {})
        servers.setdefault(r.server_id, []).append(
            PlannedJob(r.job_id, r.true_duration, r.priority, r.true_duration))
    return [
        [ServerPlan(sid, tuple(jobs)) for sid, jobs in sorted(servers.items())]
        for _, servers in sorted(units.items())
    ]


def unit_config(config: ExperimentConfig, history: Dataset) -> UnitConfig:
    tau = config.tau if config.tau is not None else size_tau(history, config.jobs_per_visit)
    T = config.T if config.T is not None else tau * math.ceil(1 / config.beta)
    try:
        return UnitConfig(config.beta, tau, T, config.downtime_includes_pending)
    except ValueError as e:
        raise ConfigError(f"invalid config: {e}") from None


@dataclass
class MethodRun:
    method: str
    predictions: dict[str, float]
    campaign: CampaignOutcome
    report: MetricsReport
    predictor: PredictorSet | None = None


@dataclass
class EvaluationResult:
    config: ExperimentConfig
    split: DatasetSplit
    unit_config: UnitConfig
    runs: list[MethodRun] = field(default_factory=list)
    comparison: ComparisonReport | None = None

    def run(self, method: Method | str) -> MethodRun:
        name = method.value if isinstance(method, Method) else method
        return next(r for r in self.runs if r.method == name)


def _campaign(units, ucfg, preds: Mapping[str, float], n_cycles: int) -> CampaignOutcome:
    return simulate_cycles(units, ucfg, lambda ids: {i: preds[i] for i in ids}, n_cycles)


def _report(method: str, test: Dataset, preds: Mapping[str, float], camp: CampaignOutcome) -> MetricsReport:
    y = [r.true_duration for r in test]
    p = [preds[r.job_id] for r in test]
    total = camp.completed_jobs_total
    return MetricsReport(
        method=method, mape=mape(y, p), opr=opr(y, p),
        offline_servers=camp.offline_servers, downtime_seconds=camp.downtime_seconds,
        jobs_completed_online=camp.completed_jobs_online, jobs_completed_total=total,
        jcr=None if total == 0 else 100.0 * camp.completed_jobs_online / total,
        servers_visited=camp.servers_visited, unfinished_jobs=camp.unfinished_jobs, n_test_jobs=len(test),
    )


def _positive(preds: Mapping[str, float]) -> dict[str, float]:
    # the scheduler needs strictly positive predictions; a floored 0 becomes tiny
    return {k: max(v, 1e-9) for k, v in preds.items()}


def run_evaluation(config: ExperimentConfig, dataset: Dataset | None = None, probe: bool = False) -> EvaluationResult:
    """Split, train every configured method, simulate ``n_cycles`` and compare.

    With ``probe`` the test set is scored for every tuning candidate (for
    sweeps); this is reporting only and never affects a choice.
    """
    data = dataset if dataset is not None else load_dataset(config)
    split = split_by_time(data, config.test_window_days, config.validation_fraction, config.seed)
    history = split.train.concat(split.validation)
    ucfg = unit_config(config, history)
    units = build_units(split.test)
    result = EvaluationResult(config, split, ucfg)
    grid = QuantileGrid(tuple(config.quantiles))

    for method in config.methods:
        pset = train_predictor_set(split, method, grid, config.slo, config.hp_grid,
                                   probe=split.test if probe else None, seed=config.seed,
                                   validation_fraction=config.validation_fraction)
        preds = _positive(predict_durations(pset, split.test))
        camp = _campaign(units, ucfg, preds, config.n_cycles)
        result.runs.append(MethodRun(method.value, preds, camp, _report(method.value, split.test, preds, camp), pset))
    if config.oracle:
        preds = {r.job_id: r.true_duration for r in split.test}
        camp = _campaign(units, ucfg, preds, config.n_cycles)
        result.runs.append(MethodRun("ORACLE", preds, camp, _report("ORACLE", split.test, preds, camp)))
    result.comparison = ComparisonReport.build([r.report for r in result.runs], config.reference.value)
    return result


@dataclass(frozen=True)
class SweepRow:
    firmware: str
    quantile: float
    test_mape: float
    test_opr: float
    val_mape: float
    val_opr: float
    chosen: bool


def sweep_rows(pset: PredictorSet) -> list[SweepRow]:
    """Per-firmware, per-quantile test scores at each firmware's chosen hyperparameters."""
    rows = []
    for fw, fm in pset.models.items():
        for c in pset.trace:
            if c.firmware != fw or c.hp != fm.hp or c.probe_mape is None:
                continue
            rows.append(SweepRow(fw.value, c.quantile, c.probe_mape, c.probe_opr, c.val_mape, c.val_opr,
                                 c.quantile == fm.quantile))
    return rows


def run_sweep(config: ExperimentConfig, dataset: Dataset | None = None) -> list[SweepRow]:
    data = dataset if dataset is not None else load_dataset(config)
    split = split_by_time(data, config.test_window_days, config.validation_fraction, config.seed)
    pset = train_predictor_set(split, Method.ACELA, QuantileGrid(tuple(config.quantiles)), config.slo,
                               config.hp_grid, probe=split.test, seed=config.seed,
                               validation_fraction=config.validation_fraction)
    return sweep_rows(pset)


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    lines = ["firmware,quantile,test_mape,test_opr,val_mape,val_opr,chosen"]
    for r in rows:
        lines.append(f"{r.firmware},{r.quantile!r},{r.test_mape!r},{r.test_opr!r},{r.val_mape!r},"
                     f"{r.val_opr!r},{int(r.chosen)}")
    return "\n".join(lines) + "\n"


def ensure_out_dir(path: str | Path) -> Path:
    """Create ``path`` if needed and check it is writable, else ``ConfigError``."""
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"unwritable output dir {p}: {e.strerror}") from None
    if not os.access(p, os.W_OK | os.X_OK):
        raise ConfigError(f"unwritable output dir {p}")
    return p


def default_file_mode() -> int:
    mask = os.umask(0)
    os.umask(mask)
    return 0o666 & ~mask


def atomic_write_text(path: str | Path, text: str) -> None:
    """Write via a temporary sibling file and rename over the target."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        os.chmod(tmp, default_file_mode())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def with_overrides(config: ExperimentConfig, **kw) -> ExperimentConfig:
    return replace(config, **kw)


REPLAY_TRUE = {"A": 10.0, "B": 20.0, "C": 21.0}
REPLAY_BUDGET = 50.0


@dataclass(frozen=True)
class ReplayRow:
    name: str
    predictions: tuple[float, float, float]
    scheduled: int
    completed: int
    server_online: bool
    carried: tuple[str, ...]
    expected_scheduled: int
    expected_completed: int
    expected_online: bool

    @property
    def passed(self) -> bool:
        return (self.scheduled, self.completed, self.server_online) == (
            self.expected_scheduled, self.expected_completed, self.expected_online)

    @property
    def status(self) -> str:
        return "Server online" if self.server_online else "Server offline"


def replay_table1() -> list[ReplayRow]:
    """One server, three jobs (10, 20, 21 s), 50 s budgets, under three prediction sets."""
    scenarios = (
        ("Underprediction", (9.0, 19.0, 20.0), 3, 2, False),
        ("Overprediction", (11.0, 21.0, 22.0), 2, 2, True),
        ("Ground truth", (10.0, 20.0, 21.0), 2, 2, True),
    )
    cfg = UnitConfig(beta=0.5, tau=REPLAY_BUDGET, T=REPLAY_BUDGET)
    rows = []
    for name, preds, exp_sched, exp_done, exp_online in scenarios:
        jobs = [(jid, p, 0, REPLAY_TRUE[jid]) for jid, p in zip(REPLAY_TRUE, preds)]
        out = simulate_unit([ServerPlan.of("server", jobs)], cfg)
        rows.append(ReplayRow(name, preds, out.scheduled_jobs, out.completed_jobs_total,
                              not out.offline_servers, tuple(out.carried_ids),
                              exp_sched, exp_done, exp_online))
    return rows
