"""Per-firmware duration predictors: SLO-tuned quantile GBT and the two baselines."""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import groupby
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .domain import Dataset, DatasetSplit, FirmwareType, JobRecord, random_split
from .features import FeatureSchema, build_schema, encode_matrix
from .gbt import BoostedModel, Hyperparams, LinearModel, Loss, fit, fit_linear, model_from_json
from .metrics import mape, opr

log = logging.getLogger(__name__)


class Method(str, enum.Enum):
    ACELA = "ACELA"
    GBT_MSE = "GBT_MSE"
    LR = "LR"


@dataclass(frozen=True)
class Slo:
    min_validation_opr: float = 0.95

    def __post_init__(self):
        if not 0 < self.min_validation_opr <= 1:
            raise ValueError("min_validation_opr must be in (0, 1]")


DEFAULT_QUANTILES = (0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95, 0.99)


@dataclass(frozen=True)
class QuantileGrid:
    quantiles: tuple[float, ...] = DEFAULT_QUANTILES

    def __post_init__(self):
        qs = tuple(float(q) for q in self.quantiles)
        object.__setattr__(self, "quantiles", qs)
        if not qs:
            raise ValueError("empty quantile grid")
        if any(not 0 < q < 1 for q in qs):
            raise ValueError("invalid quantile")
        if any(b <= a for a, b in zip(qs, qs[1:])):
            raise ValueError("quantile grid must be strictly increasing")


DEFAULT_HP_GRID: tuple[Hyperparams, ...] = tuple(
    Hyperparams(num_rounds=r, learning_rate=lr, max_depth=d, min_samples_leaf=20)
    for lr in (0.05, 0.1) for r in (100, 300) for d in (4, 6)
)


@dataclass(frozen=True)
class Candidate:
    """One (hyperparameters, quantile) setting scored on validation (and optionally a probe set)."""

    firmware: FirmwareType
    quantile: float | None
    hp: Hyperparams | None
    val_mape: float
    val_opr: float
    probe_mape: float | None = None
    probe_opr: float | None = None


def _hp_key(hp: Hyperparams | None) -> tuple:
    if hp is None:
        return (0, 0, 0.0)
    return (hp.num_rounds, hp.max_depth, hp.learning_rate)


def choose_candidate(candidates: Sequence[Candidate], slo: Slo) -> Candidate:
    """SLO-driven choice.

    Among candidates whose validation OPR meets the SLO, the lowest validation
    MAPE wins (ties: fewer rounds, then lower depth).  If none qualifies, the
    highest validation OPR wins (ties: higher quantile, then lower MAPE).
    """
    if not candidates:
        raise ValueError("no candidates")
    feasible = [c for c in candidates if c.val_opr >= slo.min_validation_opr]
    if feasible:
        return min(feasible, key=lambda c: (c.val_mape, _hp_key(c.hp), c.quantile or 0.0))
    return min(candidates, key=lambda c: (-c.val_opr, -(c.quantile or 0.0), c.val_mape, _hp_key(c.hp)))


def choose_quantile(quantiles: Sequence[float], oprs: Sequence[float], mapes: Sequence[float],
                    slo: Slo = Slo()) -> float:
    """The quantile-only form of :func:`choose_candidate`."""
    cands = [Candidate(FirmwareType.CPLD, q, None, m, o) for q, o, m in zip(quantiles, oprs, mapes)]
    return choose_candidate(cands, slo).quantile


@dataclass(frozen=True)
class FirmwareModel:
    firmware: FirmwareType
    model: BoostedModel | LinearModel
    schema: FeatureSchema
    quantile: float | None
    hp: Hyperparams | None
    val_mape: float | None = None
    val_opr: float | None = None

    def fingerprint(self) -> str:
        payload = json.dumps({"model": self.model.to_dict(), "schema": self.schema.version,
                              "quantile": self.quantile}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def predict_records(self, records: Sequence[JobRecord]) -> np.ndarray:
        return self.model.predict(encode_matrix(records, self.schema))


@dataclass(frozen=True)
class TrainingConfig:
    grid: QuantileGrid = QuantileGrid()
    slo: Slo = Slo()
    hp_grid: tuple[Hyperparams, ...] = DEFAULT_HP_GRID
    validation_fraction: float = 0.1
    seed: int = 0


@dataclass(frozen=True)
class PredictorSet:
    method: Method
    models: Mapping[FirmwareType, FirmwareModel]
    trained_through: float
    config: TrainingConfig = TrainingConfig()
    history: Dataset = field(default_factory=Dataset, repr=False)
    warnings: tuple[str, ...] = ()
    trace: tuple[Candidate, ...] = field(default=(), repr=False)

    @property
    def quantiles(self) -> dict[FirmwareType, float | None]:
        return {fw: m.quantile for fw, m in self.models.items()}


def _threads() -> int:
    env = os.environ.get("ACELA_SIM_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _parallel_map(fn: Callable, items: Sequence) -> list:
    n = min(_threads(), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def _arrays(records: Sequence[JobRecord], schema: FeatureSchema) -> tuple[np.ndarray, np.ndarray]:
    return encode_matrix(records, schema), np.array([r.true_duration for r in records], dtype=float)


def _require(train: Dataset, validation: Dataset, firmware: FirmwareType, need_validation: bool):
    tr = train.for_firmware(firmware)
    va = validation.for_firmware(firmware)
    if len(tr) == 0:
        raise ValueError(f"missing firmware data: no training records for {firmware.value}")
    if need_validation and len(va) == 0:
        raise ValueError(f"missing firmware data: no validation records for {firmware.value}")
    return tr, va


def _boosted_candidates(
    firmware: FirmwareType,
    X: np.ndarray, y: np.ndarray, Xv: np.ndarray, yv: np.ndarray,
    loss: Loss, hp_grid: Sequence[Hyperparams],
    probe: tuple[np.ndarray, np.ndarray] | None,
) -> list[tuple[Candidate, BoostedModel]]:
    """Score every hp setting; settings differing only in rounds share one fit."""
    out = []
    family = lambda hp: (hp.learning_rate, hp.max_depth, hp.min_samples_leaf, hp.seed)
    for _, members in groupby(sorted(hp_grid, key=family), key=family):
        members = list(members)
        longest = max(members, key=lambda h: h.num_rounds)
        model = fit(X, y, loss, longest)
        rounds = [h.num_rounds for h in members]
        staged = model.staged_predict(Xv, rounds)
        staged_probe = model.staged_predict(probe[0], rounds) if probe is not None and len(probe[1]) else None
        for hp in members:
            pv = staged[hp.num_rounds]
            pm = po = None
            if staged_probe is not None:
                pm = mape(probe[1], staged_probe[hp.num_rounds])
                po = opr(probe[1], staged_probe[hp.num_rounds])
            cand = Candidate(firmware, loss.q, hp, mape(yv, pv), opr(yv, pv), pm, po)
            out.append((cand, model.truncate(hp.num_rounds)))
    return out


def _train_firmware(
    method: Method, train: Dataset, validation: Dataset, firmware: FirmwareType,
    grid: QuantileGrid, slo: Slo, hp_grid: Sequence[Hyperparams], probe: Dataset | None,
) -> tuple[FirmwareModel, list[Candidate]]:
    tr, va = _require(train, validation, firmware, need_validation=method != Method.LR)
    schema = build_schema(tr)
    X, y = _arrays(tr.records, schema)
    pr = None
    if probe is not None:
        pr = _arrays(probe.for_firmware(firmware).records, schema)

    if method == Method.LR:
        model = fit_linear(X, y)
        vm = vo = None
        if len(va):
            Xv, yv = _arrays(va.records, schema)
            pv = model.predict(Xv)
            vm, vo = mape(yv, pv), opr(yv, pv)
        cand = Candidate(firmware, None, None, vm if vm is not None else float("nan"),
                         vo if vo is not None else float("nan"))
        if pr is not None and len(pr[1]):
            pp = model.predict(pr[0])
            cand = Candidate(firmware, None, None, cand.val_mape, cand.val_opr, mape(pr[1], pp), opr(pr[1], pp))
        return FirmwareModel(firmware, model, schema, None, None, vm, vo), [cand]

    Xv, yv = _arrays(va.records, schema)
    if method == Method.GBT_MSE:
        scored = _boosted_candidates(firmware, X, y, Xv, yv, Loss.squared_error(), hp_grid, pr)
        best = min(scored, key=lambda cm: (cm[0].val_mape, _hp_key(cm[0].hp)))
    else:
        scored = []
        for q in grid.quantiles:
            scored.extend(_boosted_candidates(firmware, X, y, Xv, yv, Loss.pinball(q), hp_grid, pr))
        chosen = choose_candidate([c for c, _ in scored], slo)
        best = next(cm for cm in scored if cm[0] is chosen)
    cand, model = best
    fm = FirmwareModel(firmware, model, schema, cand.quantile, cand.hp, cand.val_mape, cand.val_opr)
    return fm, [c for c, _ in scored]


def tune_quantile(train: Dataset, validation: Dataset, firmware: FirmwareType, grid: QuantileGrid,
                  slo: Slo, hp: Hyperparams) -> tuple[float, BoostedModel]:
    """Grid-search the pinball quantile for one firmware under fixed hyperparameters."""
    fm, _ = _train_firmware(Method.ACELA, train, validation, firmware, grid, slo, [hp], None)
    return fm.quantile, fm.model


def train_predictor_set(
    split: DatasetSplit,
    method: Method | str = Method.ACELA,
    grid: QuantileGrid = QuantileGrid(),
    slo: Slo = Slo(),
    hp_grid: Sequence[Hyperparams] = DEFAULT_HP_GRID,
    probe: Dataset | None = None,
    seed: int = 0,
    validation_fraction: float = 0.1,
) -> PredictorSet:
    """Train one model per firmware present in ``split.train``.

    Firmware that cannot be trained (too few rows, no validation rows) is
    skipped and named in ``warnings``.  ``probe`` (usually the test set) only
    adds extra columns to the tuning trace; it never influences a choice.
    """
    method = Method(method)
    hp_grid = tuple(hp_grid)
    firmware = split.train.firmware_present()

    def work(fw):
        try:
            return _train_firmware(method, split.train, split.validation, fw, grid, slo, hp_grid, probe)
        except ValueError as e:
            return e

    results = _parallel_map(work, firmware)
    models, warnings, trace = {}, [], []
    for fw, res in zip(firmware, results):
        if isinstance(res, Exception):
            msg = f"{fw.value}: {res}"
            log.warning("skipping firmware %s", msg)
            warnings.append(msg)
            continue
        models[fw], cands = res
        trace.extend(cands)
    history = split.train.concat(split.validation)
    trained_through = history.max_visit_time() if len(history) else 0.0
    config = TrainingConfig(grid, slo, hp_grid, validation_fraction, seed)
    return PredictorSet(method, models, trained_through, config, history, tuple(warnings), tuple(trace))


def predict_durations(pset: PredictorSet, jobs: Iterable[JobRecord],
                      schema: FeatureSchema | None = None) -> dict[str, float]:
    """Predicted seconds per job id.

    Each firmware model encodes with its own schema.  Passing ``schema`` only
    asserts that it matches the schema stored with the model.
    """
    jobs = list(jobs)
    by_fw: dict[FirmwareType, list[JobRecord]] = {}
    for r in jobs:
        by_fw.setdefault(r.firmware, []).append(r)
    out: dict[str, float] = {}
    for fw, recs in by_fw.items():
        fm = pset.models.get(fw)
        if fm is None:
            raise ValueError(f"missing firmware data: no model for {fw.value}")
        if schema is not None and schema.version != fm.schema.version:
            raise ValueError(f"schema mismatch for {fw.value}")
        for r, p in zip(recs, fm.predict_records(recs)):
            out[r.job_id] = float(p)
    return {r.job_id: out[r.job_id] for r in jobs}


def retrain(pset: PredictorSet, new_data: Dataset, period_days: float = 7.0) -> PredictorSet:
    """Retrain on all history once ``new_data`` reaches ``period_days`` past ``trained_through``.

    Returns ``pset`` itself when the period has not elapsed; the input set is never modified.
    """
    if period_days <= 0:
        raise ValueError("period_days must be positive")
    if len(new_data) == 0:
        return pset
    if new_data.records[0].visit_time <= pset.trained_through:
        raise ValueError("stale data")
    if new_data.max_visit_time() - pset.trained_through < period_days:
        return pset
    combined = pset.history.concat(new_data)
    cfg = pset.config
    train, validation = random_split(combined, cfg.validation_fraction, cfg.seed)
    split = DatasetSplit(train, validation, Dataset())
    return train_predictor_set(split, pset.method, cfg.grid, cfg.slo, cfg.hp_grid,
                               seed=cfg.seed, validation_fraction=cfg.validation_fraction)


def save_predictor_set(pset: PredictorSet, directory: str | Path) -> None:
    """Write ``manifest.json`` plus one ``<FIRMWARE>.json`` per model."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = {}
    for fw, fm in pset.models.items():
        name = f"{fw.value}.json"
        doc = {"model": fm.model.to_dict(), "schema": fm.schema.to_dict(), "quantile": fm.quantile,
               "hp": None if fm.hp is None else fm.hp.__dict__, "val_mape": fm.val_mape, "val_opr": fm.val_opr}
        (d / name).write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")
        files[fw.value] = name
    manifest = {
        "method": pset.method.value,
        "trained_through": pset.trained_through,
        "quantiles": {fw.value: fm.quantile for fw, fm in pset.models.items()},
        "schema_fingerprints": {fw.value: fm.schema.version for fw, fm in pset.models.items()},
        "files": files,
        "warnings": list(pset.warnings),
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")


def load_predictor_set(directory: str | Path) -> PredictorSet:
    """Inverse of :func:`save_predictor_set` (training history is not persisted)."""
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
    models = {}
    for fw_name, fname in manifest["files"].items():
        doc = json.loads((d / fname).read_text(encoding="utf-8"))
        schema = FeatureSchema.from_dict(doc["schema"])
        if schema.version != manifest["schema_fingerprints"][fw_name]:
            raise ValueError(f"schema fingerprint mismatch for {fw_name}")
        fw = FirmwareType(fw_name)
        models[fw] = FirmwareModel(
            fw, model_from_json(json.dumps(doc["model"])), schema, doc["quantile"],
            None if doc["hp"] is None else Hyperparams(**doc["hp"]), doc["val_mape"], doc["val_opr"],
        )
    return PredictorSet(Method(manifest["method"]), models, float(manifest["trained_through"]),
                        warnings=tuple(manifest.get("warnings", ())))
