import math
from dataclasses import replace

import numpy as np
import pytest

from maintsched.domain import Dataset, DatasetSplit, FirmwareType, random_split, split_by_time
from maintsched.features import UNSEEN, build_schema, encode
from maintsched.gbt import Hyperparams
from maintsched.predictor import (
    Candidate, Method, QuantileGrid, Slo, choose_candidate, choose_quantile, load_predictor_set,
    predict_durations, retrain, save_predictor_set, train_predictor_set, tune_quantile,
)
from conftest import make_record

FAST_HP = (Hyperparams(num_rounds=20, learning_rate=0.2, max_depth=3, min_samples_leaf=5),)
GRID = QuantileGrid((0.6, 0.8, 0.95))


def fast_train(split, method=Method.ACELA, **kw):
    return train_predictor_set(split, method, GRID, Slo(), FAST_HP, **kw)


@pytest.fixture(scope="module")
def split(small_workload):
    return split_by_time(small_workload, 7.0, 0.1, seed=0)


@pytest.fixture(scope="module")
def acela(split):
    return fast_train(split)


def test_choose_quantile_feasible():
    assert choose_quantile([.6, .7, .8, .9, .99], [.80, .90, .96, .97, .99], [5, 8, 12, 14, 30]) == 0.8


def test_choose_quantile_fallback():
    assert choose_quantile([.6, .7, .8], [.5, .6, .7], [1, 2, 3]) == 0.8
    # equal best OPR goes to the higher quantile
    assert choose_quantile([.6, .7, .8], [.7, .7, .5], [1, 2, 3]) == 0.7


def test_hyperparameter_ties_prefer_smaller_models():
    big = Hyperparams(num_rounds=300, max_depth=4)
    small_deep = Hyperparams(num_rounds=100, max_depth=6)
    small = Hyperparams(num_rounds=100, max_depth=4)
    cands = [Candidate(FirmwareType.BIC, 0.9, hp, 10.0, 0.99) for hp in (big, small_deep, small)]
    assert choose_candidate(cands, Slo()).hp == small


def test_degenerate_single_validation_record():
    durations = [100.0 + 10 * i for i in range(40)]
    train = Dataset(make_record(f"t{i}", duration=d, day=i / 10) for i, d in enumerate(durations))
    val = Dataset([make_record("v", duration=50.0, day=5.0)])
    hp = Hyperparams(num_rounds=1, learning_rate=1.0, max_depth=2, min_samples_leaf=5)
    grid = QuantileGrid((0.6, 0.7, 0.8, 0.9, 0.99))
    # identical features, so every quantile model predicts the training order statistic
    s = sorted(durations)
    preds = {q: s[math.ceil(q * len(s) - 1e-9) - 1] for q in grid.quantiles}
    assert all(p > 50.0 for p in preds.values())
    mapes = {q: abs(p - 50.0) / 50.0 for q, p in preds.items()}
    q, model = tune_quantile(train, val, FirmwareType.BIOS, grid, Slo(), hp)
    assert q == min(mapes, key=mapes.get) == 0.6
    X = np.array([encode(val[0], _schema_of(train)).values])
    assert model.predict(X)[0] == pytest.approx(preds[0.6])


def _schema_of(train):
    return build_schema(train)


def test_missing_firmware_in_tuning():
    train = Dataset([make_record(f"t{i}", day=i) for i in range(30)])
    with pytest.raises(ValueError, match="missing firmware data"):
        tune_quantile(train, train, FirmwareType.NIC, GRID, Slo(), FAST_HP[0])


def test_single_firmware_set(split):
    only = DatasetSplit(split.train.for_firmware(FirmwareType.BIOS),
                        split.validation.for_firmware(FirmwareType.BIOS), split.test)
    pset = fast_train(only)
    assert list(pset.models) == [FirmwareType.BIOS]


def test_lr_has_no_quantile(split):
    pset = fast_train(split, Method.LR)
    assert pset.models and all(q is None for q in pset.quantiles.values())
    assert all(type(m.model).__name__ == "LinearModel" for m in pset.models.values())


def test_acela_quantiles_in_grid(acela, split):
    assert not acela.warnings and set(acela.models) == set(split.train.firmware_present())
    assert all(q in GRID.quantiles for q in acela.quantiles.values())


def test_gbt_mse_picks_lowest_validation_mape(split):
    hps = FAST_HP + (Hyperparams(num_rounds=10, learning_rate=0.1, max_depth=2, min_samples_leaf=5),)
    pset = train_predictor_set(split, Method.GBT_MSE, GRID, Slo(), hps)
    for fw, fm in pset.models.items():
        cands = [c for c in pset.trace if c.firmware == fw]
        assert len(cands) == 2 and fm.quantile is None
        assert fm.val_mape == min(c.val_mape for c in cands)


def test_slo_dominance_from_trace(acela):
    slo = acela.config.slo.min_validation_opr
    for fw, fm in acela.models.items():
        cands = [c for c in acela.trace if c.firmware == fw]
        chosen = next(c for c in cands if c.quantile == fm.quantile and c.hp == fm.hp)
        for c in cands:
            if c.val_mape < chosen.val_mape:
                assert c.val_opr < slo
                assert chosen.val_opr >= c.val_opr
        if chosen.val_opr < slo:
            assert chosen.val_opr == max(c.val_opr for c in cands)


def test_predict_durations(acela, split):
    assert predict_durations(acela, []) == {}
    preds = predict_durations(acela, split.test)
    assert list(preds) == split.test.job_ids()
    assert all(np.isfinite(v) and v >= 0 for v in preds.values())


def test_unseen_tokens_still_predict(acela, split):
    r = next(r for r in split.test if r.firmware == FirmwareType.CPLD)
    odd = replace(r, job_id="odd", hardware=replace(r.hardware, server_type="never", region="mars"),
                  target_version="v999")
    schema = acela.models[FirmwareType.CPLD].schema
    assert encode(odd, schema).values[-1] == UNSEEN
    twin = replace(odd, job_id="odd2")
    p = predict_durations(acela, [odd, twin])
    assert np.isfinite(p["odd"]) and p["odd"] == p["odd2"]


def test_missing_model_is_named(acela):
    partial = replace(acela, models={k: v for k, v in acela.models.items() if k != FirmwareType.NIC})
    with pytest.raises(ValueError, match="missing firmware data.*NIC"):
        predict_durations(partial, [make_record(firmware=FirmwareType.NIC)])


def test_per_firmware_isolation(split, acela):
    drop = FirmwareType.BIOS
    keep = lambda d: Dataset(r for r in d if r.firmware != drop)
    pruned = fast_train(DatasetSplit(keep(split.train), keep(split.validation), split.test))
    assert drop not in pruned.models
    for fw, fm in pruned.models.items():
        assert fm.fingerprint() == acela.models[fw].fingerprint()


def _history_split(data, cut):
    old = Dataset(r for r in data if r.visit_time < cut)
    tr, va = random_split(old, 0.1, 0)
    return DatasetSplit(tr, va, Dataset())


def test_retrain_weekly(small_workload):
    pset = fast_train(_history_split(small_workload, 28.0))
    week = Dataset(r for r in small_workload if r.visit_time > pset.trained_through)
    assert week.max_visit_time() - pset.trained_through >= 7
    probe = list(small_workload)[:50]
    before = predict_durations(pset, probe)
    new = retrain(pset, week, period_days=7)
    assert new is not pset
    assert new.trained_through == week.max_visit_time() > pset.trained_through
    assert predict_durations(pset, probe) == before  # old set intact
    predict_durations(new, new.history)  # own training rows


def test_retrain_below_period_and_stale(small_workload):
    pset = fast_train(_history_split(small_workload, 28.0))
    short = Dataset(r for r in small_workload if pset.trained_through < r.visit_time <= pset.trained_through + 3)
    assert retrain(pset, short, period_days=7) is pset
    stale = Dataset(r for r in small_workload if r.visit_time > 20)
    with pytest.raises(ValueError, match="stale data"):
        retrain(pset, stale)


def test_save_load_round_trip(acela, split, tmp_path):
    save_predictor_set(acela, tmp_path / "p")
    back = load_predictor_set(tmp_path / "p")
    assert back.method == acela.method and back.quantiles == acela.quantiles
    assert predict_durations(back, split.test) == predict_durations(acela, split.test)
    assert {fw: m.fingerprint() for fw, m in back.models.items()} == \
        {fw: m.fingerprint() for fw, m in acela.models.items()}


def test_grid_validation():
    for bad in ((), (0.5, 0.5), (0.0, 0.5), (0.9, 0.6)):
        with pytest.raises(ValueError):
            QuantileGrid(bad)
    with pytest.raises(ValueError):
        Slo(0.0)
