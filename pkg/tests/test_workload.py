import csv
import math
from dataclasses import replace

import numpy as np
import pytest

from maintsched.domain import ConfigError, Dataset, FirmwareType
from maintsched.gbt import empirical_quantile
from maintsched.workload import (
    DEFAULT_PROFILES, SERVER_CATALOG, DurationModel, FirmwareProfile, WorkloadSpec, assignable_jobs,
    calibrate_firmware, characterize, generate, ground_truth_duration, lognormal_sigma_for_ratio,
    size_tau, unit_of, visits, write_characterization,
)
from conftest import make_record

# target per-firmware job shares (percent) and median/p99 ratios
TARGET_SHARE = {"CPLD": 44, "FLASH": 18, "BIC": 14, "BIOS": 12, "NIC": 10, "OPENBMC": 1}
TARGET_RATIO = {"CPLD": 0.83, "FLASH": 0.28, "BIC": 0.72, "BIOS": 0.78, "NIC": 0.32, "OPENBMC": 0.41}


@pytest.fixture(scope="module")
def default_workload():
    return generate(WorkloadSpec())


def test_sigma_closed_form_and_sampling():
    assert lognormal_sigma_for_ratio(0.83) == pytest.approx(0.080, abs=5e-4)
    assert lognormal_sigma_for_ratio(0.28) == pytest.approx(0.547, abs=5e-4)
    rng = np.random.default_rng(0)
    for r in (0.83, 0.28):
        x = np.exp(lognormal_sigma_for_ratio(r) * rng.standard_normal(200_000))
        assert np.median(x) / np.quantile(x, 0.99) == pytest.approx(r, abs=0.01)


def test_no_hardware_effect_gives_closed_form_sigma():
    p = FirmwareProfile(FirmwareType.FLASH, 0.2, 0.5, 0.28, hardware_sensitivity=0.0)
    assert calibrate_firmware(p, 3600.0).noise_sigma == pytest.approx(lognormal_sigma_for_ratio(0.28), rel=1e-6)


def test_zero_noise_is_deterministic():
    model = DurationModel(WorkloadSpec(noise_sigma=0.0))
    hw = make_record().hardware
    a = ground_truth_duration(FirmwareType.NIC, hw, 2, np.random.default_rng(1), model)
    b = ground_truth_duration(FirmwareType.NIC, hw, 2, np.random.default_rng(2), model)
    assert a == b == model.deterministic(FirmwareType.NIC, hw, 2)


def test_zero_noise_dataset_matches_features():
    spec = WorkloadSpec(n_servers=50, n_jobs=300, noise_sigma=0.0)
    model = DurationModel(spec)
    for r in generate(spec, model):
        gap = int(r.target_version.rsplit("v", 1)[1]) - int(r.current_version.rsplit("v", 1)[1])
        assert r.true_duration == pytest.approx(model.deterministic(r.firmware, r.hardware, gap), rel=1e-12)


def test_default_profiles_sum_to_one():
    assert abs(sum(p.job_fraction for p in DEFAULT_PROFILES) - 1.0) <= 1e-9
    for p in DEFAULT_PROFILES:
        assert p.median_tail_ratio == TARGET_RATIO[p.firmware.value]


@pytest.mark.parametrize("kwargs", [{"n_jobs": 10, "n_servers": 20}, {"n_jobs": 0}, {"n_days": 0}])
def test_invalid_spec(kwargs):
    with pytest.raises(ConfigError, match="invalid spec"):
        WorkloadSpec(**kwargs)


def test_shares_must_sum_to_one():
    bad = tuple(replace(p, job_fraction=0.5) for p in DEFAULT_PROFILES)
    with pytest.raises(ConfigError, match="sum to 1"):
        WorkloadSpec(profiles=bad)


def test_generate_is_seeded():
    spec = WorkloadSpec(n_servers=40, n_jobs=200, seed=5)
    assert generate(spec) == generate(spec)
    assert generate(spec) != generate(replace(spec, seed=6))


def test_default_mix_and_tails(default_workload):
    assert len(default_workload) == 10_000
    stats = characterize(default_workload)
    for fw, s in stats.items():
        share = 100 * s.n / len(default_workload)
        assert abs(share - TARGET_SHARE[fw.value]) <= 2
        d = default_workload.for_firmware(fw).durations()
        oracle = np.sort(d)[(len(d) - 1) // 2] / np.sort(d)[math.ceil(0.99 * len(d)) - 1]
        assert s.median_tail_ratio == pytest.approx(oracle, rel=1e-12)
        assert abs(s.median_tail_ratio - TARGET_RATIO[fw.value]) <= 0.05
    assert 0.42 <= stats[FirmwareType.CPLD].n / len(default_workload) <= 0.46


def test_records_shape(default_workload):
    servers = {r.server_id for r in default_workload}
    assert len(servers) <= 1000
    assert all(r.visit_time < 60 for r in default_workload)
    assert all(r.hardware.server_type in SERVER_CATALOG for r in default_workload)
    assert unit_of("u012-s00245") == "u012"


def test_characterize_order_statistics():
    one = characterize(Dataset([make_record("a", duration=7.0)]))[FirmwareType.BIOS]
    assert (one.median, one.p99, one.max, one.median_tail_ratio) == (7.0, 7.0, 7.0, 1.0)
    assert one.low_confidence
    two = characterize(Dataset([make_record("a", duration=1.0), make_record("b", duration=100.0)]))
    s = two[FirmwareType.BIOS]
    assert (s.median, s.p99) == (1.0, 100.0) and not s.low_confidence
    with pytest.raises(ValueError, match="empty input"):
        characterize(Dataset())


def test_characterization_files(tmp_path, small_workload):
    stats = characterize(small_workload)
    write_characterization(stats, tmp_path / "s.csv", tmp_path / "c.csv")
    rows = list(csv.DictReader(open(tmp_path / "s.csv")))
    assert [r["firmware"] for r in rows] == [f.value for f in stats]
    cdf = list(csv.DictReader(open(tmp_path / "c.csv")))
    assert len(cdf) == 100 * len(stats)
    assert max(float(r["norm_duration"]) for r in cdf) == 1.0


def greedy_fill(jobs, tau):
    """Oracle: repeatedly take the highest-priority, then longest, then lowest-id job that still fits."""
    left = sorted(jobs, key=lambda j: (-j[2], -j[1], j[0]))
    used, n = 0.0, 0
    while True:
        pick = next((j for j in left if used + j[1] <= tau), None)
        if pick is None:
            return n
        left.remove(pick)
        used += pick[1]
        n += 1


def test_assignable_matches_greedy_oracle(small_workload):
    for group in visits(small_workload)[:200]:
        jobs = [(r.job_id, r.true_duration, r.priority) for r in group]
        for tau in (500.0, 2000.0, 5000.0):
            assert assignable_jobs(group, tau) == greedy_fill(jobs, tau)


def test_size_tau_hits_target(small_workload):
    groups = visits(small_workload)
    tau = size_tau(small_workload, 1.57)
    mean_at = lambda t: np.mean([assignable_jobs(g, t) for g in groups])
    assert mean_at(tau) >= 1.57
    assert mean_at(tau * (1 - 1e-6)) < 1.57


def test_coverage_restricts_server_types():
    spec = WorkloadSpec(n_servers=200, n_jobs=2000, enforce_coverage=True)
    data = generate(spec)
    types = {fw: {r.hardware.server_type for r in data.for_firmware(fw)} for fw in data.firmware_present()}
    assert len(types[FirmwareType.CPLD]) == 1
    assert len(types[FirmwareType.NIC]) == 3
