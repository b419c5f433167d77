"""Synthetic maintenance-job workloads with per-firmware long-tailed durations.

A job's duration is

    base_scale[firmware] * exp(hardware/version log-factor) * lognormal noise

The deterministic log-factor depends on server type, core count, flash size and
the gap between current and target version, i.e. only on encoded features.  It
is standardised over the hardware catalogue and scaled so that its spread is
``hardware_sensitivity`` times the firmware's total log-spread.  The noise
sigma is then solved so that the exact mixture distribution hits the profile's
median/p99 ratio.
"""

from __future__ import annotations

import csv
import math
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import optimize, stats

from .domain import (
    FIRMWARE_TYPES, ConfigError, Dataset, FirmwareType, HardwareDescriptor, JobRecord,
)
from .gbt import empirical_quantile

Z99 = float(stats.norm.ppf(0.99))  # 2.326...


@dataclass(frozen=True)
class FirmwareProfile:
    firmware: FirmwareType
    job_fraction: float
    max_norm_duration: float
    median_tail_ratio: float
    hardware_sensitivity: float = 0.7
    server_coverage: float = 1.0

    def __post_init__(self):
        if not 0 < self.median_tail_ratio <= 1:
            raise ConfigError(f"invalid spec: median_tail_ratio for {self.firmware.value}")
        if self.job_fraction < 0 or self.max_norm_duration <= 0 or self.hardware_sensitivity < 0:
            raise ConfigError(f"invalid spec: profile for {self.firmware.value}")


# job share, max normalised duration, median/p99, server share per firmware
_TABLE = {
    FirmwareType.CPLD: (0.44, 0.95, 0.83, 0.07),
    FirmwareType.FLASH: (0.18, 0.21, 0.28, 0.22),
    FirmwareType.BIC: (0.14, 0.57, 0.72, 0.14),
    FirmwareType.BIOS: (0.12, 0.56, 0.78, 0.16),
    FirmwareType.NIC: (0.10, 1.00, 0.32, 0.23),
    FirmwareType.OPENBMC: (0.01, 0.41, 0.41, 0.18),
}
# target shares sum to 0.99, so they are renormalised
_SHARE_TOTAL = sum(v[0] for v in _TABLE.values())

DEFAULT_PROFILES: tuple[FirmwareProfile, ...] = tuple(
    FirmwareProfile(fw, frac / _SHARE_TOTAL, mx, ratio, server_coverage=cov)
    for fw, (frac, mx, ratio, cov) in _TABLE.items()
)

# server type -> (cores, ram GB, disk GB, flash GB)
SERVER_CATALOG: dict[str, tuple[int, float, float, float]] = {
    "T1": (16, 64.0, 500.0, 0.0),
    "T2": (24, 96.0, 1000.0, 0.0),
    "T3": (32, 128.0, 2000.0, 480.0),
    "T4": (36, 192.0, 2000.0, 960.0),
    "T5": (40, 256.0, 4000.0, 960.0),
    "T6": (48, 256.0, 4000.0, 1920.0),
    "T7": (56, 384.0, 8000.0, 1920.0),
    "T8": (64, 512.0, 8000.0, 3840.0),
    "T9": (80, 512.0, 12000.0, 3840.0),
    "T10": (96, 768.0, 16000.0, 7680.0),
    "T11": (128, 1024.0, 16000.0, 7680.0),
    "T12": (192, 1536.0, 24000.0, 15360.0),
}
REGIONS = ("east", "west", "north", "south")
VERSION_GAPS = (1, 2, 3)
VERSION_GAP_PROBS = (0.6, 0.3, 0.1)
PRIORITY_PROBS = (0.7, 0.2, 0.1)


@dataclass(frozen=True)
class WorkloadSpec:
    profiles: tuple[FirmwareProfile, ...] = DEFAULT_PROFILES
    n_servers: int = 1000
    n_jobs: int = 10_000
    n_days: int = 60
    seed: int = 0
    noise_sigma: float | None = None  # None: solved per firmware; a number overrides all
    servers_per_unit: int = 20
    cycle_days: int = 14
    reference_duration: float = 3600.0
    enforce_coverage: bool = False

    def __post_init__(self):
        if self.n_servers < 1 or self.n_jobs < 1 or self.n_days < 1:
            raise ConfigError("invalid spec: n_servers, n_jobs and n_days must be positive")
        if self.n_jobs < self.n_servers:
            raise ConfigError("invalid spec: n_jobs < n_servers")
        if self.servers_per_unit < 1 or self.cycle_days < 1:
            raise ConfigError("invalid spec: servers_per_unit and cycle_days must be positive")
        if self.noise_sigma is not None and self.noise_sigma < 0:
            raise ConfigError("invalid spec: noise_sigma must be non-negative")
        fws = [p.firmware for p in self.profiles]
        if sorted(fws) != sorted(FIRMWARE_TYPES):
            raise ConfigError("invalid spec: need exactly one profile per firmware type")
        if abs(sum(p.job_fraction for p in self.profiles) - 1.0) > 1e-9:
            raise ConfigError("invalid spec: job fractions must sum to 1")

    def profile(self, firmware: FirmwareType) -> FirmwareProfile:
        return next(p for p in self.profiles if p.firmware == firmware)


def lognormal_sigma_for_ratio(ratio: float) -> float:
    """Sigma of a lognormal whose median/p99 equals ``ratio``."""
    if not 0 < ratio <= 1:
        raise ValueError("ratio must be in (0, 1]")
    return -math.log(ratio) / Z99


def _firmware_rng(firmware: FirmwareType) -> np.random.Generator:
    return np.random.default_rng(zlib.crc32(firmware.value.encode()))


@dataclass(frozen=True)
class _Coefficients:
    type_effect: dict[str, float]
    cores: float
    flash: float
    gap: float


def _coefficients(firmware: FirmwareType) -> _Coefficients:
    rng = _firmware_rng(firmware)
    types = sorted(SERVER_CATALOG, key=lambda t: int(t[1:]))
    effects = rng.normal(0.0, 1.0, len(types))
    return _Coefficients(
        dict(zip(types, effects.tolist())),
        cores=float(rng.uniform(0.3, 1.0)),
        flash=float(rng.uniform(0.0, 0.6)),
        gap=float(rng.uniform(0.3, 0.8)),
    )


def _raw_log_factor(c: _Coefficients, server_type: str, num_cores: float, flash_gb: float, gap: int) -> float:
    return (
        c.type_effect.get(server_type, 0.0)
        + c.cores * math.log2(num_cores / 32.0)
        + c.flash * math.log1p(flash_gb / 1000.0)
        + c.gap * (gap - 1)
    )


@dataclass(frozen=True)
class FirmwareDurationModel:
    firmware: FirmwareType
    coefficients: _Coefficients
    raw_mean: float
    raw_std: float
    det_scale: float  # std of the deterministic log-factor
    noise_sigma: float
    log_base: float

    def log_factor(self, hardware: HardwareDescriptor, gap: int) -> float:
        raw = _raw_log_factor(self.coefficients, hardware.server_type, hardware.num_cores, hardware.flash_gb, gap)
        if self.raw_std == 0:
            return 0.0
        return self.det_scale * (raw - self.raw_mean) / self.raw_std

    def deterministic(self, hardware: HardwareDescriptor, gap: int) -> float:
        return math.exp(self.log_base + self.log_factor(hardware, gap))


def _catalog_atoms(c: _Coefficients) -> tuple[np.ndarray, np.ndarray]:
    """Raw log-factor values and probabilities over (server type, gap)."""
    vals, probs = [], []
    n_types = len(SERVER_CATALOG)
    for t, (cores, _, _, flash) in SERVER_CATALOG.items():
        for gap, p in zip(VERSION_GAPS, VERSION_GAP_PROBS):
            vals.append(_raw_log_factor(c, t, cores, flash, gap))
            probs.append(p / n_types)
    return np.array(vals), np.array(probs)


def _mixture_quantile(atoms: np.ndarray, probs: np.ndarray, sigma: float, q: float) -> float:
    if sigma <= 0:
        order = np.argsort(atoms)
        cdf = np.cumsum(probs[order])
        return float(atoms[order][np.searchsorted(cdf, q - 1e-12)])

    def f(x):
        return float(np.sum(probs * stats.norm.cdf((x - atoms) / sigma))) - q

    lo = atoms.min() - 10 * sigma
    hi = atoms.max() + 10 * sigma
    return optimize.brentq(f, lo, hi, xtol=1e-12)


def _mixture_ratio(atoms, probs, sigma) -> float:
    return math.exp(_mixture_quantile(atoms, probs, sigma, 0.5) - _mixture_quantile(atoms, probs, sigma, 0.99))


def calibrate_firmware(profile: FirmwareProfile, reference_duration: float,
                       noise_sigma: float | None = None) -> FirmwareDurationModel:
    c = _coefficients(profile.firmware)
    raw, probs = _catalog_atoms(c)
    raw_mean = float(np.sum(probs * raw))
    raw_std = float(math.sqrt(np.sum(probs * (raw - raw_mean) ** 2)))
    sigma_total = lognormal_sigma_for_ratio(profile.median_tail_ratio)
    det_scale = profile.hardware_sensitivity * sigma_total
    atoms = det_scale * (raw - raw_mean) / raw_std if raw_std > 0 else np.zeros_like(raw)

    if noise_sigma is None:
        target = profile.median_tail_ratio
        if _mixture_ratio(atoms, probs, 1e-9) < target:
            raise ConfigError(
                f"invalid spec: hardware_sensitivity too large for {profile.firmware.value}")
        if target >= 1:
            sigma = 0.0
        else:
            sigma = optimize.brentq(
                lambda s: _mixture_ratio(atoms, probs, s) - target, 1e-9, 5 * sigma_total + 1e-6, xtol=1e-10)
    else:
        sigma = float(noise_sigma)
    # p99 of the firmware lands on max_norm_duration * reference_duration
    p99 = _mixture_quantile(atoms, probs, sigma, 0.99)
    log_base = math.log(profile.max_norm_duration * reference_duration) - p99
    return FirmwareDurationModel(profile.firmware, c, raw_mean, raw_std, det_scale, sigma, log_base)


class DurationModel:
    """Calibrated ground-truth duration generator for every firmware type."""

    def __init__(self, spec: WorkloadSpec | None = None):
        spec = spec or WorkloadSpec()
        self.spec = spec
        self.firmware = {
            p.firmware: calibrate_firmware(p, spec.reference_duration, spec.noise_sigma)
            for p in spec.profiles
        }

    def deterministic(self, firmware: FirmwareType, hardware: HardwareDescriptor, version_gap: int) -> float:
        return self.firmware[FirmwareType(firmware)].deterministic(hardware, version_gap)

    def sample(self, firmware: FirmwareType, hardware: HardwareDescriptor, version_gap: int,
               rng: np.random.Generator) -> float:
        m = self.firmware[FirmwareType(firmware)]
        det = m.deterministic(hardware, version_gap)
        if m.noise_sigma == 0:
            return det
        return det * math.exp(m.noise_sigma * rng.standard_normal())


_DEFAULT_MODEL: DurationModel | None = None


def ground_truth_duration(firmware: FirmwareType, hardware: HardwareDescriptor, version_gap: int,
                          rng: np.random.Generator, model: DurationModel | None = None) -> float:
    """Sample one true duration in seconds (default calibration unless ``model`` given)."""
    global _DEFAULT_MODEL
    if version_gap < 0:
        raise ValueError("version_gap must be non-negative")
    if model is None:
        if _DEFAULT_MODEL is None:
            _DEFAULT_MODEL = DurationModel()
        model = _DEFAULT_MODEL
    return model.sample(firmware, hardware, version_gap, rng)


def unit_of(server_id: str) -> str:
    """Generated server ids look like ``u012-s00245``; the prefix names the unit."""
    return server_id.split("-", 1)[0]


def generate(spec: WorkloadSpec | None = None, model: DurationModel | None = None) -> Dataset:
    spec = spec or WorkloadSpec()
    model = model or DurationModel(spec)
    rng = np.random.default_rng(spec.seed)
    types = list(SERVER_CATALOG)

    n_units = math.ceil(spec.n_servers / spec.servers_per_unit)
    unit_offset = rng.integers(0, spec.cycle_days, n_units)
    server_type = rng.integers(0, len(types), spec.n_servers)
    server_region = rng.integers(0, len(REGIONS), spec.n_servers)
    first_age = rng.integers(spec.cycle_days, 181, spec.n_servers)

    # every (server, visit day) slot; a unit's servers share visit days
    slot_server, slot_day, slot_visit = [], [], []
    for s in range(spec.n_servers):
        u = s // spec.servers_per_unit
        for k, day in enumerate(range(int(unit_offset[u]), spec.n_days, spec.cycle_days)):
            slot_server.append(s)
            slot_day.append(day)
            slot_visit.append(k)
    slot_server = np.array(slot_server)
    slot_day = np.array(slot_day)
    slot_visit = np.array(slot_visit)

    fw_probs = np.array([spec.profile(f).job_fraction for f in FIRMWARE_TYPES])
    job_fw = rng.choice(len(FIRMWARE_TYPES), size=spec.n_jobs, p=fw_probs)
    job_slot = rng.integers(0, len(slot_server), spec.n_jobs)
    if spec.enforce_coverage:
        job_slot = _restrict_to_coverage(spec, rng, job_fw, job_slot, slot_server, server_type, types)
    job_gap = rng.choice(VERSION_GAPS, size=spec.n_jobs, p=VERSION_GAP_PROBS)
    job_priority = rng.choice(len(PRIORITY_PROBS), size=spec.n_jobs, p=PRIORITY_PROBS)
    noise = rng.standard_normal(spec.n_jobs)

    records = []
    for j in range(spec.n_jobs):
        slot = job_slot[j]
        s = int(slot_server[slot])
        day = float(slot_day[slot])
        fw = FIRMWARE_TYPES[job_fw[j]]
        st = types[server_type[s]]
        cores, ram, disk, flash = SERVER_CATALOG[st]
        age = float(first_age[s]) if slot_visit[slot] == 0 else float(spec.cycle_days)
        hw = HardwareDescriptor(st, cores, ram, disk, flash, REGIONS[server_region[s]], age)
        gap = int(job_gap[j])
        # newer target versions appear as time advances
        target = 4 + (4 * int(day)) // spec.n_days
        current = target - gap
        fm = model.firmware[fw]
        duration = fm.deterministic(hw, gap) * math.exp(fm.noise_sigma * noise[j])
        records.append(JobRecord(
            job_id=f"j{j:06d}",
            firmware=fw,
            current_version=f"{fw.value}-v{current}",
            target_version=f"{fw.value}-v{target}",
            hardware=hw,
            priority=int(job_priority[j]),
            true_duration=duration,
            visit_time=day,
            server_id=f"u{s // spec.servers_per_unit:03d}-s{s:05d}",
        ))
    return Dataset(records)


def _restrict_to_coverage(spec, rng, job_fw, job_slot, slot_server, server_type, types):
    """Move each job onto a server whose type is eligible for its firmware."""
    n_types = len(types)
    out = job_slot.copy()
    slot_type = server_type[slot_server]
    for i, fw in enumerate(FIRMWARE_TYPES):
        k = max(1, round(spec.profile(fw).server_coverage * n_types))
        eligible_types = _firmware_rng(fw).permutation(n_types)[:k]
        eligible_slots = np.flatnonzero(np.isin(slot_type, eligible_types))
        jobs = np.flatnonzero(job_fw == i)
        if len(eligible_slots) == 0 or len(jobs) == 0:
            continue
        out[jobs] = eligible_slots[rng.integers(0, len(eligible_slots), len(jobs))]
    return out


@dataclass(frozen=True)
class FirmwareStats:
    firmware: FirmwareType
    n: int
    median: float
    p99: float
    max: float
    median_tail_ratio: float
    max_norm: float
    low_confidence: bool
    cdf: tuple[tuple[float, float], ...] = field(repr=False)


CDF_LEVELS = tuple(i / 100 for i in range(1, 101))


def characterize(dataset: Dataset) -> dict[FirmwareType, FirmwareStats]:
    """Per-firmware order statistics with durations normalised by the global max."""
    if len(dataset) == 0:
        raise ValueError("empty input")
    global_max = float(dataset.durations().max())
    out = {}
    for fw in dataset.firmware_present():
        d = np.sort(dataset.for_firmware(fw).durations())
        med = empirical_quantile(d, 0.5)
        p99 = empirical_quantile(d, 0.99)
        cdf = tuple((empirical_quantile(d, lv) / global_max, lv) for lv in CDF_LEVELS)
        out[fw] = FirmwareStats(
            firmware=fw, n=len(d), median=med, p99=p99, max=float(d[-1]),
            median_tail_ratio=med / p99, max_norm=float(d[-1]) / global_max,
            low_confidence=len(d) < 2, cdf=cdf,
        )
    return out


def write_characterization(stats_by_fw: dict[FirmwareType, FirmwareStats], stats_path: str | Path,
                           cdf_path: str | Path) -> None:
    with open(stats_path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["firmware", "n", "median", "p99", "max", "median_tail_ratio", "max_norm", "low_confidence"])
        for s in stats_by_fw.values():
            w.writerow([s.firmware.value, s.n, repr(s.median), repr(s.p99), repr(s.max),
                        repr(s.median_tail_ratio), repr(s.max_norm), int(s.low_confidence)])
    with open(cdf_path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["firmware", "norm_duration", "cdf"])
        for s in stats_by_fw.values():
            for x, p in s.cdf:
                w.writerow([s.firmware.value, repr(x), repr(p)])


def visits(dataset: Dataset) -> list[list[JobRecord]]:
    """Group records into server visits keyed by (server_id, visit_time)."""
    groups: dict[tuple[str, float], list[JobRecord]] = {}
    for r in dataset:
        groups.setdefault((r.server_id, r.visit_time), []).append(r)
    return list(groups.values())


def assignable_jobs(jobs: Sequence[JobRecord], tau: float) -> int:
    """How many of one visit's jobs fit in ``tau`` when durations are known exactly."""
    from .scheduler import select_next_job

    pending = [(r.job_id, r.true_duration, r.priority) for r in jobs]
    used = 0.0
    n = 0
    while True:
        pick = select_next_job(pending, tau - used)
        if pick is None:
            return n
        d = next(p[1] for p in pending if p[0] == pick)
        pending = [p for p in pending if p[0] != pick]
        used += d
        n += 1


def size_tau(dataset: Dataset, target_jobs_per_visit: float = 1.57, iterations: int = 50) -> float:
    """Bisect the per-server budget so visits average ``target_jobs_per_visit`` assignable jobs."""
    groups = visits(dataset)
    if not groups:
        raise ValueError("empty input")
    lo, hi = 0.0, float(sum(r.true_duration for r in dataset))

    def mean_assignable(tau):
        return float(np.mean([assignable_jobs(g, tau) for g in groups]))

    if mean_assignable(hi) < target_jobs_per_visit:
        return hi
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        if mean_assignable(mid) < target_jobs_per_visit:
            lo = mid
        else:
            hi = mid
    return hi


def with_seed(spec: WorkloadSpec, seed: int) -> WorkloadSpec:
    return replace(spec, seed=seed)
