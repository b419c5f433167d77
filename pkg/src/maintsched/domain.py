"""Core record types, dataset container, CSV I/O and the time-based split."""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np


class ConfigError(ValueError):
    """Invalid user-supplied configuration (maps to CLI exit code 2)."""


class FirmwareType(str, enum.Enum):
    CPLD = "CPLD"
    FLASH = "FLASH"
    BIC = "BIC"
    BIOS = "BIOS"
    NIC = "NIC"
    OPENBMC = "OPENBMC"


FIRMWARE_TYPES: tuple[FirmwareType, ...] = tuple(FirmwareType)


@dataclass(frozen=True)
class HardwareDescriptor:
    server_type: str
    num_cores: int
    ram_gb: float
    disk_gb: float
    flash_gb: float
    region: str
    days_since_last_maintenance: float

    def __post_init__(self):
        for name in ("num_cores", "ram_gb", "disk_gb", "flash_gb", "days_since_last_maintenance"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"invalid record: non-finite {name}")
        if self.num_cores <= 0 or self.ram_gb <= 0 or self.disk_gb <= 0:
            raise ValueError("invalid record: cores, ram and disk must be positive")
        if self.flash_gb < 0 or self.days_since_last_maintenance < 0:
            raise ValueError("invalid record: negative flash or maintenance age")


@dataclass(frozen=True)
class JobRecord:
    job_id: str
    firmware: FirmwareType
    current_version: str
    target_version: str
    hardware: HardwareDescriptor
    priority: int
    true_duration: float
    visit_time: float
    server_id: str

    def __post_init__(self):
        if not isinstance(self.firmware, FirmwareType):
            object.__setattr__(self, "firmware", FirmwareType(self.firmware))
        if not (self.true_duration > 0 and math.isfinite(self.true_duration)):
            raise ValueError(f"invalid record {self.job_id}: true_duration must be positive")
        if not (self.visit_time >= 0 and math.isfinite(self.visit_time)):
            raise ValueError(f"invalid record {self.job_id}: visit_time must be non-negative")
        if self.priority < 0:
            raise ValueError(f"invalid record {self.job_id}: negative priority")


class Dataset(Sequence[JobRecord]):
    """Immutable list of job records kept sorted by visit time.

    The sort is stable, so records sharing a visit time keep their input order.
    """

    def __init__(self, records: Iterable[JobRecord] = ()):
        recs = sorted(records, key=lambda r: r.visit_time)
        ids = [r.job_id for r in recs]
        if len(set(ids)) != len(ids):
            seen: set[str] = set()
            dup = next(i for i in ids if i in seen or seen.add(i))
            raise ValueError(f"duplicate job_id: {dup}")
        self._records: tuple[JobRecord, ...] = tuple(recs)

    def __len__(self) -> int:
        return len(self._records)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return Dataset(self._records[i])
        return self._records[i]

    def __iter__(self) -> Iterator[JobRecord]:
        return iter(self._records)

    def __eq__(self, other) -> bool:
        return isinstance(other, Dataset) and self._records == other._records

    def __repr__(self) -> str:
        return f"Dataset(n={len(self)})"

    @property
    def records(self) -> tuple[JobRecord, ...]:
        return self._records

    def job_ids(self) -> list[str]:
        return [r.job_id for r in self._records]

    def for_firmware(self, firmware: FirmwareType) -> "Dataset":
        return Dataset(r for r in self._records if r.firmware == firmware)

    def firmware_present(self) -> list[FirmwareType]:
        present = {r.firmware for r in self._records}
        return [f for f in FIRMWARE_TYPES if f in present]

    def durations(self) -> np.ndarray:
        return np.array([r.true_duration for r in self._records], dtype=float)

    def time_span(self) -> float:
        if not self._records:
            return 0.0
        return self._records[-1].visit_time - self._records[0].visit_time

    def max_visit_time(self) -> float:
        return self._records[-1].visit_time

    def concat(self, other: "Dataset") -> "Dataset":
        return Dataset(self._records + other._records)


@dataclass(frozen=True)
class DatasetSplit:
    train: Dataset
    validation: Dataset
    test: Dataset


def split_by_time(
    dataset: Dataset,
    test_window_days: float = 7.0,
    validation_fraction: float = 0.1,
    seed: int = 0,
) -> DatasetSplit:
    """Hold out the last ``test_window_days`` as test, split the rest at random.

    Test gets every record with ``visit_time > max_visit_time - test_window_days``.
    The remainder is shuffled with ``seed`` and ``round(validation_fraction * n)``
    records become validation.
    """
    if len(dataset) == 0:
        raise ValueError("empty input")
    if test_window_days <= 0:
        raise ValueError("test_window_days must be positive")
    if not 0 < validation_fraction < 1:
        raise ValueError("validation_fraction must be in (0, 1)")
    if test_window_days >= dataset.time_span():
        raise ValueError("degenerate split")
    cutoff = dataset.max_visit_time() - test_window_days
    test = [r for r in dataset if r.visit_time > cutoff]
    rest = [r for r in dataset if r.visit_time <= cutoff]

    train, validation = random_split(Dataset(rest), validation_fraction, seed)
    return DatasetSplit(train, validation, Dataset(test))


def random_split(dataset: Dataset, validation_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded (train, validation) partition with ``round(fraction * n)`` validation records."""
    records = dataset.records
    n_val = int(round(validation_fraction * len(records)))
    order = np.random.default_rng(seed).permutation(len(records))
    val_idx = set(order[:n_val].tolist())
    validation = [r for i, r in enumerate(records) if i in val_idx]
    train = [r for i, r in enumerate(records) if i not in val_idx]
    return Dataset(train), Dataset(validation)


CSV_COLUMNS = (
    "job_id", "firmware", "current_version", "target_version", "server_type",
    "num_cores", "ram_gb", "disk_gb", "flash_gb", "region",
    "days_since_last_maintenance", "priority", "true_duration", "visit_time", "server_id",
)


def _fmt(x: float) -> str:
    return repr(float(x))


def record_to_row(r: JobRecord) -> list[str]:
    h = r.hardware
    return [
        r.job_id, r.firmware.value, r.current_version, r.target_version, h.server_type,
        str(h.num_cores), _fmt(h.ram_gb), _fmt(h.disk_gb), _fmt(h.flash_gb), h.region,
        _fmt(h.days_since_last_maintenance), str(r.priority), _fmt(r.true_duration),
        _fmt(r.visit_time), r.server_id,
    ]


def row_to_record(row: dict) -> JobRecord:
    try:
        hw = HardwareDescriptor(
            server_type=row["server_type"],
            num_cores=int(row["num_cores"]),
            ram_gb=float(row["ram_gb"]),
            disk_gb=float(row["disk_gb"]),
            flash_gb=float(row["flash_gb"]),
            region=row["region"],
            days_since_last_maintenance=float(row["days_since_last_maintenance"]),
        )
        return JobRecord(
            job_id=row["job_id"],
            firmware=FirmwareType(row["firmware"]),
            current_version=row["current_version"],
            target_version=row["target_version"],
            hardware=hw,
            priority=int(row["priority"]),
            true_duration=float(row["true_duration"]),
            visit_time=float(row["visit_time"]),
            server_id=row["server_id"],
        )
    except KeyError as e:
        raise ValueError(f"invalid record: missing column {e}") from None


def write_csv(dataset: Dataset, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in dataset:
            w.writerow(record_to_row(r))


def read_csv(path: str | Path) -> Dataset:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        missing = set(CSV_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"invalid record: missing columns {sorted(missing)}")
        return Dataset(row_to_record(row) for row in reader)
