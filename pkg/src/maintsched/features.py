"""Ordinal feature encoding of job records."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .domain import Dataset, JobRecord

CATEGORICAL_FIELDS = ("firmware", "current_version", "target_version", "server_type", "region")
NUMERIC_FIELDS = ("num_cores", "ram_gb", "disk_gb", "flash_gb", "days_since_last_maintenance")

UNSEEN = 0


def _categorical(record: JobRecord, name: str) -> str:
    if name == "firmware":
        return record.firmware.value
    if name in ("current_version", "target_version"):
        return getattr(record, name)
    return getattr(record.hardware, name)


def _numeric(record: JobRecord, name: str) -> float:
    return float(getattr(record.hardware, name))


@dataclass(frozen=True)
class FeatureSchema:
    categorical_maps: Mapping[str, Mapping[str, int]]
    numeric_fields: tuple[str, ...] = NUMERIC_FIELDS
    version: str = field(default="")

    def __post_init__(self):
        if not self.version:
            object.__setattr__(self, "version", _fingerprint(self.categorical_maps, self.numeric_fields))

    @property
    def width(self) -> int:
        return len(self.numeric_fields) + len(self.categorical_maps)

    @property
    def column_names(self) -> list[str]:
        return list(self.numeric_fields) + list(self.categorical_maps)

    def to_dict(self) -> dict:
        return {
            "categorical_fields": list(self.categorical_maps),
            "categorical_maps": {k: dict(v) for k, v in self.categorical_maps.items()},
            "numeric_fields": list(self.numeric_fields),
            "version": self.version,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSchema":
        # JSON writers may sort keys; column order comes from the explicit field list
        order = d.get("categorical_fields", list(d["categorical_maps"]))
        schema = cls(
            categorical_maps={k: dict(d["categorical_maps"][k]) for k in order},
            numeric_fields=tuple(d["numeric_fields"]),
        )
        if d.get("version") and d["version"] != schema.version:
            raise ValueError("schema fingerprint mismatch")
        return schema


@dataclass(frozen=True)
class FeatureVector:
    values: tuple[float, ...]
    schema_version: str


def _fingerprint(maps: Mapping[str, Mapping[str, int]], numeric: Iterable[str]) -> str:
    payload = json.dumps(
        {"cat": [[k, sorted(v.items(), key=lambda kv: kv[1])] for k, v in maps.items()], "num": list(numeric)},
        separators=(",", ":"),
    )
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def build_schema(train: Dataset | Iterable[JobRecord]) -> FeatureSchema:
    """Assign indices 1, 2, ... to categorical tokens by first appearance."""
    records = list(train)
    if not records:
        raise ValueError("empty input")
    maps: dict[str, dict[str, int]] = {name: {} for name in CATEGORICAL_FIELDS}
    for r in records:
        for name in CATEGORICAL_FIELDS:
            m = maps[name]
            tok = _categorical(r, name)
            if tok not in m:
                m[tok] = len(m) + 1
    return FeatureSchema(categorical_maps=maps)


def _row(record: JobRecord, schema: FeatureSchema) -> list[float]:
    row = [_numeric(record, n) for n in schema.numeric_fields]
    for name, m in schema.categorical_maps.items():
        row.append(float(m.get(_categorical(record, name), UNSEEN)))
    if not all(math.isfinite(v) for v in row):
        raise ValueError(f"invalid record {record.job_id}: non-finite feature")
    return row


def encode(record: JobRecord, schema: FeatureSchema) -> FeatureVector:
    return FeatureVector(tuple(_row(record, schema)), schema.version)


def encode_matrix(records: Iterable[JobRecord], schema: FeatureSchema) -> np.ndarray:
    """Encode many records into an ``(n, schema.width)`` float array."""
    rows = [_row(r, schema) for r in records]
    if not rows:
        return np.zeros((0, schema.width))
    return np.asarray(rows, dtype=float)
