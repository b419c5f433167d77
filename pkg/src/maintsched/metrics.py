"""Prediction-accuracy and maintenance-outcome metrics."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

UNDEFINED = "undefined (reference zero)"


def _pair(truths, preds) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(truths, dtype=float)
    p = np.asarray(preds, dtype=float)
    if y.shape != p.shape or y.ndim != 1:
        raise ValueError(f"shape error: {y.shape} vs {p.shape}")
    if len(y) == 0:
        raise ValueError("empty input")
    return y, p


def mape(truths, preds) -> float:
    """Mean absolute percentage error, in percent."""
    y, p = _pair(truths, preds)
    if np.any(y == 0):
        raise ValueError("division by zero truth")
    return float(np.mean(np.abs(y - p) / np.abs(y)) * 100.0)


def opr(truths, preds) -> float:
    """Fraction of predictions strictly above the truth."""
    y, p = _pair(truths, preds)
    return float(np.mean(p > y))


@dataclass
class MetricsReport:
    method: str
    mape: float
    opr: float
    offline_servers: int
    downtime_seconds: float
    jobs_completed_online: int
    jobs_completed_total: int
    jcr: float | None
    servers_visited: int = 0
    unfinished_jobs: int = 0
    n_test_jobs: int = 0

    @property
    def offline_percent(self) -> float | None:
        if self.servers_visited == 0:
            return None
        return 100.0 * self.offline_servers / self.servers_visited


def _ratio(other: float, reference: float) -> float | None:
    if other == reference:
        return 1.0
    if reference == 0:
        return None
    return other / reference


def osr_dtr(reference: MetricsReport, other: MetricsReport) -> tuple[float | None, float | None]:
    """Offline-server and downtime ratios of ``other`` against ``reference``.

    ``None`` marks a ratio whose reference denominator is zero.  Equal values
    give exactly 1, so a report compared with itself is always (1, 1).
    """
    return (
        _ratio(other.offline_servers, reference.offline_servers),
        _ratio(other.downtime_seconds, reference.downtime_seconds),
    )


def jcr(outcomes: Iterable) -> float:
    """Percentage of completed jobs that finished on servers returned to production."""
    outcomes = list(outcomes)
    online = sum(o.completed_jobs_online for o in outcomes)
    total = sum(o.completed_jobs_total for o in outcomes)
    if total == 0:
        raise ValueError("undefined: no completed jobs")
    return 100.0 * online / total


@dataclass
class ComparisonReport:
    reference: str
    reports: list[MetricsReport]
    ratios: dict[str, tuple[float | None, float | None]] = field(default_factory=dict)

    @classmethod
    def build(cls, reports: Sequence[MetricsReport], reference: str) -> "ComparisonReport":
        ref = next((r for r in reports if r.method == reference), None)
        if ref is None:
            raise ValueError(f"reference method {reference} not among reports")
        return cls(reference, list(reports), {r.method: osr_dtr(ref, r) for r in reports})

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = ["method", "mape", "opr", "offline_servers", "offline_percent", "downtime_seconds",
                "jobs_completed_online", "jobs_completed_total", "jcr", "unfinished_jobs", "osr", "dtr"]
        w.writerow(cols)
        for r in self.reports:
            osr, dtr = self.ratios[r.method]
            d = asdict(r)
            d["offline_percent"] = r.offline_percent
            d["osr"] = UNDEFINED if osr is None else repr(osr)
            d["dtr"] = UNDEFINED if dtr is None else repr(dtr)
            w.writerow([_cell(d[c]) for c in cols])
        return buf.getvalue()

    def to_markdown(self) -> str:
        methods = [r.method for r in self.reports]
        lines = ["| | " + " | ".join(methods) + " |", "|---" * (len(methods) + 1) + "|"]

        def row(name, vals):
            lines.append(f"| {name} | " + " | ".join(vals) + " |")

        row("OSR", [_fmt_ratio(self.ratios[m][0]) for m in methods])
        row("DTR", [_fmt_ratio(self.ratios[m][1]) for m in methods])
        row("JCR (%)", ["-" if r.jcr is None else f"{r.jcr:.1f}" for r in self.reports])
        row("MAPE (%)", [f"{r.mape:.2f}" for r in self.reports])
        row("OPR (%)", [f"{100 * r.opr:.1f}" for r in self.reports])
        row("Offline servers", [str(r.offline_servers) for r in self.reports])
        row("Offline (%)", ["-" if r.offline_percent is None else f"{r.offline_percent:.2f}" for r in self.reports])
        row("Downtime (s)", [f"{r.downtime_seconds:.1f}" for r in self.reports])
        return "\n".join(lines) + f"\n\nRatios are relative to {self.reference}.\n"


def _fmt_ratio(x: float | None) -> str:
    return UNDEFINED if x is None else f"{x:.2f}"


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)
