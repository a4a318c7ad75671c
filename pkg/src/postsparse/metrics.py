"""Overall metrics over oriented task scores.

All ``om_*`` functions return unit-scale values; reports multiply by
:data:`REPORT_SCALE`.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

HIGHER, LOWER = "higher_better", "lower_better"
ORIENTATIONS = (HIGHER, LOWER)
PHASES = ("dense", "sparse", "sparse_reconstructed")
REPORT_SCALE = 100.0
EXP_CLAMP = 1e6
SCORE_HEADER = ("task", "arch", "size", "dataset", "rate", "phase", "orientation", "value")


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class TaskScore:
    value: float
    orientation: str = HIGHER

    def __post_init__(self):
        if self.orientation not in ORIENTATIONS:
            raise MetricError(f"unknown orientation {self.orientation!r}")
        if not math.isfinite(self.value):
            raise MetricError(f"non-finite score {self.value}")
        if self.orientation == HIGHER and self.value < 0:
            raise MetricError(f"higher_better score must be >= 0, got {self.value}")
        if self.orientation == LOWER and self.value <= 0:
            raise MetricError(f"lower_better score must be > 0, got {self.value}")


def relative_score(sparse: TaskScore, dense: TaskScore) -> float:
    """Sparse-over-dense ratio, inverted for lower-is-better scores."""
    if sparse.orientation != dense.orientation:
        raise MetricError("orientation mismatch")
    if sparse.orientation == HIGHER:
        if dense.value == 0:
            raise MetricError("dense score is zero")
        return sparse.value / dense.value
    if sparse.value == 0:
        raise MetricError("sparse score is zero")
    return dense.value / sparse.value


def recon_gain(score_with: TaskScore, score_without: TaskScore) -> float:
    if score_with.orientation != score_without.orientation:
        raise MetricError("orientation mismatch")
    return score_with.value - score_without.value


def quadratic_mean(values: Iterable[float]) -> float:
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        raise MetricError("empty input")
    return float(np.sqrt(np.mean(v * v)))


def om_alloc(per_task_means: Mapping[str, float]) -> float:
    return quadratic_mean(per_task_means.values())


def om_arch(per_size_means: Sequence[float]) -> float:
    return quadratic_mean(per_size_means)


def om_task(per_task_means: Sequence[float]) -> float:
    return quadratic_mean(per_task_means)


def om_robust(per_size_means: Sequence[float]) -> float:
    """Population standard deviation of per-size mean relative scores."""
    v = np.asarray(list(per_size_means), dtype=np.float64)
    if v.size < 2:
        raise MetricError("need at least two model sizes")
    return float(v.std())


def om_recon(per_task_terms: Mapping[str, float]) -> float:
    """Quadratic mean of per-task reconstruction terms (see :func:`recon_term`)."""
    return quadratic_mean(per_task_terms.values())


def per_task_ms(relative_scores: Sequence[float]) -> float:
    v = list(relative_scores)
    if not v:
        raise MetricError("empty input")
    return float(np.mean(v))


def gen_term(dense_value: float, gain: float) -> float:
    """exp(A / R) for a lower-is-better task, clamped to [0, EXP_CLAMP]."""
    if gain == 0:
        raise MetricError("zero gain: exp(A/R) undefined")
    x = dense_value / gain
    if x >= math.log(EXP_CLAMP):
        return EXP_CLAMP
    return math.exp(x)


def recon_term(orientation: str, dense_values: Sequence[float], gains: Sequence[float]) -> float:
    """Mean per-record reconstruction term for one task.

    Higher-is-better tasks average R/A; lower-is-better tasks average
    exp(A/R). Records with a zero gain on a lower-is-better task are
    undefined and dropped with a warning.
    """
    if len(dense_values) != len(gains) or not gains:
        raise MetricError("empty or misaligned input")
    if orientation == HIGHER:
        return float(np.mean([g / a for a, g in zip(dense_values, gains)]))
    terms = []
    for a, g in zip(dense_values, gains):
        if g == 0:
            warnings.warn("zero reconstruction gain on a lower-is-better record; excluded",
                          RuntimeWarning, stacklevel=2)
            continue
        terms.append(gen_term(a, g))
    if not terms:
        raise MetricError("every record has zero gain")
    return float(np.mean(terms))


def report_value(x: float) -> float:
    return x * REPORT_SCALE


# ---------------------------------------------------------------------------
# Score tables
# ---------------------------------------------------------------------------


@dataclass(frozen=True, order=True)
class ScoreKey:
    task: str
    arch: str
    size: str
    dataset: str
    rate: float
    phase: str

    def with_phase(self, phase: str) -> "ScoreKey":
        return ScoreKey(self.task, self.arch, self.size, self.dataset, self.rate, phase)


class ScoreTable:
    """Oriented scores keyed by (task, arch, size, dataset, rate, phase)."""

    def __init__(self, records: Mapping[ScoreKey, TaskScore] | None = None):
        self.records: dict[ScoreKey, TaskScore] = dict(records or {})

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(sorted(self.records.items()))

    def add(self, key: ScoreKey, score: TaskScore) -> None:
        if key.phase not in PHASES:
            raise MetricError(f"unknown phase {key.phase!r}")
        self.records[key] = score

    def validate(self) -> None:
        for key in self.records:
            if key.phase != "dense" and key.with_phase("dense") not in self.records:
                raise MetricError(f"no dense record for {key}")

    def relative(self, phase: str = "sparse") -> list[tuple[ScoreKey, float]]:
        out = []
        for key, score in self:
            if key.phase == phase:
                out.append((key, relative_score(score, self.records[key.with_phase("dense")])))
        return out

    def gains(self) -> list[tuple[ScoreKey, float, float, str]]:
        """(key, dense value, reconstructed - sparse, orientation) per reconstructed record."""
        out = []
        for key, score in self:
            if key.phase == "sparse_reconstructed":
                before = self.records[key.with_phase("sparse")]
                dense = self.records[key.with_phase("dense")]
                out.append((key, dense.value, recon_gain(score, before), score.orientation))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SCORE_HEADER)
        for key, s in self:
            w.writerow([key.task, key.arch, key.size, key.dataset, repr(float(key.rate)),
                        key.phase, s.orientation, repr(float(s.value))])
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_csv())

    @classmethod
    def from_csv(cls, text: str) -> "ScoreTable":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or tuple(rows[0]) != SCORE_HEADER:
            raise MetricError(f"bad score-table header {rows[:1]}")
        table = cls()
        for row in rows[1:]:
            if not row:
                continue
            if len(row) != len(SCORE_HEADER):
                raise MetricError(f"bad score-table row {row}")
            task, arch, size, dataset, rate, phase, orient, value = row
            table.add(ScoreKey(task, arch, size, dataset, float(rate), phase),
                      TaskScore(float(value), orient))
        return table

    @classmethod
    def load(cls, path) -> "ScoreTable":
        return cls.from_csv(Path(path).read_text())

    def merged(self, other: "ScoreTable") -> "ScoreTable":
        return ScoreTable({**self.records, **other.records})
