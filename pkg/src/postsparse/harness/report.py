"""Track tables built from score tables, with rank markers.

Rows are algorithms (tracks ``alloc``/``recon``), architecture families
(``arch``/``robust``) or tasks (``task``). Columns run per task: each rate
ascending, then the task's MS, then the track's overall metric. Cell values
are reported x100.
"""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .. import metrics as M
from ..metrics import ScoreTable

TRACKS = ("alloc", "recon", "arch", "robust", "task")
ALLOC_ORDER = ("uniform", "magnitude", "erk", "custom")
ALLOC_LABELS = {"uniform": "Uniform", "magnitude": "L2Norm", "erk": "ERK", "custom": "Custom"}
RECON_ROWS = (
    ("w/ Correction", "block-sparse-ec"),
    ("w/o Correction", "block-sparse-noec"),
    ("Sparse Input", "block-sparse-noec"),
    ("Dense Input", "block-dense-noec"),
    ("Single", "single-sparse-noec"),
    ("Layer-wise", "layer-sparse-noec"),
    ("Block-wise", "block-sparse-noec"),
)
REFERENCE_SETTING = "recon-block-sparse-noec"
TASK_ORDER = ("cls", "den")
FAMILY_ORDER = ("mlp", "plainconv", "rescnn")
SIZE_ORDER = ("s", "m", "l")
MARK_SYMBOL = {"best": "[B]", "second": "[b]", "worst": "[W]", "second_worst": "[w]"}

Tables = dict[int, dict[str, ScoreTable]]


class EmptyTrack(ValueError):
    pass


@dataclass(frozen=True)
class Column:
    name: str
    lower_better: bool = False


@dataclass
class TrackReport:
    track: str
    columns: list[Column]
    rows: list[str]
    values: dict[str, list[Optional[float]]]
    summary: dict[str, float] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    markers: dict[tuple[str, int], str] = field(default_factory=dict)

    def column_index(self, name: str) -> int:
        return [c.name for c in self.columns].index(name)

    def value(self, row: str, column: str) -> Optional[float]:
        return self.values[row][self.column_index(column)]

    def to_dict(self) -> dict:
        return {
            "track": self.track,
            "columns": [c.name for c in self.columns],
            "rows": {r: [None if v is None else round(v, 4) for v in self.values[r]] for r in self.rows},
            "markers": {f"{r}|{self.columns[i].name}": m for (r, i), m in sorted(self.markers.items())},
            "summary": {k: round(v, 4) for k, v in self.summary.items()},
        }


def rank_markers(rows: Sequence[str], values: dict[str, list[Optional[float]]],
                 columns: Sequence[Column]) -> dict[tuple[str, int], str]:
    """best / second / worst / second_worst per column; ties keep row order."""
    marks = {}
    for i, col in enumerate(columns):
        present = [(values[r][i], k, r) for k, r in enumerate(rows) if values[r][i] is not None]
        sign = 1.0 if col.lower_better else -1.0
        ranked = [r for _, _, r in sorted(present, key=lambda t: (sign * t[0], t[1]))]
        n = len(ranked)
        if n == 0:
            continue
        slots = [(0, "best")]
        if n >= 2:
            slots.append((n - 1, "worst"))
        if n >= 3:
            slots.append((1, "second"))
        if n >= 4:
            slots.append((n - 2, "second_worst"))
        for pos, name in slots:
            marks.setdefault((ranked[pos], i), name)
    return marks


def _rate_label(rate: float) -> str:
    return f"{rate * 100:g}"


def _mean(xs) -> Optional[float]:
    xs = list(xs)
    return float(np.mean(xs)) if xs else None


def _scaled(x: Optional[float]) -> Optional[float]:
    return None if x is None else M.report_value(x)


def _in(rate: float, rates: Sequence[float]) -> bool:
    return any(math.isclose(rate, r, abs_tol=1e-9) for r in rates)


def _relative(tables: Tables, setting: str, phase: str):
    out = []
    for seed in sorted(tables):
        t = tables[seed].get(setting)
        if t is not None:
            out += [(seed, k, v) for k, v in t.relative(phase)]
    return out


def _tasks(records) -> list[str]:
    present = {k.task for _, k, *_ in records}
    return [t for t in TASK_ORDER if t in present] + sorted(present - set(TASK_ORDER))


def _all_rates(records) -> list[float]:
    return sorted({k.rate for _, k, *_ in records})


def _settings(tables: Tables) -> list[str]:
    seen = {}
    for by_setting in tables.values():
        for s in by_setting:
            seen[s] = True
    return list(seen)


def _finish(track, columns, rows, values, summary=None, meta=None) -> TrackReport:
    if not rows:
        raise EmptyTrack(f"no data for track {track!r}")
    rep = TrackReport(track, columns, rows, values, summary or {}, meta or {})
    rep.markers = rank_markers(rows, values, columns)
    return rep


def alloc_report(tables: Tables, om_rates: Sequence[float]) -> TrackReport:
    settings = [s for s in _settings(tables) if s.startswith("alloc-")]
    order = {a: i for i, a in enumerate(ALLOC_ORDER)}
    settings.sort(key=lambda s: (order.get(s[6:], len(order)), s))
    per_row = {s: _relative(tables, s, "sparse") for s in settings}
    everything = [r for recs in per_row.values() for r in recs]
    tasks, rates = _tasks(everything), _all_rates(everything)
    columns = []
    for t in tasks:
        columns += [Column(f"{t}:{_rate_label(r)}") for r in rates] + [Column(f"{t}:MS")]
    columns.append(Column("OM_alloc"))
    rows, values = [], {}
    for s in settings:
        label = ALLOC_LABELS.get(s[6:], s[6:])
        recs = per_row[s]
        vals, ms = [], {}
        for t in tasks:
            for r in rates:
                vals.append(_scaled(_mean(v for _, k, v in recs if k.task == t and k.rate == r)))
            m = _mean(v for _, k, v in recs if k.task == t and _in(k.rate, om_rates))
            if m is not None:
                ms[t] = m
            vals.append(_scaled(m))
        vals.append(_scaled(M.om_alloc(ms)) if ms else None)
        rows.append(label)
        values[label] = vals
    return _finish("alloc", columns, rows, values, meta={"phase": "sparse (no reconstruction)"})


def _gains(tables: Tables, setting: str):
    out = []
    for seed in sorted(tables):
        t = tables[seed].get(setting)
        if t is not None:
            out += [(seed, k, a, g, o) for k, a, g, o in t.gains()]
    return out


def _recon_term(recs) -> Optional[float]:
    if not recs:
        return None
    orient = recs[0][4]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        try:
            return M.recon_term(orient, [a for _, _, a, _, _ in recs], [g for _, _, _, g, _ in recs])
        except M.MetricError:
            return None


def recon_report(tables: Tables, om_rates: Sequence[float]) -> TrackReport:
    present = set(_settings(tables))
    chosen = [(label, f"recon-{tag}") for label, tag in RECON_ROWS if f"recon-{tag}" in present]
    per_row = {s: _gains(tables, s) for _, s in chosen}
    everything = [r for recs in per_row.values() for r in recs]
    tasks, rates = _tasks(everything), _all_rates(everything)
    columns = []
    for t in tasks:
        columns += [Column(f"{t}:{_rate_label(r)}") for r in rates] + [Column(f"{t}:MS")]
    columns.append(Column("OM_recon"))
    rows, values = [], {}
    for label, s in chosen:
        recs = per_row[s]
        vals, ms = [], {}
        for t in tasks:
            for r in rates:
                vals.append(_scaled(_recon_term([x for x in recs if x[1].task == t and x[1].rate == r])))
            m = _recon_term([x for x in recs if x[1].task == t and _in(x[1].rate, om_rates)])
            if m is not None:
                ms[t] = m
            vals.append(_scaled(m))
        vals.append(_scaled(M.om_recon(ms)) if ms else None)
        rows.append(label)
        values[label] = vals
    return _finish("recon", columns, rows, values, meta={"gain": "A^{s,r} - A^s"})


def _family_records(tables: Tables, task: str):
    recs = [x for x in _relative(tables, REFERENCE_SETTING, "sparse_reconstructed") if x[1].task == task]
    fams = {k.arch for _, k, _ in recs}
    order = [f for f in FAMILY_ORDER if f in fams] + sorted(fams - set(FAMILY_ORDER))
    return recs, order


def _size_means(recs, family: str, om_rates) -> dict[str, float]:
    sizes = sorted({k.size for _, k, _ in recs if k.arch == family},
                   key=lambda s: (SIZE_ORDER.index(s) if s in SIZE_ORDER else len(SIZE_ORDER), s))
    out = {}
    for size in sizes:
        m = _mean(v for _, k, v in recs if k.arch == family and k.size == size and _in(k.rate, om_rates))
        if m is not None:
            out[size] = m
    return out


def arch_report(tables: Tables, om_rates: Sequence[float], task: str = "cls") -> TrackReport:
    recs, families = _family_records(tables, task)
    rates = _all_rates(recs)
    columns = [Column(_rate_label(r)) for r in rates] + [Column("OM_arch"), Column("OM_robust", True)]
    rows, values = [], {}
    for fam in families:
        vals = [_scaled(_mean(v for _, k, v in recs if k.arch == fam and k.rate == r)) for r in rates]
        sm = _size_means(recs, fam, om_rates)
        vals.append(_scaled(M.om_arch(list(sm.values()))) if sm else None)
        vals.append(_scaled(M.om_robust(list(sm.values()))) if len(sm) >= 2 else None)
        rows.append(fam)
        values[fam] = vals
    return _finish("arch", columns, rows, values,
                   meta={"setting": REFERENCE_SETTING, "task": task, "std": "population"})


def robust_report(tables: Tables, om_rates: Sequence[float], task: str = "cls") -> TrackReport:
    recs, families = _family_records(tables, task)
    sizes = [s for s in SIZE_ORDER if any(k.size == s for _, k, _ in recs)]
    sizes += sorted({k.size for _, k, _ in recs} - set(sizes))
    columns = [Column(f"size:{s}") for s in sizes] + [Column("OM_robust", True)]
    rows, values = [], {}
    for fam in families:
        sm = _size_means(recs, fam, om_rates)
        vals = [_scaled(sm.get(s)) for s in sizes]
        vals.append(_scaled(M.om_robust(list(sm.values()))) if len(sm) >= 2 else None)
        rows.append(fam)
        values[fam] = vals
    return _finish("robust", columns, rows, values,
                   meta={"setting": REFERENCE_SETTING, "task": task, "std": "population"})


def task_report(tables: Tables, om_rates: Sequence[float]) -> TrackReport:
    recs = _relative(tables, REFERENCE_SETTING, "sparse_reconstructed")
    tasks, rates = _tasks(recs), _all_rates(recs)
    columns = [Column(_rate_label(r)) for r in rates] + [Column("OM_task")]
    rows, values, means = [], {}, []
    for t in tasks:
        vals = [_scaled(_mean(v for _, k, v in recs if k.task == t and k.rate == r)) for r in rates]
        m = _mean(v for _, k, v in recs if k.task == t and _in(k.rate, om_rates))
        vals.append(_scaled(M.om_task([m])) if m is not None else None)
        if m is not None:
            means.append(m)
        rows.append(t)
        values[t] = vals
    summary = {"OM_task": M.report_value(M.om_task(means))} if means else {}
    return _finish("task", columns, rows, values, summary, meta={"setting": REFERENCE_SETTING})


BUILDERS = {
    "alloc": alloc_report,
    "recon": recon_report,
    "arch": arch_report,
    "robust": robust_report,
    "task": task_report,
}


def build_report(tables: Tables, track: str, om_rates: Sequence[float] = (0.5, 0.6, 0.7, 0.8)) -> TrackReport:
    if track not in BUILDERS:
        raise ValueError(f"unknown track {track!r}; choose from {TRACKS}")
    return BUILDERS[track](tables, om_rates)


def _fmt(v: Optional[float]) -> str:
    return "-" if v is None else f"{v:.2f}"


def render_csv(rep: TrackReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["row"] + [c.name for c in rep.columns])
    for r in rep.rows:
        w.writerow([r] + [_fmt(v) for v in rep.values[r]])
    return buf.getvalue()


def render_text(rep: TrackReport) -> str:
    head = ["row"] + [c.name for c in rep.columns]
    body = []
    for r in rep.rows:
        cells = [r]
        for i, v in enumerate(rep.values[r]):
            mark = rep.markers.get((r, i))
            cells.append(_fmt(v) + (MARK_SYMBOL[mark] if mark else ""))
        body.append(cells)
    widths = [max(len(x) for x in col) for col in zip(head, *body)]
    lines = ["  ".join(h.rjust(wd) if i else h.ljust(wd) for i, (h, wd) in enumerate(zip(head, widths)))]
    lines.append("  ".join("-" * wd for wd in widths))
    for cells in body:
        lines.append("  ".join(c.rjust(wd) if i else c.ljust(wd) for i, (c, wd) in enumerate(zip(cells, widths))))
    for k, v in rep.summary.items():
        lines.append(f"{k} (all rows): {v:.2f}")
    lines.append("markers: [B] best, [b] second, [W] worst, [w] second worst"
                 + ("; OM_robust: lower is better" if any(c.lower_better for c in rep.columns) else ""))
    return "\n".join(lines) + "\n"


def write_reports(tables: Tables, out_dir, rates: Sequence[float] = (0.5, 0.6, 0.7, 0.8),
                  metadata: Optional[dict] = None,
                  om_rates: Sequence[float] = (0.5, 0.6, 0.7, 0.8)) -> dict[str, TrackReport]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    reports = {}
    for track in TRACKS:
        try:
            rep = build_report(tables, track, om_rates)
        except EmptyTrack:
            continue
        reports[track] = rep
        (out / f"{track}.csv").write_text(render_csv(rep))
        (out / f"{track}.txt").write_text(render_text(rep))
    doc = {"tracks": {k: r.to_dict() for k, r in reports.items()},
           "meta": {"om_rates": list(om_rates), "scale": M.REPORT_SCALE,
                    "om_robust_std": "population", **(metadata or {})}}
    (out / "metrics.json").write_text(json.dumps(doc, indent=1, sort_keys=True, default=str))
    return reports
