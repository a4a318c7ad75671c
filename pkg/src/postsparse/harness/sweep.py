"""Benchmark sweeps: fixtures x rates x allocators x reconstruction settings x seeds.

Layout under ``out``::

    data/<task>/{train,test}.ptsd
    models/<fixture>.ptsm
    cells/<cell key>.json         one file per finished cell (resume marker)
    errors.jsonl                  quarantined per-cell failures
    scores/seed<k>/<setting>.csv  score tables
    reports/<track>.{csv,txt}, reports/metrics.json
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

from .. import io
from ..allocation import achieved_sparsity, allocate, apply_plan, layer_sparsity
from ..metrics import ScoreKey, ScoreTable, TaskScore
from ..reconstruction import ReconConfig, run_reconstruction
from . import report as reporting
from .data import Dataset, DatasetSpec, gen_dataset, load_dataset, sample_calibration, save_dataset
from .zoo import FAMILIES, SIZES, evaluate, train_fixture

log = logging.getLogger(__name__)

DEFAULT_RATES = (0.5, 0.6, 0.7, 0.8)
REFERENCE = ("block_wise", "sparse", False)
TRACK2_SETTINGS = (
    ("block_wise", "sparse", False),
    ("block_wise", "sparse", True),
    ("block_wise", "dense", False),
    ("single", "sparse", False),
    ("layer_wise", "sparse", False),
)


def subseed(root: int, *names) -> int:
    """Stable 63-bit seed derived from the root seed and a name path."""
    text = "/".join([str(root), *map(str, names)])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little") >> 1


@dataclass(frozen=True)
class FixtureSpec:
    family: str
    size: str
    task: str = "cls"

    @property
    def name(self) -> str:
        return f"{self.family}-{self.size}-{self.task}"

    @classmethod
    def parse(cls, text: str) -> "FixtureSpec":
        parts = text.split("-")
        if len(parts) not in (2, 3):
            raise ValueError(f"fixture must look like family-size[-task], got {text!r}")
        spec = cls(*parts)
        if spec.family not in FAMILIES or spec.size not in SIZES or spec.task not in ("cls", "den"):
            raise ValueError(f"unknown fixture {text!r}")
        return spec


def default_fixtures() -> list[FixtureSpec]:
    cls_zoo = [FixtureSpec(f, s, "cls") for f in FAMILIES for s in SIZES]
    return cls_zoo + [FixtureSpec(f, "s", "den") for f in FAMILIES]


def setting_tag(granularity: str, input_mode: str, error_correction: bool) -> str:
    gran = granularity.replace("_wise", "")
    return f"{gran}-{input_mode}-{'ec' if error_correction else 'noec'}"


REFERENCE_TAG = setting_tag(*REFERENCE)


@dataclass
class SweepConfig:
    out: Path
    fixtures: list[FixtureSpec] = field(default_factory=default_fixtures)
    rates: tuple[float, ...] = DEFAULT_RATES
    allocators: tuple[str, ...] = ("uniform", "magnitude", "erk")
    recon: tuple[tuple[str, str, bool], ...] = TRACK2_SETTINGS
    seeds: tuple[int, ...] = (0, 1, 2)
    root_seed: int = 0
    keep_last_dense: bool = False
    calib_count: int = 256
    batch_size: int = 32
    iterations: int = 2000
    lr: float = 1e-4
    momentum: float = 0.9
    train_epochs: int = 15
    noise: float = 1.0
    workers: int = 1

    def __post_init__(self):
        self.out = Path(self.out)
        self.rates = tuple(float(r) for r in self.rates)
        if any(not 0 <= r < 1 for r in self.rates):
            raise ValueError("rates must lie in [0, 1)")

    @classmethod
    def paper_scale(cls, out, **kw) -> "SweepConfig":
        kw.setdefault("calib_count", 1024)
        kw.setdefault("batch_size", 64)
        kw.setdefault("iterations", 20000)
        return cls(out, **kw)

    def dataset_spec(self, task: str) -> DatasetSpec:
        return DatasetSpec(task=task, noise=self.noise if task == "cls" else 0.3)

    def metadata(self) -> dict:
        d = asdict(self)
        d["out"] = str(self.out)
        d["fixtures"] = [f.name for f in self.fixtures]
        d["subseeds"] = {
            "dataset": "sha256(root/dataset/<task>)",
            "train": "sha256(root/train/<fixture>)",
            "calibration": "sha256(root/calib/<task>/<seed>)",
            "shuffle": "sha256(root/shuffle/<cell key>)",
        }
        d["om_robust_std"] = "population"
        return d


@dataclass(frozen=True)
class Cell:
    fixture: FixtureSpec
    rate: float
    allocator: str
    recon: Optional[tuple[str, str, bool]]
    seed: int

    @property
    def setting(self) -> str:
        if self.recon is None:
            return f"alloc-{self.allocator}"
        return f"recon-{setting_tag(*self.recon)}"

    @property
    def key(self) -> str:
        return f"{self.fixture.name}__r{self.rate:.4f}__{self.setting}__s{self.seed}"


def plan_cells(cfg: SweepConfig) -> list[Cell]:
    cells = []
    for seed in cfg.seeds:
        for fx in cfg.fixtures:
            for rate in cfg.rates:
                for alloc in cfg.allocators:
                    cells.append(Cell(fx, rate, alloc, None, seed))
                for rc in cfg.recon:
                    cells.append(Cell(fx, rate, "magnitude", tuple(rc), seed))
    # at most once per (fixture, rate, allocator, recon, seed)
    return list(dict.fromkeys(cells))


# ---------------------------------------------------------------------------
# Preparation
# ---------------------------------------------------------------------------


def prepare_datasets(cfg: SweepConfig) -> dict[str, Dataset]:
    out = {}
    for task in sorted({f.task for f in cfg.fixtures}):
        d = cfg.out / "data" / task
        if not (d / "test.ptsd").exists():
            save_dataset(gen_dataset(cfg.dataset_spec(task), subseed(cfg.root_seed, "dataset", task)), d)
        out[task] = load_dataset(d)
    return out


def model_path(cfg: SweepConfig, fx: FixtureSpec) -> Path:
    return cfg.out / "models" / f"{fx.name}.ptsm"


def prepare_fixtures(cfg: SweepConfig, datasets: dict[str, Dataset]) -> dict[str, float]:
    scores = {}
    for fx in cfg.fixtures:
        path = model_path(cfg, fx)
        if path.exists():
            scores[fx.name] = evaluate(io.load_model(path), datasets[fx.task]).value
            continue
        t0 = time.perf_counter()
        _, score = train_fixture(fx.family, fx.size, datasets[fx.task], cfg.train_epochs,
                                 subseed(cfg.root_seed, "train", fx.name), path)
        scores[fx.name] = score.value
        log.info("trained %s: score %.4f (%.1fs)", fx.name, score.value, time.perf_counter() - t0)
    return scores


# ---------------------------------------------------------------------------
# Cells
# ---------------------------------------------------------------------------


def run_cell(cfg: SweepConfig, cell: Cell, ds: Dataset) -> dict:
    fx = cell.fixture
    dense = io.load_model(model_path(cfg, fx))
    dense_score = evaluate(dense, ds)
    plan = allocate(dense, cell.allocator, cell.rate, cfg.keep_last_dense)
    masks, sparse = apply_plan(dense, plan)
    sparse_score = evaluate(sparse, ds)
    result = {
        "key": cell.key,
        "fixture": fx.name,
        "family": fx.family,
        "size": fx.size,
        "task": fx.task,
        "dataset": ds.name,
        "rate": cell.rate,
        "allocator": cell.allocator,
        "setting": cell.setting,
        "seed": cell.seed,
        "orientation": dense_score.orientation,
        "dense": dense_score.value,
        "sparse": sparse_score.value,
        "achieved_sparsity": achieved_sparsity(masks),
        "plan": plan.rates,
    }
    if cell.recon is not None:
        gran, mode, ec = cell.recon
        rc = ReconConfig(granularity=gran, input_mode=mode, error_correction=ec, lr=cfg.lr,
                         momentum=cfg.momentum, iterations=cfg.iterations, batch_size=cfg.batch_size,
                         seed=subseed(cfg.root_seed, "shuffle", cell.key))
        calib = sample_calibration(ds, cfg.calib_count, subseed(cfg.root_seed, "calib", fx.task, cell.seed))
        before = layer_sparsity(sparse)
        recon, rep = run_reconstruction(dense, sparse, masks, calib, rc)
        result["reconstructed"] = evaluate(recon, ds).value
        result["sparsity_preserved"] = layer_sparsity(recon) == before
        result["units"] = [
            {"output": u.unit.output, "members": list(u.unit.members), "initial_loss": u.initial_loss,
             "final_loss": u.final_loss, "aborted": u.aborted, "diagnostic": u.diagnostic}
            for u in rep.units
        ]
    return result


def _cell_path(cfg: SweepConfig, cell: Cell) -> Path:
    return cfg.out / "cells" / f"{cell.key}.json"


def _execute(cfg: SweepConfig, cell: Cell) -> tuple[str, Optional[dict], Optional[str]]:
    try:
        ds = load_dataset(cfg.out / "data" / cell.fixture.task)
        t0 = time.perf_counter()
        res = run_cell(cfg, cell, ds)
        path = _cell_path(cfg, cell)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(res, indent=1, sort_keys=True))
        os.replace(tmp, path)
        log.info("cell %s done in %.1fs", cell.key, time.perf_counter() - t0)
        return cell.key, res, None
    except Exception:  # quarantined, the sweep goes on
        return cell.key, None, traceback.format_exc()


def run_cells(cfg: SweepConfig, cells: list[Cell]) -> dict[str, dict]:
    results: dict[str, dict] = {}
    todo = []
    for cell in cells:
        path = _cell_path(cfg, cell)
        if path.exists():
            results[cell.key] = json.loads(path.read_text())
        else:
            todo.append(cell)
    errors = []
    if cfg.workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            outcomes = list(pool.map(_execute, [cfg] * len(todo), todo))
    else:
        outcomes = [_execute(cfg, c) for c in todo]
    for key, res, err in outcomes:
        if err is None:
            results[key] = res
        else:
            log.error("cell %s failed:\n%s", key, err)
            errors.append({"cell": key, "error": err})
    if errors:
        with open(cfg.out / "errors.jsonl", "a") as fh:
            for e in errors:
                fh.write(json.dumps(e) + "\n")
    return results


# ---------------------------------------------------------------------------
# Score tables
# ---------------------------------------------------------------------------


def build_tables(results: dict[str, dict]) -> dict[int, dict[str, ScoreTable]]:
    """Group cell results into ScoreTables keyed by seed then setting."""
    tables: dict[int, dict[str, ScoreTable]] = {}
    for res in sorted(results.values(), key=lambda r: r["key"]):
        t = tables.setdefault(res["seed"], {}).setdefault(res["setting"], ScoreTable())
        base = ScoreKey(res["task"], res["family"], res["size"], res["dataset"], res["rate"], "dense")
        o = res["orientation"]
        t.add(base, TaskScore(res["dense"], o))
        t.add(base.with_phase("sparse"), TaskScore(res["sparse"], o))
        if "reconstructed" in res:
            t.add(base.with_phase("sparse_reconstructed"), TaskScore(res["reconstructed"], o))
    return tables


def write_tables(cfg: SweepConfig, tables: dict[int, dict[str, ScoreTable]]) -> list[Path]:
    paths = []
    for seed, by_setting in sorted(tables.items()):
        for setting, table in sorted(by_setting.items()):
            table.validate()
            p = cfg.out / "scores" / f"seed{seed}" / f"{setting}.csv"
            table.save(p)
            paths.append(p)
    return paths


def load_tables(scores_dir) -> dict[int, dict[str, ScoreTable]]:
    tables: dict[int, dict[str, ScoreTable]] = {}
    root = Path(scores_dir)
    for seed_dir in sorted(root.glob("seed*")):
        seed = int(seed_dir.name[4:])
        for f in sorted(seed_dir.glob("*.csv")):
            tables.setdefault(seed, {})[f.stem] = ScoreTable.load(f)
    if not tables:
        raise FileNotFoundError(f"no score tables under {root}")
    return tables


@dataclass
class SweepResult:
    results: dict[str, dict]
    tables: dict[int, dict[str, ScoreTable]]
    table_paths: list[Path]
    reports: dict[str, reporting.TrackReport]
    errors: int


def run_sweep(cfg: SweepConfig) -> SweepResult:
    cfg.out.mkdir(parents=True, exist_ok=True)
    datasets = prepare_datasets(cfg)
    prepare_fixtures(cfg, datasets)
    cells = plan_cells(cfg)
    log.info("%d cells", len(cells))
    results = run_cells(cfg, cells)
    tables = build_tables(results)
    paths = write_tables(cfg, tables)
    reports = reporting.write_reports(tables, cfg.out / "reports", rates=cfg.rates,
                                      metadata=cfg.metadata())
    return SweepResult(results, tables, paths, reports, len(cells) - len(results))
