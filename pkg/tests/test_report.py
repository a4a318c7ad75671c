import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from postsparse import metrics as M
from postsparse.harness import report as R
from postsparse.harness.report import Column, EmptyTrack, build_report, rank_markers
from postsparse.metrics import LOWER, ScoreKey, ScoreTable, TaskScore


def add(tables, seed, setting, task, arch, size, rate, dense, sparse, recon=None, orient="higher_better"):
    t = tables.setdefault(seed, {}).setdefault(setting, ScoreTable())
    base = ScoreKey(task, arch, size, "d", rate, "dense")
    t.add(base, TaskScore(dense, orient))
    t.add(base.with_phase("sparse"), TaskScore(sparse, orient))
    if recon is not None:
        t.add(base.with_phase("sparse_reconstructed"), TaskScore(recon, orient))


def marker_oracle(values, lower_better):
    """Stable sort by goodness, then assign slots in priority order."""
    idx = [k for k, v in enumerate(values) if v is not None]
    order = sorted(idx, key=lambda k: values[k] if lower_better else -values[k])
    n = len(order)
    wanted = [("best", 0), ("worst", n - 1), ("second", 1), ("second_worst", n - 2)]
    minimum = {"best": 1, "worst": 2, "second": 3, "second_worst": 4}
    out = {}
    for name, pos in wanted:
        if n >= minimum[name] and order[pos] not in out:
            out[order[pos]] = name
    return out


class TestRankMarkers:
    @given(st.lists(st.one_of(st.none(), st.integers(0, 5).map(float)), min_size=1, max_size=8), st.booleans())
    def test_sort_oracle(self, col, lower):
        rows = [f"r{k}" for k in range(len(col))]
        values = {r: [v] for r, v in zip(rows, col)}
        got = rank_markers(rows, values, [Column("c", lower)])
        expected = {(rows[k], 0): m for k, m in marker_oracle(col, lower).items()}
        assert got == expected

    def test_single_row_is_best_everywhere(self):
        cols = [Column("a"), Column("b"), Column("c", True)]
        got = rank_markers(["only"], {"only": [1.0, 2.0, 3.0]}, cols)
        assert got == {("only", 0): "best", ("only", 1): "best", ("only", 2): "best"}

    def test_priority_with_two_rows(self):
        got = rank_markers(["a", "b"], {"a": [1.0], "b": [2.0]}, [Column("c")])
        assert got == {("b", 0): "best", ("a", 0): "worst"}

    def test_lower_better_column(self):
        rows = ["a", "b", "c", "d", "e"]
        values = {r: [float(i)] for i, r in enumerate(rows)}
        got = rank_markers(rows, values, [Column("std", True)])
        assert got == {("a", 0): "best", ("b", 0): "second", ("d", 0): "second_worst", ("e", 0): "worst"}

    def test_empty_column(self):
        assert rank_markers(["a"], {"a": [None]}, [Column("c")]) == {}


@pytest.fixture
def mixed():
    tables = {}
    for seed in (0, 1):
        for alloc, drop in (("alloc-erk", 0.1), ("alloc-uniform", 0.3), ("alloc-magnitude", 0.2)):
            for rate in (0.5, 0.6):
                add(tables, seed, alloc, "cls", "mlp", "s", rate, 0.8, 0.8 - drop * rate - 0.01 * seed)
                add(tables, seed, alloc, "den", "mlp", "s", rate, 0.2, 0.2 + drop * rate, orient=LOWER)
    return tables


class TestAllocReport:
    def test_column_and_row_order(self, mixed):
        rep = build_report(mixed, "alloc")
        assert [c.name for c in rep.columns] == ["cls:50", "cls:60", "cls:MS", "den:50", "den:60", "den:MS",
                                                 "OM_alloc"]
        assert rep.rows == ["Uniform", "L2Norm", "ERK"]

    def test_values(self, mixed):
        rep = build_report(mixed, "alloc")
        drop = 0.3
        cls = {r: np.mean([(0.8 - drop * r - 0.01 * s) / 0.8 for s in (0, 1)]) for r in (0.5, 0.6)}
        den = {r: 0.2 / (0.2 + drop * r) for r in (0.5, 0.6)}
        assert rep.value("Uniform", "cls:50") == pytest.approx(100 * cls[0.5])
        assert rep.value("Uniform", "den:60") == pytest.approx(100 * den[0.6])
        ms = {"cls": np.mean(list(cls.values())), "den": np.mean(list(den.values()))}
        assert rep.value("Uniform", "cls:MS") == pytest.approx(100 * ms["cls"])
        assert rep.value("Uniform", "OM_alloc") == pytest.approx(100 * math.sqrt((ms["cls"] ** 2 + ms["den"] ** 2) / 2))

    def test_markers(self, mixed):
        rep = build_report(mixed, "alloc")
        i = rep.column_index("OM_alloc")
        assert rep.markers[("ERK", i)] == "best"
        assert rep.markers[("Uniform", i)] == "worst"
        assert rep.markers[("L2Norm", i)] == "second"

    def test_om_rates_restrict_ms(self, mixed):
        rep = build_report(mixed, "alloc", om_rates=(0.5,))
        assert rep.value("ERK", "cls:MS") == pytest.approx(rep.value("ERK", "cls:50"))

    def test_render(self, mixed):
        rep = build_report(mixed, "alloc")
        csv_lines = R.render_csv(rep).splitlines()
        assert csv_lines[0] == "row,cls:50,cls:60,cls:MS,den:50,den:60,den:MS,OM_alloc"
        assert csv_lines[1].startswith("Uniform,")
        assert all(len(c.split(".")[1]) == 2 for c in csv_lines[1].split(",")[1:])
        text = R.render_text(rep)
        assert "[B]" in text and "[W]" in text


class TestReconReport:
    def test_gen_and_cls_terms(self):
        tables = {}
        add(tables, 0, "recon-block-sparse-noec", "cls", "mlp", "s", 0.5, 0.8, 0.4, 0.6)
        add(tables, 0, "recon-block-sparse-noec", "den", "mlp", "s", 0.5, 10.0, 40.0, 20.0, orient=LOWER)
        add(tables, 0, "recon-block-sparse-ec", "cls", "mlp", "s", 0.5, 0.8, 0.4, 0.7)
        rep = build_report(tables, "recon")
        assert rep.rows == ["w/ Correction", "w/o Correction", "Sparse Input", "Block-wise"]
        assert rep.value("w/o Correction", "cls:MS") == pytest.approx(100 * 0.2 / 0.8)
        assert rep.value("w/o Correction", "den:MS") == pytest.approx(100 * math.exp(10.0 / -20.0))
        om = math.sqrt(((0.25) ** 2 + math.exp(-0.5) ** 2) / 2)
        assert rep.value("w/o Correction", "OM_recon") == pytest.approx(100 * om)
        assert rep.value("w/ Correction", "den:MS") is None
        assert rep.value("w/ Correction", "OM_recon") == pytest.approx(100 * 0.3 / 0.8)

    def test_zero_gain_record_dropped(self):
        tables = {}
        add(tables, 0, "recon-block-sparse-noec", "den", "mlp", "s", 0.5, 10.0, 40.0, 40.0, orient=LOWER)
        rep = build_report(tables, "recon")
        assert rep.value("Block-wise", "OM_recon") is None


@pytest.fixture
def zoo_tables():
    tables = {}
    rel = {("mlp", "s"): 0.6, ("mlp", "m"): 0.8, ("rescnn", "s"): 0.9, ("rescnn", "m"): 0.9}
    for (fam, size), v in rel.items():
        for rate in (0.5, 0.7):
            add(tables, 0, R.REFERENCE_SETTING, "cls", fam, size, rate, 1.0, 0.5, v)
    add(tables, 0, R.REFERENCE_SETTING, "den", "mlp", "s", 0.5, 1.0, 2.0, 1.25, orient=LOWER)
    return tables


class TestArchRobustTask:
    def test_arch(self, zoo_tables):
        rep = build_report(zoo_tables, "arch")
        assert rep.rows == ["mlp", "rescnn"]
        assert [c.name for c in rep.columns] == ["50", "70", "OM_arch", "OM_robust"]
        assert rep.value("mlp", "OM_arch") == pytest.approx(70.7107, abs=1e-4)
        assert rep.value("mlp", "OM_robust") == pytest.approx(10.0)
        assert rep.value("rescnn", "OM_robust") == pytest.approx(0.0)
        assert rep.markers[("rescnn", rep.column_index("OM_robust"))] == "best"

    def test_robust(self, zoo_tables):
        rep = build_report(zoo_tables, "robust")
        assert [c.name for c in rep.columns] == ["size:s", "size:m", "OM_robust"]
        assert rep.value("mlp", "size:s") == pytest.approx(60.0)

    def test_task(self, zoo_tables):
        rep = build_report(zoo_tables, "task")
        assert rep.rows == ["cls", "den"]
        cls = np.mean([0.6, 0.8, 0.9, 0.9])
        assert rep.value("cls", "OM_task") == pytest.approx(100 * cls)
        assert rep.value("den", "OM_task") == pytest.approx(80.0)
        assert rep.summary["OM_task"] == pytest.approx(100 * math.sqrt((cls ** 2 + 0.8 ** 2) / 2))

    def test_only_reference_setting_counts(self, zoo_tables):
        add(zoo_tables, 0, "recon-single-sparse-noec", "cls", "plainconv", "s", 0.5, 1.0, 0.5, 0.1)
        assert "plainconv" not in build_report(zoo_tables, "arch").rows


class TestErrorsAndFiles:
    def test_empty_track(self):
        with pytest.raises(EmptyTrack):
            build_report({}, "alloc")

    def test_unknown_track(self, mixed):
        with pytest.raises(ValueError):
            build_report(mixed, "speed")

    def test_write_reports_skips_empty(self, mixed, tmp_path):
        reps = R.write_reports(mixed, tmp_path, metadata={"note": "x"})
        assert set(reps) == {"alloc"}
        assert (tmp_path / "alloc.csv").exists() and not (tmp_path / "task.csv").exists()
        doc = json.loads((tmp_path / "metrics.json").read_text())
        assert doc["meta"]["note"] == "x"
        assert doc["tracks"]["alloc"]["columns"][-1] == "OM_alloc"

    def test_to_dict_rounds(self, mixed):
        d = build_report(mixed, "alloc").to_dict()
        for vals in d["rows"].values():
            assert all(v is None or round(v, 4) == v for v in vals)
        assert M.REPORT_SCALE == 100.0
