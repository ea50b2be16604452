import csv
import io
import xml.etree.ElementTree as ET
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hiertask.config import ExperimentConfig, SweepSpec, config_from_dict, load_sweep
from hiertask.data import SyntheticSpec
from hiertask.errors import ConfigurationError, SchemaError
from hiertask.harness import (
    CSV_COLUMNS,
    PLOT_HEIGHT,
    emit_plots,
    read_results,
    report_accounting,
    rows_to_csv,
    run_point,
    run_sweep,
)
from hiertask.layers import DenseLayer

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
TINY = SyntheticSpec(num_makes=3, models_per_make=2, dim=6, n_per_model=10, seed=3)
BASE = ExperimentConfig(dataset=TINY, epochs=3, batch_size=8, feature_dim=6, base_lr=1e-2)
SVG = "{http://www.w3.org/2000/svg}"


def strip_wall(text):
    return [row[:-1] for row in csv.reader(io.StringIO(text))]


class TestConfig:
    def test_weights_pair_and_synthetic_table(self):
        cfg = config_from_dict({"weights": [0.5, 0.5], "dataset": {"synthetic": {"num_makes": 2}}})
        assert (cfg.lambda1, cfg.lambda2) == (0.5, 0.5)
        assert cfg.dataset.num_makes == 2

    def test_manifest_path_relative_to_file(self, tmp_path):
        cfg = config_from_dict({"dataset": {"manifest": "m.csv"}}, tmp_path)
        assert cfg.dataset == str(tmp_path / "m.csv")

    @pytest.mark.parametrize("bad", [
        {"lambda1": 0.0, "lambda2": 0.0},
        {"lambda1": -0.1},
        {"dropout": 1.0},
        {"mode": "stacked"},
        {"encoder": "resnet"},
        {"colour": "red"},
    ])
    def test_invalid(self, bad):
        with pytest.raises(ConfigurationError):
            config_from_dict(bad)

    def test_run_id_is_content_derived(self):
        cfg = ExperimentConfig(mode="cascaded", lambda1=0.2, lambda2=0.8, dropout=0.25, seed=4)
        assert cfg.run_id == "mlp-cascaded-l0.2_0.8-p0.25-s4"

    def test_sweep_file_expands_to_grid(self):
        spec = load_sweep(CONFIGS / "sweep_grid.toml")
        points = spec.points()
        assert len(points) == len(spec) == 27
        assert len({p.run_id for p in points}) == 27

    def test_empty_axis_rejected(self):
        with pytest.raises(ConfigurationError):
            SweepSpec(BASE, modes=())


class TestSweep:
    def test_single_point(self, tmp_path):
        res = run_sweep([BASE], tmp_path)
        lines = res.results_csv.read_text().splitlines()
        assert len(lines) == 2
        assert lines[0] == ",".join(CSV_COLUMNS)
        assert (tmp_path / "runs" / f"{BASE.run_id}.htmt").exists()
        assert len((tmp_path / "runs" / f"{BASE.run_id}.jsonl").read_text().splitlines()) == 3

    def test_nine_point_grid(self, tmp_path):
        spec = SweepSpec(BASE, weights=((0.9, 0.1), (0.5, 0.5), (0.2, 0.8)))
        res = run_sweep(spec, tmp_path)
        rows = read_results(res.results_csv)
        assert len(rows) == 9 and res.ok
        for r in rows:
            assert all(r[c] != "" for c in CSV_COLUMNS if c not in ("make_acc_direct", "consistency"))
            assert (r["make_acc_direct"] == "") == (r["mode"] == "single_task")
        summary = res.summary_path.read_text().splitlines()
        assert len(summary) == 2 + 9

    def test_rerun_identical_and_order_free(self, tmp_path):
        spec = SweepSpec(BASE, dropouts=(0.0, 0.5))
        a = run_sweep(spec, tmp_path / "a").results_csv.read_text()
        b = run_sweep(list(reversed(spec.points())), tmp_path / "b").results_csv.read_text()
        assert strip_wall(a) == strip_wall(b)
        ra = (tmp_path / "a" / "runs" / f"{BASE.run_id}.htmt").read_bytes()
        rb = (tmp_path / "b" / "runs" / f"{BASE.run_id}.htmt").read_bytes()
        assert ra == rb

    def test_parallel_jobs_match_serial(self, tmp_path):
        spec = SweepSpec(BASE, modes=("parallel", "cascaded"))
        a = run_sweep(spec, tmp_path / "a", jobs=1).results_csv.read_text()
        b = run_sweep(spec, tmp_path / "b", jobs=2).results_csv.read_text()
        assert strip_wall(a) == strip_wall(b)

    def test_failure_recorded_and_sweep_continues(self, tmp_path):
        bad = replace(BASE, dataset=str(tmp_path / "missing.csv"), seed=9)
        res = run_sweep([BASE, bad], tmp_path / "out")
        assert not res.ok
        assert len(res.rows) == 1
        failures = (tmp_path / "out" / "failures.csv").read_text()
        assert bad.run_id in failures and "missing.csv" in failures

    def test_row_reproducible_from_config(self):
        a, b = run_point(BASE), run_point(BASE)
        a.pop("wall_ms"), b.pop("wall_ms")
        assert a == b

    @settings(max_examples=5, deadline=None)
    @given(st.permutations(range(4)))
    def test_csv_order_is_canonical(self, order):
        rows = [{c: f"{c}{i}" for c in CSV_COLUMNS} for i in range(4)]
        assert rows_to_csv([rows[i] for i in order]) == rows_to_csv(rows)


def _bars(svg_path):
    root = ET.parse(svg_path).getroot()
    return [r for r in root.iter(f"{SVG}rect") if r.get("class") == "bar"]


class TestPlots:
    def _csv(self, tmp_path, rows):
        path = tmp_path / "results.csv"
        path.write_text(rows_to_csv(rows))
        return path

    def _row(self, **kw):
        row = {c: "" for c in CSV_COLUMNS}
        row.update(encoder="mlp", lambda1="0.9", lambda2="0.1", dropout="0.0", seed="0")
        row.update(kw)
        row["run_id"] = f"{row['encoder']}-{row['mode']}-{row['lambda1']}-{row['dropout']}-{row['seed']}"
        return row

    def test_empty_results(self, tmp_path):
        paths = emit_plots(self._csv(tmp_path, []), tmp_path)
        assert len(paths) == 1
        assert _bars(paths[0]) == []
        assert ET.parse(paths[0]).getroot().find(f"{SVG}g[@class='axes']") is not None

    def test_groups_and_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        rows, truth = [], {}
        for l1, l2 in [("0.9", "0.1"), ("0.5", "0.5"), ("0.2", "0.8")]:
            for mode in ("single_task", "parallel", "cascaded"):
                v = float(rng.uniform())
                truth[(f"{l1},{l2}", mode)] = v
                rows.append(self._row(mode=mode, lambda1=l1, lambda2=l2, model_acc=repr(v)))
        (path,) = emit_plots(self._csv(tmp_path, rows), tmp_path)
        bars = _bars(path)
        assert len(bars) == 9
        assert len({b.get("data-weights") for b in bars}) == 3
        for b in bars:
            value = truth[(b.get("data-weights"), b.get("data-mode"))]
            assert float(b.get("data-value")) == value
            assert abs(float(b.get("height")) - value * PLOT_HEIGHT) < 1e-5

    def test_seed_mean_and_dropout_split(self, tmp_path):
        rows = [self._row(mode="parallel", model_acc="0.5", seed="0"),
                self._row(mode="parallel", model_acc="1.0", seed="1"),
                self._row(mode="parallel", model_acc="0.25", dropout="0.5")]
        paths = emit_plots(self._csv(tmp_path, rows), tmp_path)
        assert [p.name for p in paths] == ["plot_model_acc_dropout0.0.svg", "plot_model_acc_dropout0.5.svg"]
        assert float(_bars(paths[0])[0].get("data-value")) == 0.75

    def test_deterministic_bytes(self, tmp_path):
        csv_path = self._csv(tmp_path, [self._row(mode="cascaded", model_acc="0.3")])
        a = emit_plots(csv_path, tmp_path / "a")[0].read_bytes()
        b = emit_plots(csv_path, tmp_path / "b")[0].read_bytes()
        assert a == b

    def test_missing_columns(self, tmp_path):
        path = tmp_path / "r.csv"
        path.write_text("run_id,encoder,mode\nx,mlp,parallel\n")
        with pytest.raises(SchemaError) as err:
            emit_plots(path, tmp_path)
        assert "model_acc" in str(err.value) and "wall_ms" in str(err.value)


class TestAccounting:
    def test_densenet_width_reproduction(self):
        rep = report_accounting(1024, 49, 196, 50_225, 9_604, 50_176, 9_604)
        assert rep.ok
        assert rep.value("parallel params delta") == 50_225
        assert rep.value("cascaded extra params delta") == 9_604
        assert rep.value("parallel FLOPs delta") == 50_176
        assert "FAIL" not in rep.render()

    def test_unit_triple(self):
        rep = report_accounting(1, 1, 1)
        assert rep.value("parallel params delta") == 2
        assert rep.value("cascaded extra params delta") == 1
        assert rep.value("parallel FLOPs delta") == 1

    def test_wrong_expectation_flagged(self):
        rep = report_accounting(1024, 49, 196, expect_parallel=50_000)
        assert not rep.ok and "FAIL" in rep.render()

    def test_non_positive_rejected(self):
        with pytest.raises(ConfigurationError):
            report_accounting(0, 1, 1)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 40), st.integers(1, 12), st.integers(1, 30))
    def test_matches_constructed_heads(self, d, k, m):
        rng = np.random.default_rng(0)
        make = DenseLayer.init(d, k, rng)
        plain, widened = DenseLayer.init(d, m, rng), DenseLayer.init(d + k, m, rng)
        count = lambda layer: sum(p.size for p in layer.parameters())
        rep = report_accounting(d, k, m)
        assert rep.value("parallel params delta") == count(make)
        assert rep.value("cascaded extra params delta") == count(widened) - count(plain)
        assert rep.value("parallel FLOPs delta") == make.weight.size
        assert rep.value("cascaded extra FLOPs delta") == widened.weight.size - plain.weight.size
