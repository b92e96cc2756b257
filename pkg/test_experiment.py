"""
扫描实验测试: 任务展开、聚合、报告文件与进程池消费者
"""
import json
import math

import numpy as np
import pandas as pd
import pytest
from pydantic import ValidationError

from app.consumers.sweep_consumer import SweepConsumer
from app.exceptions import ResourceException, SimulatorException
from app.models import Algorithm, AlgorithmOptions, ScenarioConfig, SweepSpec, SweepTask, TaskResult
from app.services.experiment import (
    PRESETS,
    RAW_COLUMNS,
    SUMMARY_COLUMNS,
    build_tasks,
    emit_reports,
    preset_spec,
    raw_frame,
    run_sweep,
    run_task,
    summarize,
    trace_filename,
)
from app.services.scenario import generate_channels
from app.services.sca import run_algorithm


def _result(algorithm, value, seed, nats=None, status="completed", iterations=3):
    if status != "completed":
        return TaskResult(algorithm=algorithm, value=value, seed=seed, status=status, error_msg="no start")
    return TaskResult(algorithm=algorithm, value=value, seed=seed, status=status,
                      objective_nats=nats, iterations=iterations, termination="converged")


def _synthetic_results():
    ln2 = math.log(2.0)
    return [
        _result(Algorithm.NOTA, 5, 0, 2.0 * ln2),
        _result(Algorithm.NOTA, 5, 1, 4.0 * ln2, iterations=5),
        _result(Algorithm.NOTA_RANDOM, 5, 0, 1.0 * ln2),
        _result(Algorithm.NOTA_RANDOM, 5, 1, 2.0 * ln2),
        _result(Algorithm.NOTA, 10, 0, 5.0 * ln2),
        _result(Algorithm.NOTA, 10, 1, status="infeasible"),
        _result(Algorithm.NOTA_RANDOM, 10, 0, status="infeasible"),
        _result(Algorithm.NOTA_RANDOM, 10, 1, status="failed"),
    ]


def _spec(small_config, tmp_path, **kwargs):
    fields = dict(param="num_irs_elements", values=[5, 10], seeds_per_point=2,
                  algorithms=["nota", "nota-random"], base=small_config, output_dir=tmp_path / "out")
    fields.update(kwargs)
    return SweepSpec(**fields)


class TestSweepSpec:
    def test_presets(self):
        spec = preset_spec("irs", seeds_per_point=3)
        assert spec.param == "num_irs_elements"
        assert spec.values == [5.0, 10.0, 20.0, 40.0]
        assert spec.seeds() == [0, 1, 2]
        for name in PRESETS:
            assert preset_spec(name).param in ScenarioConfig.model_fields

    def test_unknown_preset(self):
        with pytest.raises(SimulatorException):
            preset_spec("bandwidth")

    def test_values_sorted(self):
        assert SweepSpec(param="p_b_max_dbm", values=[25, 10, 15]).values == [10.0, 15.0, 25.0]

    @pytest.mark.parametrize("fields", [
        {"param": "p_b_max_dbm", "values": []},
        {"param": "carrier_hz", "values": [1.0]},
        {"param": "bs_position", "values": [0.0]},
        {"param": "num_ius", "values": [0.0, 2.0]},
        {"param": "num_irs_elements", "values": [-5.0]},
        {"param": "p_b_max_dbm", "values": [10.0], "overrides": {"rho": 2.0}},
        {"param": "p_b_max_dbm", "values": [10.0], "overrides": {"unknown": 1.0}},
        {"param": "p_b_max_dbm", "values": [10.0], "algorithms": ["greedy"]},
    ])
    def test_invalid(self, fields):
        with pytest.raises((ValidationError, ValueError)):
            SweepSpec(**fields)

    def test_config_at_rounds_integers(self):
        spec = SweepSpec(param="num_d2d_pairs", values=[2.0], overrides={"p_b_max_dbm": 15})
        cfg = spec.config_at(2.6)
        assert cfg.num_d2d_pairs == 3 and isinstance(cfg.num_d2d_pairs, int)
        assert cfg.p_b_max_dbm == 15.0

    def test_optional_field_is_sweepable(self):
        spec = SweepSpec(param="e_min_dbm", values=[-80.0, -90.0], base=ScenarioConfig(e_min_dbm=None))
        assert spec.values == [-90.0, -80.0]
        cfg = spec.config_at(-85.0)
        assert cfg.e_min_dbm == -85.0
        assert cfg.e_min == pytest.approx(10 ** -8.5)

    def test_config_at_validates(self):
        spec = SweepSpec(param="num_d2d_pairs", values=[1.0])
        assert spec.config_at(4.0).num_d2d_pairs == 4
        with pytest.raises(ValidationError):
            spec.config_at(-1.0)

    def test_config_hash(self):
        base = ScenarioConfig()
        assert base.config_hash() == ScenarioConfig().config_hash()
        assert base.config_hash() != ScenarioConfig(num_irs_elements=20).config_hash()

    def test_build_tasks_share_scenario(self, small_config, tmp_path):
        tasks = build_tasks(_spec(small_config, tmp_path))
        assert len(tasks) == 2 * 2 * 2
        first = [t for t in tasks if t.value == 5 and t.seed == 0]
        assert {t.algorithm for t in first} == {Algorithm.NOTA, Algorithm.NOTA_RANDOM}
        assert first[0].scenario == first[1].scenario
        assert first[0].scenario.num_irs_elements == 5


class TestAggregation:
    def test_raw_frame(self):
        raw = raw_frame(_synthetic_results())
        assert list(raw.columns) == RAW_COLUMNS
        assert list(raw["algorithm"]) == ["nota"] * 4 + ["nota_random"] * 4
        assert raw.loc[0, "objective_bps"] == pytest.approx(2.0)

    def test_summary(self):
        summary = summarize(raw_frame(_synthetic_results())).set_index(["algorithm", "value"])
        assert list(summary.reset_index().columns) == SUMMARY_COLUMNS
        row = summary.loc[("nota", 5)]
        assert row["mean_bps"] == pytest.approx(3.0)
        assert row["std_bps"] == pytest.approx(1.0)
        assert row["mean_iterations"] == pytest.approx(4.0)
        assert row["improvement_pct"] == pytest.approx(100.0)
        assert summary.loc[("nota_random", 5), "mean_bps"] == pytest.approx(1.5)
        assert math.isnan(summary.loc[("nota_random", 5), "improvement_pct"])

    def test_infeasible_seeds_excluded(self):
        summary = summarize(raw_frame(_synthetic_results())).set_index(["algorithm", "value"])
        row = summary.loc[("nota", 10)]
        assert row["mean_bps"] == pytest.approx(5.0)
        assert row["feasibility_rate"] == pytest.approx(0.5)
        assert not row["empty"]
        empty = summary.loc[("nota_random", 10)]
        assert empty["empty"] and empty["num_feasible"] == 0
        assert math.isnan(empty["mean_bps"])
        # 基线为空时不计算增益
        assert math.isnan(row["improvement_pct"])


class TestReports:
    def test_files_and_manifest(self, small_config, tmp_path):
        spec = _spec(small_config, tmp_path)
        results = _synthetic_results()
        report = emit_reports(spec, results, preset="irs")
        out = tmp_path / "out"
        assert {p.name for p in report.paths.values()} == {"raw.csv", "summary.csv", "manifest.json"}
        manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
        assert manifest["preset"] == "irs"
        assert manifest["seeds"] == [0, 1]
        assert manifest["config_hash"] == small_config.config_hash()
        assert "cvxopt" in manifest["versions"]
        assert len(manifest["task_wall_seconds"]) == len(results)
        assert not list(out.glob("plot_*.py"))

    def test_summary_recomputable_from_raw(self, small_config, tmp_path):
        emit_reports(_spec(small_config, tmp_path), _synthetic_results())
        raw = pd.read_csv(tmp_path / "out" / "raw.csv")
        summary = pd.read_csv(tmp_path / "out" / "summary.csv")
        feasible = raw[raw["status"] == "completed"]
        means = feasible.groupby(["algorithm", "value"])["objective_bps"].mean()
        for row in summary[~summary["empty"]].itertuples():
            assert row.mean_bps == pytest.approx(means[(row.algorithm, row.value)], rel=1e-10)

    def test_plot_script(self, small_config, tmp_path):
        report = emit_reports(_spec(small_config, tmp_path), _synthetic_results(), emit_plots=True)
        script = report.paths["plot"].read_text(encoding="utf-8")
        assert report.paths["plot"].name == "plot_num_irs_elements.py"
        assert "summary.csv" in script and "matplotlib" in script

    def test_output_dir_is_file(self, small_config, tmp_path):
        blocker = tmp_path / "blocker"
        blocker.write_text("x")
        with pytest.raises(ResourceException):
            emit_reports(_spec(small_config, tmp_path), _synthetic_results(), out_dir=blocker / "sub")


class TestTasks:
    def test_infeasible_task(self, small_config):
        task = SweepTask(algorithm=Algorithm.NOTA, value=30.0, seed=0,
                         scenario=small_config.model_copy(update={"e_min_dbm": 30.0}),
                         options=AlgorithmOptions(feas_max_rounds=2))
        result = run_task(task)
        assert result.status == "infeasible"
        assert result.error_msg
        assert not result.records

    def test_sweep_matches_direct_run(self, small_config, fast_options, tmp_path):
        spec = SweepSpec(param="num_d2d_pairs", values=[2], seeds_per_point=1, algorithms=["nota_random"],
                         base=small_config, options=fast_options, workers=1, output_dir=tmp_path)
        report = run_sweep(spec)
        (result,) = report.results
        assert result.status == "completed"

        channels = generate_channels(small_config, 0)
        trace = run_algorithm(channels, small_config, fast_options.model_copy(update={"rng_seed": 0}),
                              Algorithm.NOTA_RANDOM)
        assert result.objective_nats == pytest.approx(trace.objective, rel=1e-12)
        assert result.iterations == trace.iterations
        trace_csv = pd.read_csv(tmp_path / trace_filename(Algorithm.NOTA_RANDOM, 2, 0))
        np.testing.assert_allclose(trace_csv["objective"], trace.to_frame()["objective"], rtol=1e-10)

    def test_consumer_reports_failures(self, monkeypatch, small_config):
        def boom(task):
            raise RuntimeError("worker crashed")

        monkeypatch.setattr("app.consumers.sweep_consumer.run_task", boom)
        task = SweepTask(algorithm=Algorithm.OTA, value=1.0, seed=4, scenario=small_config,
                         options=AlgorithmOptions())
        consumer = SweepConsumer(workers=1)
        consumer.connect()
        try:
            (result,) = consumer.start_consuming([task])
        finally:
            consumer.close()
        assert result.status == "failed"
        assert "worker crashed" in result.error_msg
        assert result.seed == 4


# 预设 -> 均值曲线的趋势方向（1 不减，-1 不增）
TRENDS = {"pb_max": 1, "r_min": -1, "d2d": -1, "irs": 1, "antennas": 1}


def _follows_trend(rows: pd.DataFrame, direction: int) -> bool:
    """至多一次逆趋势的步，且幅度不超过相邻两点标准差的较大者"""
    rows = rows.sort_values("value")
    means, stds = rows["mean_bps"].to_numpy(), rows["std_bps"].to_numpy()
    steps = direction * np.diff(means)
    against = np.flatnonzero(steps < 0)
    if len(against) > 1:
        return False
    return all(-steps[i] <= max(stds[i], stds[i + 1]) for i in against)


@pytest.mark.slow
class TestTrends:
    @pytest.mark.parametrize("preset", sorted(TRENDS))
    def test_release_profile_trend(self, preset, tmp_path):
        spec = preset_spec(preset, seeds_per_point=20, algorithms=["nota", "ota"],
                           base=ScenarioConfig(e_min_dbm=-80.0),
                           options=AlgorithmOptions(max_outer_iters=50, convergence_tol=1e-3),
                           output_dir=tmp_path)
        summary = run_sweep(spec).summary
        for algorithm in ("nota", "ota"):
            rows = summary[(summary["algorithm"] == algorithm) & ~summary["empty"]]
            assert len(rows) >= 2, algorithm
            assert _follows_trend(rows, TRENDS[preset]), rows[["value", "mean_bps", "std_bps"]].to_string()
        if preset == "pb_max":
            means = summary.pivot(index="value", columns="algorithm", values="mean_bps").dropna()
            assert len(means) > 0
            assert (means["ota"] >= means["nota"]).all(), means.to_string()
