"""
命令行测试: 退出码与运行产物
"""
import json
import math

import pytest
import yaml

from app.exceptions import DegenerateInputException
from app.main import EXIT_ERROR, EXIT_INFEASIBLE, EXIT_OK, build_parser, main
from app.models import Algorithm


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump({
        "scenario": {
            "num_bs_antennas": 3, "num_irs_elements": 3, "num_ius": 2, "num_eus": 1, "num_d2d_pairs": 2,
            "e_min_dbm": -90.0, "r_k_min_bps": 0.1,
        },
        "algorithm": {"max_outer_iters": 3, "convergence_tol": 1.0e-3, "feas_max_rounds": 3},
    }), encoding="utf-8")
    return str(path)


def _stdout_json(capsys):
    return json.loads(capsys.readouterr().out)


def test_parser_accepts_dashed_algorithm():
    args = build_parser().parse_args(["run", "--algo", "ota-random"])
    assert args.algo is Algorithm.OTA_RANDOM


def test_run_writes_artifacts(config_file, tmp_path, capsys):
    out = tmp_path / "run"
    code = main(["--config", config_file, "run", "--algo", "nota", "--seed", "1", "--out", str(out)])
    assert code == EXIT_OK
    summary = _stdout_json(capsys)
    assert summary["seed"] == 1 and summary["unit"] == "bps/Hz"
    assert summary["objective"] == pytest.approx(summary["objective_bps"])
    for name in ("trace.csv", "summary.json", "channels_1.npz", "program_nota1.yaml", "program_nota2.yaml"):
        assert (out / name).exists(), name


def test_run_from_snapshot_in_nats(config_file, tmp_path, capsys):
    out = tmp_path / "first"
    assert main(["--config", config_file, "run", "--algo", "ota-random", "--seed", "2", "--out", str(out)]) == EXIT_OK
    first = _stdout_json(capsys)
    code = main(["--config", config_file, "run", "--algo", "ota-random", "--seed", "2",
                 "--channels", str(out / "channels_2.npz"), "--nats"])
    assert code == EXIT_OK
    again = _stdout_json(capsys)
    assert again["unit"] == "nats/s/Hz"
    assert again["objective"] == pytest.approx(first["objective"] * math.log(2.0), rel=1e-9)


def test_snapshot_dimension_mismatch(config_file, tmp_path, capsys):
    out = tmp_path / "snap"
    assert main(["--config", config_file, "run", "--algo", "nota-random", "--seed", "0", "--out", str(out)]) == EXIT_OK
    other = tmp_path / "other.yaml"
    other.write_text(yaml.safe_dump({"scenario": {"num_bs_antennas": 5}}), encoding="utf-8")
    assert main(["--config", str(other), "run", "--channels", str(out / "channels_0.npz")]) == EXIT_ERROR


def test_strict_energy_threshold_is_infeasible(config_file):
    assert main(["--config", config_file, "--paper-strict", "run", "--seed", "0"]) == EXIT_INFEASIBLE


def test_invalid_scenario(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text(yaml.safe_dump({"scenario": {"num_ius": 0}}), encoding="utf-8")
    assert main(["--config", str(path), "run"]) == EXIT_ERROR


def test_sweep_needs_values(config_file):
    assert main(["--config", config_file, "sweep", "--param", "num_d2d_pairs"]) == EXIT_ERROR


def test_sweep_command(config_file, tmp_path, capsys):
    out = tmp_path / "sweep"
    code = main(["sweep", "--config", config_file, "--param", "p_b_max_dbm", "--values", "20",
                 "--seeds", "1", "--algos", "nota-random", "--workers", "1", "--out", str(out), "--emit-plots"])
    assert code == EXIT_OK
    assert "nota_random" in capsys.readouterr().out
    for name in ("raw.csv", "summary.csv", "manifest.json", "plot_p_b_max_dbm.py"):
        assert (out / name).exists(), name


def test_config_after_subcommand(config_file, capsys):
    code = main(["run", "--config", config_file, "--algo", "nota", "--seed", "1"])
    assert code == EXIT_OK
    assert _stdout_json(capsys)["seed"] == 1


def test_strict_flag_after_subcommand(config_file):
    assert main(["run", "--config", config_file, "--paper-strict", "--seed", "0"]) == EXIT_INFEASIBLE


def test_config_position_in_parser():
    parser = build_parser()
    before = parser.parse_args(["--config", "a.yaml", "--paper-strict", "run"])
    assert before.config == "a.yaml" and before.paper_strict
    after = parser.parse_args(["sweep", "--config", "b.yaml", "--preset", "irs"])
    assert after.config == "b.yaml" and not after.paper_strict
    neither = parser.parse_args(["run"])
    assert neither.config is None and not neither.paper_strict


@pytest.mark.parametrize("argv", [
    ["run", "--bogus"],
    ["run", "--seed", "one"],
    ["run", "--algo", "greedy"],
    ["sweep", "--preset", "bandwidth"],
    [],
])
def test_usage_errors_exit_with_error_code(argv):
    code = main(argv)
    assert code == EXIT_ERROR
    assert code != EXIT_INFEASIBLE


def test_program_dump_failure_keeps_result(config_file, tmp_path, capsys, monkeypatch):
    def degenerate(*args, **kwargs):
        raise DegenerateInputException("IU rate 0: zero numerator at the expansion point")

    monkeypatch.setattr("app.main.build_subproblem_templates", degenerate)
    out = tmp_path / "run"
    code = main(["run", "--config", config_file, "--algo", "ota", "--seed", "2", "--out", str(out)])
    assert code == EXIT_OK
    assert _stdout_json(capsys)["seed"] == 2
    assert (out / "summary.json").exists() and (out / "trace.csv").exists()
    assert not list(out.glob("program_*.yaml"))
