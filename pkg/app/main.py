"""
主程序入口
ded2d 命令行: run（单实例）、sweep（参数扫描）、verify（测试套件）
"""
import argparse
import json
import math
import sys
import traceback
from pathlib import Path
from typing import List, Optional

from loguru import logger

from app.config import load_algorithm_options, load_scenario_config, settings
from app.exceptions import InfeasibleInstanceException, SimulatorException, SolverException
from app.models import Algorithm, SweepSpec, TerminationReason
from app.services.conic import SubproblemKind, lower_subproblem
from app.services.experiment import PRESETS, default_options_from_settings, preset_spec, run_sweep
from app.services.scenario import generate_channels, load_channels, save_channels
from app.services.sca import run_algorithm
from app.services.surrogate import build_subproblem_templates

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INFEASIBLE = 2
EXIT_SOLVER_FAILURE = 3

# 表 I 的能量门限（按当前路径损耗模型通常不可达）
STRICT_E_MIN_DBM = 0.0


def setup_logging():
    """配置日志 - 同时输出到终端和文件"""
    logger.remove()  # 移除默认handler

    log_file_path = Path(settings.log_file_path)

    if settings.log_format == "json":
        console_format = "{time} | {level} | {message}"
        file_format = "{time} | {level} | {message}"
        serialize = True
    else:
        console_format = "<green>{time:YYYY-MM-DD HH:mm:ss}</green> | <level>{level: <8}</level> | <cyan>{name}</cyan>:<cyan>{function}</cyan>:<cyan>{line}</cyan> - <level>{message}</level>"
        file_format = "{time:YYYY-MM-DD HH:mm:ss} | {level: <8} | {name}:{function}:{line} - {message}"
        serialize = False

    # 日志输出到 stderr，stdout 留给结果
    logger.add(
        sys.stderr,
        format=console_format,
        level=settings.log_level,
        serialize=serialize,
        colorize=(settings.log_format != "json")
    )

    if settings.log_to_file:
        log_file_path.parent.mkdir(parents=True, exist_ok=True)
        logger.add(
            str(log_file_path),
            format=file_format,
            level=settings.log_level,
            serialize=serialize,
            colorize=False,
            rotation="100 MB",
            retention="30 days",
            compression="zip",
            encoding="utf-8"
        )
        logger.info(f"Logging to file: {log_file_path}")


def _parse_values(text: str) -> List[float]:
    try:
        return [float(v) for v in text.replace(" ", "").split(",") if v]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"invalid value list: {text}") from e


def _parse_algorithms(text: str) -> List[Algorithm]:
    try:
        return [Algorithm.parse(a) for a in text.split(",") if a.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"unknown algorithm in: {text}") from e


class CliParser(argparse.ArgumentParser):
    """用法错误以 EXIT_ERROR 退出，退出码 2 只表示实例不可行"""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def _config_options(suppress: bool = False) -> argparse.ArgumentParser:
    """--config 与 --paper-strict，子命令前后都可以写；子命令上的缺省值不覆盖顶层已解析的值"""
    defaults = {"default": argparse.SUPPRESS} if suppress else {}
    common = CliParser(add_help=False)
    common.add_argument("--config", help="YAML 配置文件（也可用 CONFIG_PATH 环境变量）", **defaults)
    common.add_argument("--paper-strict", action="store_true", help="使用表 I 的能量门限 e_min = 0 dBm", **defaults)
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = CliParser(prog="ded2d", description="IRS 辅助数据/能量一体化网络 + D2D 的 max-min 吞吐量仿真器",
                       parents=[_config_options()])
    sub = parser.add_subparsers(dest="command", required=True)
    common = _config_options(suppress=True)

    run = sub.add_parser("run", help="单实例运行一种算法", parents=[common])
    run.add_argument("--algo", type=Algorithm.parse, default=Algorithm.NOTA,
                     help="nota | ota | nota-random | ota-random")
    run.add_argument("--seed", type=int, default=None, help="信道与初始点种子（缺省取配置中的 rng_seed）")
    run.add_argument("--channels", help="读取信道快照 (.npz) 而非重新生成")
    run.add_argument("--out", help="输出目录: 迭代轨迹、摘要、信道快照与子问题锥规划")
    run.add_argument("--nats", action="store_true", help="以 nats/s/Hz 输出结果")

    sweep = sub.add_parser("sweep", help="参数扫描", parents=[common])
    sweep.add_argument("--preset", choices=sorted(PRESETS), help="预设扫描")
    sweep.add_argument("--param", help="扫描的场景字段")
    sweep.add_argument("--values", type=_parse_values, help="逗号分隔的取值")
    sweep.add_argument("--seeds", type=int, default=None, help="每个扫描点的种子数")
    sweep.add_argument("--base-seed", type=int, default=None)
    sweep.add_argument("--algos", type=_parse_algorithms, default=None, help="逗号分隔的算法列表")
    sweep.add_argument("--workers", type=int, default=None, help="进程数，0 表示全部 CPU")
    sweep.add_argument("--out", help="输出目录")
    sweep.add_argument("--emit-plots", action="store_true", help="写出按 summary.csv 绘图的 matplotlib 脚本")

    verify = sub.add_parser("verify", help="运行性质与对照测试")
    verify.add_argument("--runslow", action="store_true", help="包含耗时的统计测试")
    verify.add_argument("pytest_args", nargs=argparse.REMAINDER, help="透传给 pytest 的参数")
    return parser


def _scenario(args):
    overrides = {"e_min_dbm": STRICT_E_MIN_DBM} if args.paper_strict else {}
    cfg = load_scenario_config(args.config, **overrides)
    if args.paper_strict:
        logger.warning(f"Strict Table I profile: e_min = {STRICT_E_MIN_DBM} dBm, expect infeasible seeds")
    return cfg


def _options(args):
    return default_options_from_settings(load_algorithm_options(args.config))


def _write_programs(out_dir: Path, channels, cfg, opts, trace, algorithm: Algorithm) -> None:
    """在最终松弛点处重建子问题并导出锥规划，重建失败只记警告"""
    for block in ("beam", "phase"):
        if block == "phase" and channels.num_irs_elements == 0:
            continue
        kind = SubproblemKind.for_block(algorithm.scenario, block)
        try:
            templates = build_subproblem_templates(channels, trace.final_relaxed, cfg, kind, eta=trace.eta,
                                                   trust_margin=opts.trust_margin)
            program = lower_subproblem(templates, kind)
        except SimulatorException as e:
            logger.warning(f"Skipping program_{kind.value}.yaml: {type(e).__name__}: {e}")
            continue
        (out_dir / f"program_{kind.value}.yaml").write_text(program.to_yaml(), encoding="utf-8")


def cmd_run(args) -> int:
    cfg = _scenario(args)
    seed = cfg.rng_seed if args.seed is None else args.seed
    opts = _options(args).model_copy(update={"rng_seed": seed})
    if args.channels:
        channels = load_channels(args.channels).validate(cfg)
    else:
        channels = generate_channels(cfg, seed)
    logger.info(f"Running {args.algo.value} (seed={seed}, config hash={cfg.config_hash()[:12]})")

    trace = run_algorithm(channels, cfg, opts, args.algo)
    summary = trace.summary()
    summary["seed"] = seed
    unit = "nats/s/Hz" if args.nats else "bps/Hz"
    value = trace.objective if args.nats else trace.objective / math.log(2.0)
    summary["unit"] = unit
    summary["objective"] = value

    out_dir = Path(args.out) if args.out else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        trace.to_frame().to_csv(out_dir / "trace.csv", index=False, float_format="%.12g")
        save_channels(channels, out_dir / f"channels_{seed}.npz")
        (out_dir / "summary.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")

    print(json.dumps(summary, indent=2))
    if out_dir is not None:
        _write_programs(out_dir, channels, cfg, opts, trace, args.algo)
        logger.info(f"Run artifacts written to {out_dir}")
    if trace.projection_warning:
        logger.warning("Final point is the relaxed design: projection could not restore feasibility")
    if trace.reason is TerminationReason.SOLVER_FAILURE:
        logger.error("Run stopped on a conic solver failure")
        return EXIT_SOLVER_FAILURE
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _scenario(args)
    fields = {
        "base": cfg,
        "options": _options(args),
        "seeds_per_point": args.seeds if args.seeds is not None else settings.sweep_seeds_per_point,
        "base_seed": args.base_seed if args.base_seed is not None else settings.sweep_base_seed,
        "output_dir": Path(args.out or settings.sweep_output_dir),
        "workers": args.workers if args.workers is not None else settings.sweep_workers,
    }
    if args.algos:
        fields["algorithms"] = args.algos
    if args.preset:
        spec = preset_spec(args.preset, **fields)
    elif args.param and args.values:
        spec = SweepSpec(param=args.param, values=args.values, **fields)
    else:
        logger.error("sweep needs --preset or both --param and --values")
        return EXIT_ERROR
    report = run_sweep(spec, preset=args.preset, emit_plots=args.emit_plots)
    print(report.summary.to_string(index=False))
    return EXIT_OK


def cmd_verify(args) -> int:
    import pytest

    root = Path(__file__).resolve().parent.parent
    extra = [a for a in args.pytest_args if a != "--"]
    if args.runslow:
        extra.append("--runslow")
    return int(pytest.main([str(root), "-q", *extra]))


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "verify": cmd_verify}


def main(argv: Optional[List[str]] = None) -> int:
    """主函数"""
    setup_logging()
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        # --help 为 0，用法错误为 EXIT_ERROR
        return e.code if isinstance(e.code, int) else EXIT_ERROR
    logger.debug(f"Starting {settings.service_name} v{settings.service_version}: {args.command}")
    try:
        return COMMANDS[args.command](args)
    except InfeasibleInstanceException as e:
        logger.error(f"Infeasible instance: {e} (mu history: {e.mu_history})")
        return EXIT_INFEASIBLE
    except SolverException as e:
        logger.error(f"Solver failure: {e}")
        return EXIT_SOLVER_FAILURE
    except SimulatorException as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_ERROR
    except Exception as e:
        logger.error(f"Unexpected error: {e}")
        logger.error(traceback.format_exc())
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
