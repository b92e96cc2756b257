"""
实验服务
单任务执行、扫描聚合、报告输出（raw.csv / summary.csv / trace / manifest.json / 绘图脚本）与预设扫描
"""
import json
import math
import time
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from loguru import logger

from app import __version__
from app.exceptions import InfeasibleInstanceException, ResourceException, SimulatorException
from app.models import Algorithm, AlgorithmOptions, SweepSpec, SweepTask, TaskResult
from app.services.scenario import generate_channels
from app.services.sca import run_algorithm

FLOAT_FORMAT = "%.12g"

# 五组扫描预设: 名称 -> (参数, 取值)
PRESETS: Dict[str, Tuple[str, List[float]]] = {
    "pb_max": ("p_b_max_dbm", [10.0, 15.0, 20.0, 25.0]),
    "r_min": ("r_k_min_bps", [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]),
    "d2d": ("num_d2d_pairs", [1, 2, 3, 4]),
    "irs": ("num_irs_elements", [5, 10, 20, 40]),
    "antennas": ("num_bs_antennas", [2, 4, 6, 8]),
}

# 优化算法 -> 对照的随机相位基线
BASELINES = {Algorithm.NOTA: Algorithm.NOTA_RANDOM, Algorithm.OTA: Algorithm.OTA_RANDOM}

RAW_COLUMNS = [
    "algorithm", "value", "seed", "status", "objective_nats", "objective_bps",
    "iterations", "termination", "projection_warning", "best_mu", "error_msg",
]
SUMMARY_COLUMNS = [
    "algorithm", "value", "mean_bps", "std_bps", "mean_iterations", "feasibility_rate",
    "num_feasible", "num_seeds", "empty", "improvement_pct",
]
COLUMN_DOCS = {
    "raw.csv": {
        "algorithm": "nota | nota_random | ota | ota_random",
        "value": "value of the swept scenario parameter",
        "seed": "channel and initial-point seed",
        "status": "completed | infeasible | failed",
        "objective_nats": "max-min IU throughput of the projected design (nats/s/Hz)",
        "objective_bps": "same in bps/Hz",
        "iterations": "outer SCA iterations",
        "termination": "converged | max_iters | solver_failure | numerical_stall",
        "projection_warning": "true when unit-modulus projection could not restore feasibility",
        "best_mu": "best feasibility-search mu for infeasible seeds",
        "error_msg": "error text for infeasible or failed seeds",
    },
    "summary.csv": {
        "mean_bps": "mean objective over feasible seeds (bps/Hz)",
        "std_bps": "population standard deviation over feasible seeds",
        "mean_iterations": "mean outer iterations over feasible seeds",
        "feasibility_rate": "num_feasible / num_seeds",
        "empty": "true when no seed at this point was feasible",
        "improvement_pct": "gain of nota/ota over the random-phase baseline at the same value (%)",
    },
    "trace_<algorithm>_<value>_<seed>.csv": {
        "iteration": "0 is the feasible start",
        "objective": "exact max-min throughput (nats/s/Hz)",
        "penalized_objective": "objective + eta * penalty",
        "penalty": "1/N - 1/sum|theta|^2",
        "min_theta_modulus": "min_n |theta_n|",
        "max_violation": "largest normalized constraint violation",
    },
}


@dataclass
class SweepReport:
    spec: SweepSpec
    results: List[TaskResult]
    raw: pd.DataFrame
    summary: pd.DataFrame
    paths: Dict[str, Path] = field(default_factory=dict)
    wall_seconds: float = 0.0


def preset_spec(name: str, **kwargs) -> SweepSpec:
    """按预设名称构建扫描描述，其余字段透传给 SweepSpec"""
    if name not in PRESETS:
        raise SimulatorException(f"Unknown sweep preset: {name} (available: {', '.join(PRESETS)})")
    param, values = PRESETS[name]
    return SweepSpec(param=param, values=list(values), **kwargs)


def build_tasks(spec: SweepSpec) -> List[SweepTask]:
    """展开为 (扫描点, 种子, 算法) 任务，同一 (扫描点, 种子) 下各算法共享信道"""
    tasks = []
    for value in spec.values:
        scenario = spec.config_at(value)
        for seed in spec.seeds():
            for algorithm in spec.algorithms:
                tasks.append(SweepTask(algorithm=algorithm, value=value, seed=seed,
                                       scenario=scenario, options=spec.options))
    return tasks


def run_task(task: SweepTask) -> TaskResult:
    """
    执行单个任务（工作进程入口）

    Args:
        task: 扫描任务

    Returns:
        TaskResult，不可行与求解失败不抛出异常，以状态字段返回
    """
    started = time.perf_counter()
    base = {"algorithm": task.algorithm, "value": task.value, "seed": task.seed}
    try:
        channels = generate_channels(task.scenario, task.seed)
        options = task.options.model_copy(update={"rng_seed": task.seed})
        trace = run_algorithm(channels, task.scenario, options, task.algorithm)
        return TaskResult(
            **base,
            status="completed",
            objective_nats=trace.objective,
            iterations=trace.iterations,
            termination=trace.reason.value,
            projection_warning=trace.projection_warning,
            wall_seconds=time.perf_counter() - started,
            records=trace.records,
        )
    except InfeasibleInstanceException as e:
        logger.warning(f"Infeasible seed: {task.algorithm.value} value={task.value:g} seed={task.seed}: {e}")
        return TaskResult(
            **base,
            status="infeasible",
            best_mu=e.best_mu if math.isfinite(e.best_mu) else None,
            error_msg=str(e),
            wall_seconds=time.perf_counter() - started,
        )
    except SimulatorException as e:
        logger.error(f"Task failed: {task.algorithm.value} value={task.value:g} seed={task.seed}: {e}")
        return TaskResult(**base, status="failed", error_msg=str(e), wall_seconds=time.perf_counter() - started)


def raw_frame(results: Iterable[TaskResult]) -> pd.DataFrame:
    rows = [
        {
            "algorithm": r.algorithm.value,
            "value": r.value,
            "seed": r.seed,
            "status": r.status,
            "objective_nats": r.objective_nats,
            "objective_bps": r.objective_bps,
            "iterations": r.iterations,
            "termination": r.termination,
            "projection_warning": r.projection_warning,
            "best_mu": r.best_mu,
            "error_msg": r.error_msg or "",
        }
        for r in results
    ]
    frame = pd.DataFrame(rows, columns=RAW_COLUMNS)
    return frame.sort_values(["algorithm", "value", "seed"], kind="mergesort").reset_index(drop=True)


def summarize(raw: pd.DataFrame) -> pd.DataFrame:
    """
    按 (算法, 扫描点) 聚合，不可行种子不计入均值

    Args:
        raw: raw_frame 的输出

    Returns:
        summary 表，列见 SUMMARY_COLUMNS
    """
    rows = []
    for (algorithm, value), group in raw.groupby(["algorithm", "value"], sort=True):
        feasible = group[group["status"] == "completed"]
        num_feasible = len(feasible)
        rows.append({
            "algorithm": algorithm,
            "value": value,
            "mean_bps": feasible["objective_bps"].mean() if num_feasible else float("nan"),
            "std_bps": feasible["objective_bps"].std(ddof=0) if num_feasible else float("nan"),
            "mean_iterations": feasible["iterations"].mean() if num_feasible else float("nan"),
            "feasibility_rate": num_feasible / len(group),
            "num_feasible": num_feasible,
            "num_seeds": len(group),
            "empty": num_feasible == 0,
            "improvement_pct": float("nan"),
        })
    summary = pd.DataFrame(rows, columns=SUMMARY_COLUMNS)

    means = {(r.algorithm, r.value): r.mean_bps for r in summary.itertuples()}
    for idx, row in summary.iterrows():
        baseline = BASELINES.get(Algorithm(row["algorithm"]))
        if baseline is None:
            continue
        reference = means.get((baseline.value, row["value"]), float("nan"))
        if np.isfinite(reference) and reference > 0 and np.isfinite(row["mean_bps"]):
            summary.at[idx, "improvement_pct"] = 100.0 * (row["mean_bps"] - reference) / reference
    return summary


def trace_filename(algorithm: Algorithm, value: float, seed: int) -> str:
    return f"trace_{algorithm.value}_{value:g}_{seed}.csv"


def _package_versions() -> Dict[str, str]:
    versions = {"ded2d": __version__}
    for package in ("numpy", "pandas", "cvxopt", "pydantic", "loguru"):
        try:
            versions[package] = metadata.version(package)
        except metadata.PackageNotFoundError:
            versions[package] = "unknown"
    return versions


def write_plot_script(out_dir: Path, param: str) -> Path:
    """写出按 summary.csv 绘图的独立脚本（运行时需要 matplotlib）"""
    path = out_dir / f"plot_{param}.py"
    path.write_text(
        f'"""Plot mean max-min throughput against {param} from summary.csv."""\n'
        "from pathlib import Path\n\n"
        "import matplotlib.pyplot as plt\n"
        "import pandas as pd\n\n"
        "here = Path(__file__).resolve().parent\n"
        'summary = pd.read_csv(here / "summary.csv")\n'
        "fig, ax = plt.subplots()\n"
        'for algorithm, group in summary.groupby("algorithm"):\n'
        '    group = group[~group["empty"]]\n'
        '    ax.errorbar(group["value"], group["mean_bps"], yerr=group["std_bps"], marker="o", label=algorithm)\n'
        f'ax.set_xlabel("{param}")\n'
        'ax.set_ylabel("max-min throughput (bps/Hz)")\n'
        "ax.grid(True)\n"
        "ax.legend()\n"
        f'fig.savefig(here / "plot_{param}.png", dpi=150)\n',
        encoding="utf-8",
    )
    return path


def emit_reports(spec: SweepSpec, results: Sequence[TaskResult], out_dir: Optional[Path] = None,
                 wall_seconds: float = 0.0, preset: Optional[str] = None,
                 emit_plots: bool = False) -> SweepReport:
    """
    写出扫描报告

    Args:
        spec: 扫描描述
        results: 全部任务结果
        out_dir: 输出目录，缺省为 spec.output_dir
        wall_seconds: 整体耗时
        preset: 预设名称（如有）
        emit_plots: 是否写出绘图脚本

    Returns:
        SweepReport
    """
    out_dir = Path(out_dir or spec.output_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ResourceException(f"Cannot create output directory {out_dir}: {e}") from e

    raw = raw_frame(results)
    summary = summarize(raw)
    paths = {"raw": out_dir / "raw.csv", "summary": out_dir / "summary.csv", "manifest": out_dir / "manifest.json"}
    raw.to_csv(paths["raw"], index=False, float_format=FLOAT_FORMAT)
    summary.to_csv(paths["summary"], index=False, float_format=FLOAT_FORMAT)

    for result in results:
        if result.records:
            frame = pd.DataFrame([r.model_dump() for r in result.records])
            frame.to_csv(out_dir / trace_filename(result.algorithm, result.value, result.seed),
                         index=False, float_format=FLOAT_FORMAT)

    manifest = {
        "preset": preset,
        "param": spec.param,
        "values": spec.values,
        "overrides": spec.overrides,
        "seeds": spec.seeds(),
        "algorithms": [a.value for a in spec.algorithms],
        "config_hash": spec.base.config_hash(),
        "scenario": spec.base.model_dump(mode="json"),
        "options": spec.options.model_dump(mode="json"),
        "versions": _package_versions(),
        "wall_seconds": wall_seconds,
        "task_wall_seconds": {
            f"{r.algorithm.value}_{r.value:g}_{r.seed}": r.wall_seconds
            for r in sorted(results, key=lambda r: (r.algorithm.value, r.value, r.seed))
        },
        "columns": COLUMN_DOCS,
    }
    paths["manifest"].write_text(json.dumps(manifest, indent=2, ensure_ascii=False), encoding="utf-8")
    if emit_plots:
        paths["plot"] = write_plot_script(out_dir, spec.param)

    infeasible = int((raw["status"] != "completed").sum())
    if infeasible:
        logger.warning(f"{infeasible} of {len(raw)} tasks were infeasible or failed")
    for row in summary[summary["empty"]].itertuples():
        logger.warning(f"No feasible seed for {row.algorithm} at {spec.param}={row.value:g}")
    logger.info(f"Reports written to {out_dir}")
    return SweepReport(spec, list(results), raw, summary, paths, wall_seconds)


def run_sweep(spec: SweepSpec, preset: Optional[str] = None, emit_plots: bool = False) -> SweepReport:
    """执行参数扫描并写出报告"""
    from app.consumers.sweep_consumer import SweepConsumer

    tasks = build_tasks(spec)
    logger.info(f"Sweep {spec.param} over {spec.values}: {len(tasks)} tasks, "
                f"{len(spec.algorithms)} algorithm(s) x {spec.seeds_per_point} seed(s)")
    started = time.perf_counter()
    consumer = SweepConsumer(workers=spec.workers)
    try:
        consumer.connect()
        results = consumer.start_consuming(tasks)
    finally:
        consumer.close()
    return emit_reports(spec, results, wall_seconds=time.perf_counter() - started, preset=preset,
                        emit_plots=emit_plots)


def default_options_from_settings(options: AlgorithmOptions) -> AlgorithmOptions:
    """未显式配置的求解器容差与迭代上限取服务配置中的值"""
    from app.config import settings

    updates = {}
    if "conic_tol" not in options.model_fields_set:
        updates["conic_tol"] = settings.solver_tol
    if "conic_max_iters" not in options.model_fields_set:
        updates["conic_max_iters"] = settings.solver_max_iters
    return options.model_copy(update=updates)

