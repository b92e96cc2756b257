"""
SCA 外层交替上升服务
可行点初始化、惩罚权重 η 选择、N-OTA / OTA 交替优化、随机相位基线与单位模投影
"""
import math
import time
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from loguru import logger

from app.config import settings
from app.exceptions import (
    DegenerateInputException,
    InfeasibleInstanceException,
    SolverException,
    TrustRegionException,
    ValidationException,
)
from app.models import Algorithm, AlgorithmOptions, IterationRecord, ScenarioConfig, ScenarioKind, TerminationReason
from app.services.conic import SolveStatus, SubproblemKind, lower_subproblem, solve
from app.services.scenario import ChannelSet
from app.services.surrogate import build_subproblem_templates
from app.services.system_model import DesignPoint, ModelEval, evaluate, penalty_omega

# 初始时间分配: τ_i = τ_e = 2（N-OTA），τ_i = τ_e = τ_d = 3（OTA）
INITIAL_TAU = {ScenarioKind.NOTA: (2.0, 2.0), ScenarioKind.OTA: (3.0, 3.0, 3.0)}

# 初始化遇到退化展开点时的重抽次数
FEAS_RESTARTS = 3


@dataclass(frozen=True)
class FeasibleStart:
    point: DesignPoint
    mu_history: List[float] = field(default_factory=list)


@dataclass(frozen=True)
class BlockOutcome:
    """一次块更新的结果，accepted 为 False 时 point 为原迭代点"""
    accepted: bool
    point: DesignPoint
    evaluation: Optional[ModelEval]
    seconds: float
    status: str
    reason: Optional[TerminationReason] = None


@dataclass
class RunTrace:
    """一次算法运行的迭代记录与最终结果"""
    algorithm: Algorithm
    scenario: ScenarioKind
    records: List[IterationRecord]
    final_relaxed: DesignPoint
    final: DesignPoint
    final_eval: ModelEval
    reason: TerminationReason
    eta: float
    projection_warning: bool = False
    mu_history: List[float] = field(default_factory=list)
    wall_seconds: float = 0.0

    @property
    def iterations(self) -> int:
        return max(len(self.records) - 1, 0)

    @property
    def objective(self) -> float:
        """投影后设计点的 max-min 吞吐量 (nats/s/Hz)"""
        return self.final_eval.objective

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([r.model_dump() for r in self.records])

    def summary(self) -> Dict[str, Any]:
        return {
            "algorithm": self.algorithm.value,
            "scenario": self.scenario.value,
            "objective_nats": float(self.objective),
            "objective_bps": self.objective / math.log(2.0),
            "relaxed_objective_nats": self.records[-1].objective if self.records else float("nan"),
            "iterations": self.iterations,
            "termination": self.reason.value,
            "eta": self.eta,
            "feasible": bool(self.final_eval.is_feasible()),
            "hard_feasible": self.final.is_hard_feasible(1e-9),
            "projection_warning": self.projection_warning,
            "feasibility_rounds": len(self.mu_history),
            "wall_seconds": self.wall_seconds,
        }


def random_unit_theta(rng: np.random.Generator, num_elements: int) -> np.ndarray:
    return np.exp(1j * rng.uniform(0.0, 2.0 * np.pi, num_elements))


def _random_beams(rng: np.random.Generator, rows: int, antennas: int, power: float) -> np.ndarray:
    beams = rng.standard_normal((rows, antennas)) + 1j * rng.standard_normal((rows, antennas))
    norms = np.linalg.norm(beams, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return beams / norms * np.sqrt(power)


def initial_point(ch: ChannelSet, cfg: ScenarioConfig, scenario: ScenarioKind, rng: np.random.Generator,
                  theta: Optional[np.ndarray] = None) -> DesignPoint:
    """
    随机生成满足功率与时间约束的初始点

    每个波束功率 P_B/(U_I+U_E)，D2D 功率取 [0.1, 0.9]·P_k 的均匀随机值。
    """
    if theta is None:
        theta = random_unit_theta(rng, ch.num_irs_elements)
    per_beam = cfg.p_b_max / max(ch.num_ius + ch.num_eus, 1)
    w = _random_beams(rng, ch.num_ius, ch.num_bs_antennas, per_beam)
    v = _random_beams(rng, ch.num_eus, ch.num_bs_antennas, per_beam)
    p = rng.uniform(0.1, 0.9, ch.num_d2d_pairs) * cfg.p_k_max
    t = 1.0 / np.asarray(INITIAL_TAU[scenario])
    return DesignPoint(w=w, v=v, p=p, t=t, theta=theta)


def _solve_kind(templates, kind: SubproblemKind, opts: AlgorithmOptions):
    prog = lower_subproblem(templates, kind)
    return prog, solve(prog, tol=opts.conic_tol, max_iters=opts.conic_max_iters, backend=settings.solver_backend)


def feasibility_rounds(ch: ChannelSet, cfg: ScenarioConfig, opts: AlgorithmOptions, start: DesignPoint) -> FeasibleStart:
    """
    在固定 (τ, θ) 下迭代求解 μ 最大化问题，直到当前点精确可行

    Args:
        ch: 物理信道
        cfg: 场景配置
        opts: 算法选项
        start: 初始点，其 τ 与 θ 在各轮中保持不变

    Returns:
        FeasibleStart

    Raises:
        InfeasibleInstanceException: 轮数耗尽
        DegenerateInputException: 展开点退化（分子为零或无能量）
        SolverException: 锥规划无法给出任何点
    """
    kind = SubproblemKind.for_block(start.scenario, "feas")
    history: List[float] = []
    x = start
    for round_no in range(opts.feas_max_rounds + 1):
        ev = evaluate(ch, x, cfg)
        if ev.is_feasible(opts.feas_eps):
            logger.debug(f"Feasible start found after {round_no} round(s), mu history={history}")
            return FeasibleStart(x, history)
        if round_no == opts.feas_max_rounds:
            break
        templates = build_subproblem_templates(ch, x, cfg, kind, trust_margin=opts.trust_margin)
        prog, sol = _solve_kind(templates, kind, opts)
        if not sol.has_point:
            raise SolverException(f"Feasibility subproblem {kind.value} returned status {sol.status.value}")
        mu = float(prog.variable(sol.x, "mu")[0])
        history.append(mu)
        x = templates.decode(sol.x)
        logger.debug(f"Feasibility round {round_no + 1}: mu={mu:.6g}, max_violation={ev.max_violation:.3g}")

    best = max(history, default=float("-inf"))
    raise InfeasibleInstanceException(
        f"No feasible point within {opts.feas_max_rounds} rounds (best mu={best:.6g})",
        best_mu=best, mu_history=history,
    )


def find_feasible(ch: ChannelSet, cfg: ScenarioConfig, opts: AlgorithmOptions, scenario: ScenarioKind,
                  rng: Optional[np.random.Generator] = None, theta: Optional[np.ndarray] = None) -> FeasibleStart:
    """
    随机初始点 + 可行性轮次

    展开点退化时保留 θ⁽⁰⁾ 重新抽取 (w, v, p) 并重新初始化，最多 FEAS_RESTARTS 次。
    """
    rng = rng if rng is not None else np.random.default_rng(opts.rng_seed)
    if theta is None:
        theta = random_unit_theta(rng, ch.num_irs_elements)
    for attempt in range(FEAS_RESTARTS):
        try:
            return feasibility_rounds(ch, cfg, opts, initial_point(ch, cfg, scenario, rng, theta))
        except DegenerateInputException as e:
            logger.warning(f"Degenerate expansion point during initialization (attempt {attempt + 1}): {e}")
    raise InfeasibleInstanceException(f"Feasibility initialization stayed degenerate after {FEAS_RESTARTS} restarts")


def find_feasible_nota(ch: ChannelSet, cfg: ScenarioConfig, opts: AlgorithmOptions,
                       rng: Optional[np.random.Generator] = None) -> FeasibleStart:
    """N-OTA 可行点: τ = (2, 2)，θ 为随机单位模"""
    return find_feasible(ch, cfg, opts, ScenarioKind.NOTA, rng)


def find_feasible_ota(ch: ChannelSet, cfg: ScenarioConfig, opts: AlgorithmOptions,
                      rng: Optional[np.random.Generator] = None) -> FeasibleStart:
    """OTA 可行点: τ = (3, 3, 3)，θ 为随机单位模"""
    return find_feasible(ch, cfg, opts, ScenarioKind.OTA, rng)


def select_eta(x0: DesignPoint, ch: ChannelSet, cfg: ScenarioConfig) -> float:
    """按初始点 x0 的精确 max-min 吞吐量与 Ω(θ⁽⁰⁾) 选择 η，无 IRS 时为 0"""
    if x0.theta.size == 0:
        return 0.0
    return eta_from_objective(evaluate(ch, x0, cfg).objective, x0.theta)


def eta_from_objective(objective: float, theta: np.ndarray) -> float:
    """
    η = −f⁽⁰⁾/Ω(θ⁽⁰⁾)，使目标与惩罚量级一致

    θ⁽⁰⁾ 为单位模时 Ω = 0，退化为 η = f⁽⁰⁾；f⁽⁰⁾ 也为 0 时取 1。
    """
    theta = np.asarray(theta)
    if theta.size == 0:
        return 0.0
    omega = penalty_omega(theta)
    if abs(omega) > 1e-12:
        return abs(objective / omega)
    return objective if objective > 0 else 1.0


def block_step(ch: ChannelSet, x: DesignPoint, cfg: ScenarioConfig, opts: AlgorithmOptions, kind: SubproblemKind,
               eta: float, floor: float) -> BlockOutcome:
    """
    一次块更新: 构建模板、降阶、求解并校验精确可行性与上升性

    求解失败或结果被拒绝时把信赖域裕量缩小 10 倍重试一次。
    """
    margin = opts.trust_margin
    started = time.perf_counter()
    reason = TerminationReason.SOLVER_FAILURE
    status = ""
    for attempt in range(2):
        try:
            templates = build_subproblem_templates(ch, x, cfg, kind, eta=eta, trust_margin=margin)
            _, sol = _solve_kind(templates, kind, opts)
            status = sol.status.value
            if sol.has_point and sol.status in (SolveStatus.OPTIMAL, SolveStatus.MAX_ITER):
                candidate = templates.decode(sol.x)
                cand_eval = evaluate(ch, candidate, cfg)
                if cand_eval.is_feasible(opts.feas_eps) and cand_eval.penalized(eta) >= floor - opts.ascent_slack:
                    return BlockOutcome(True, candidate, cand_eval, time.perf_counter() - started, status)
                reason = TerminationReason.NUMERICAL_STALL
                logger.debug(f"{kind.value}: rejected step (violation={cand_eval.max_violation:.3g}, "
                             f"penalized={cand_eval.penalized(eta):.9g}, floor={floor:.9g})")
            else:
                reason = TerminationReason.SOLVER_FAILURE
        except (DegenerateInputException, TrustRegionException, ValidationException) as e:
            status = "degenerate"
            reason = TerminationReason.NUMERICAL_STALL
            logger.debug(f"{kind.value}: {e}")
        if attempt == 0:
            margin /= 10.0
            logger.warning(f"{kind.value}: shrinking trust-region margin to {margin:.1e} and retrying")
    return BlockOutcome(False, x, None, time.perf_counter() - started, status, reason)


def _record(iteration: int, ev: ModelEval, eta: float, x: DesignPoint,
            sub1: Optional[BlockOutcome] = None, sub2: Optional[BlockOutcome] = None) -> IterationRecord:
    return IterationRecord(
        iteration=iteration,
        objective=ev.objective,
        penalized_objective=ev.penalized(eta),
        penalty=ev.penalty,
        min_theta_modulus=x.min_theta_modulus,
        max_violation=ev.max_violation,
        sub1_seconds=sub1.seconds if sub1 else 0.0,
        sub2_seconds=sub2.seconds if sub2 else 0.0,
        sub1_status=sub1.status if sub1 else "",
        sub2_status=sub2.status if sub2 else "",
    )


def _has_converged(old: float, new: float, tol: float) -> bool:
    return abs(new - old) <= tol * max(abs(old), 1e-12)


def project_unit_modulus(x: DesignPoint, ch: ChannelSet, cfg: ScenarioConfig, scenario: ScenarioKind,
                         opts: Optional[AlgorithmOptions] = None) -> Tuple[DesignPoint, bool]:
    """
    θ_n ← θ_n/|θ_n|，然后在投影后的 θ 下交替求解子问题 1

    投影点不可行时先在该 θ 与当前 τ 下运行可行性轮次。子问题 1 至多求解
    opts.projection_polish_iters 次，相对变化小于 convergence_tol 时提前停止。

    Returns:
        (设计点, 警告标志)；无法恢复可行时返回原松弛点与 True
    """
    opts = opts if opts is not None else AlgorithmOptions()
    scenario = ScenarioKind(scenario)
    if x.scenario is not scenario:
        raise ValidationException(f"design point is {x.scenario.value}, projection requested for {scenario.value}")
    if x.theta.size == 0:
        return x, False
    modulus = np.abs(x.theta)
    theta = np.where(modulus > 0, x.theta / np.where(modulus > 0, modulus, 1.0), 1.0 + 0j)
    projected = x.replace(theta=theta)
    if not evaluate(ch, projected, cfg).is_feasible(opts.feas_eps):
        try:
            projected = feasibility_rounds(ch, cfg, opts, projected).point
        except (InfeasibleInstanceException, DegenerateInputException, SolverException) as e:
            logger.warning(f"Projection left the design infeasible, keeping relaxed point: {e}")
            return x, True
    kind = SubproblemKind.for_block(scenario, "beam")
    point, floor = projected, float("-inf")
    for _ in range(opts.projection_polish_iters):
        outcome = block_step(ch, point, cfg, opts, kind, eta=0.0, floor=floor)
        if not outcome.accepted:
            break
        old, point, floor = floor, outcome.point, outcome.evaluation.objective
        if math.isfinite(old) and _has_converged(old, floor, opts.convergence_tol):
            break
    return point, False


def run_algorithm(ch: ChannelSet, cfg: ScenarioConfig, opts: AlgorithmOptions, algorithm: Algorithm) -> RunTrace:
    """
    运行一种算法变体

    Args:
        ch: 物理信道
        cfg: 场景配置
        opts: 算法选项
        algorithm: nota / ota 优化 θ，*_random 固定随机 θ

    Returns:
        RunTrace

    Raises:
        InfeasibleInstanceException: 找不到可行初始点
        SolverException: 可行性子问题求解失败
    """
    algorithm = Algorithm.parse(algorithm) if isinstance(algorithm, str) else algorithm
    scenario = algorithm.scenario
    optimize_theta = algorithm.optimizes_theta and ch.num_irs_elements > 0
    started = time.perf_counter()

    # θ⁽⁰⁾ 首先从种子流中抽取，因此同一种子下随机基线与优化算法的初始相位一致
    rng = np.random.default_rng(opts.rng_seed)
    start = find_feasible(ch, cfg, opts, scenario, rng)
    x = start.point
    ev = evaluate(ch, x, cfg)
    eta = select_eta(x, ch, cfg) if optimize_theta else 0.0
    records = [_record(0, ev, eta, x)]
    logger.info(f"{algorithm.value}: feasible start objective={ev.objective:.6g} nats, eta={eta:.6g}, "
                f"rounds={len(start.mu_history)}")

    kind1 = SubproblemKind.for_block(scenario, "beam")
    kind2 = SubproblemKind.for_block(scenario, "phase")
    reason = TerminationReason.MAX_ITERS
    for kappa in range(1, opts.max_outer_iters + 1):
        old = ev.penalized(eta)
        sub1 = block_step(ch, x, cfg, opts, kind1, eta, old)
        if not sub1.accepted:
            reason = sub1.reason
            break
        x, ev = sub1.point, sub1.evaluation
        sub2 = None
        if optimize_theta:
            sub2 = block_step(ch, x, cfg, opts, kind2, eta, ev.penalized(eta))
            if sub2.accepted:
                x, ev = sub2.point, sub2.evaluation
        records.append(_record(kappa, ev, eta, x, sub1, sub2))
        logger.debug(f"{algorithm.value} iter {kappa}: objective={ev.objective:.9g}, "
                     f"penalized={ev.penalized(eta):.9g}, min|theta|={x.min_theta_modulus:.6f}")
        if sub2 is not None and not sub2.accepted:
            reason = sub2.reason
            break
        if _has_converged(old, ev.penalized(eta), opts.convergence_tol):
            reason = TerminationReason.CONVERGED
            break

    relaxed = x
    final, warning = x, False
    if optimize_theta and opts.projection_enabled:
        final, warning = project_unit_modulus(x, ch, cfg, scenario, opts)
    final_eval = evaluate(ch, final, cfg)
    trace = RunTrace(
        algorithm=algorithm,
        scenario=scenario,
        records=records,
        final_relaxed=relaxed,
        final=final,
        final_eval=final_eval,
        reason=reason,
        eta=eta,
        projection_warning=warning,
        mu_history=list(start.mu_history),
        wall_seconds=time.perf_counter() - started,
    )
    logger.info(f"{algorithm.value}: {reason.value} after {trace.iterations} iterations, "
                f"objective={trace.objective / math.log(2.0):.6g} bps/Hz ({trace.wall_seconds:.2f}s)")
    return trace


def run_nota(ch: ChannelSet, cfg: ScenarioConfig, opts: AlgorithmOptions) -> RunTrace:
    return run_algorithm(ch, cfg, opts, Algorithm.NOTA)


def run_ota(ch: ChannelSet, cfg: ScenarioConfig, opts: AlgorithmOptions) -> RunTrace:
    return run_algorithm(ch, cfg, opts, Algorithm.OTA)


def run_random_theta(ch: ChannelSet, cfg: ScenarioConfig, opts: AlgorithmOptions,
                     scenario: ScenarioKind = ScenarioKind.NOTA) -> RunTrace:
    """固定随机单位模 θ，仅交替优化子问题 1"""
    algorithm = Algorithm.OTA_RANDOM if ScenarioKind(scenario) is ScenarioKind.OTA else Algorithm.NOTA_RANDOM
    return run_algorithm(ch, cfg, opts, algorithm)
