"""
数据模型定义
场景配置、算法选项、扫描任务与结果消息
"""
import hashlib
import math
import types
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union, get_args, get_origin

from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator


def dbm_to_mw(value_dbm: float) -> float:
    return 10.0 ** (value_dbm / 10.0)


class ScenarioKind(str, Enum):
    """D2D 与基站传输是否正交分时"""
    NOTA = "nota"
    OTA = "ota"


class Algorithm(str, Enum):
    """四种算法变体"""
    NOTA = "nota"
    NOTA_RANDOM = "nota_random"
    OTA = "ota"
    OTA_RANDOM = "ota_random"

    @classmethod
    def parse(cls, name: str) -> "Algorithm":
        return cls(name.strip().lower().replace("-", "_"))

    @property
    def scenario(self) -> ScenarioKind:
        return ScenarioKind.OTA if self in (Algorithm.OTA, Algorithm.OTA_RANDOM) else ScenarioKind.NOTA

    @property
    def optimizes_theta(self) -> bool:
        return self in (Algorithm.NOTA, Algorithm.OTA)


class TerminationReason(str, Enum):
    CONVERGED = "converged"
    MAX_ITERS = "max_iters"
    SOLVER_FAILURE = "solver_failure"
    NUMERICAL_STALL = "numerical_stall"


class ScenarioConfig(BaseModel):
    """
    场景静态参数，默认值对应表 I

    功率与门限按配置文件单位保存（dBm、bps/Hz），线性量通过属性获取。
    """
    num_bs_antennas: int = Field(default=6, ge=1)
    num_irs_elements: int = Field(default=10, ge=0)
    num_ius: int = Field(default=2, ge=1)
    num_eus: int = Field(default=2, ge=0)
    num_d2d_pairs: int = Field(default=3, ge=0)

    rho: float = Field(default=0.5, gt=0.0, le=1.0)
    e_min_dbm: Optional[float] = Field(default=0.0)  # None 表示无能量需求
    r_k_min_bps: float = Field(default=0.4, ge=0.0)
    p_b_max_dbm: float = Field(default=20.0)
    p_k_max_dbm: float = Field(default=20.0)
    noise_psd_dbm_hz: float = Field(default=-174.0)
    bandwidth_hz: float = Field(default=10e6, gt=0.0)

    bs_position: Tuple[float, float, float] = (40.0, 0.0, 25.0)
    irs_position: Tuple[float, float, float] = (0.0, 60.0, 40.0)
    deployment_area: Tuple[float, float] = (120.0, 120.0)
    user_height: float = 0.0
    d2d_pair_distance: float = Field(default=10.0, gt=0.0)

    rician_factor_db: float = 10.0
    pathloss_exponent_rician: float = Field(default=3.0, gt=0.0)
    pathloss_exponent_rayleigh: float = Field(default=2.0, gt=0.0)
    antenna_gain_bs_dbi: float = 5.0
    element_gain_irs_dbi: float = 5.0

    rng_seed: int = 0

    class Config:
        frozen = True
        extra = "forbid"

    @field_validator("deployment_area")
    @classmethod
    def _positive_area(cls, v):
        if min(v) <= 0:
            raise ValueError("deployment_area sides must be positive")
        return v

    @property
    def p_b_max(self) -> float:
        """基站功率预算 (mW)"""
        return dbm_to_mw(self.p_b_max_dbm)

    @property
    def p_k_max(self) -> float:
        """D2D 发射功率预算 (mW)"""
        return dbm_to_mw(self.p_k_max_dbm)

    @property
    def e_min(self) -> float:
        """能量门限 (mW)，无需求时为 0"""
        return 0.0 if self.e_min_dbm is None else dbm_to_mw(self.e_min_dbm)

    @property
    def r_k_min(self) -> float:
        """D2D 速率门限 (nats/s/Hz)"""
        return self.r_k_min_bps * math.log(2.0)

    @property
    def noise_power_mw(self) -> float:
        return dbm_to_mw(self.noise_psd_dbm_hz + 10.0 * math.log10(self.bandwidth_hz))

    def config_hash(self) -> str:
        payload = self.model_dump_json()
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class AlgorithmOptions(BaseModel):
    """SCA 外层循环选项"""
    max_outer_iters: int = Field(default=100, ge=1)
    convergence_tol: float = Field(default=1e-4, gt=0.0, lt=1.0)
    feas_max_rounds: int = Field(default=30, ge=1)
    conic_tol: float = Field(default=1e-8, gt=0.0)
    conic_max_iters: int = Field(default=200, ge=1)
    rng_seed: int = 0
    projection_enabled: bool = True
    projection_polish_iters: int = Field(default=20, ge=1)  # 投影后子问题 1 的最多求解次数
    trust_margin: float = Field(default=1e-6, gt=0.0, lt=1.0)
    feas_eps: float = Field(default=1e-6, gt=0.0)
    ascent_slack: float = Field(default=1e-6, ge=0.0)

    class Config:
        frozen = True
        extra = "forbid"


class IterationRecord(BaseModel):
    """单次外层迭代记录（trace CSV 的一行）"""
    iteration: int
    objective: float  # 精确 max-min 吞吐量 (nats/s/Hz)
    penalized_objective: float
    penalty: float
    min_theta_modulus: float
    max_violation: float
    sub1_seconds: float = 0.0
    sub2_seconds: float = 0.0
    sub1_status: str = ""
    sub2_status: str = ""


_UNION_TYPES = (Union, getattr(types, "UnionType", Union))


def _numeric_type(name: str) -> Optional[type]:
    """ScenarioConfig 字段的数值类型，Optional[...] 取其中的非 None 类型；非数值字段返回 None"""
    annotation = ScenarioConfig.model_fields[name].annotation
    if get_origin(annotation) in _UNION_TYPES:
        inner = [a for a in get_args(annotation) if a is not type(None)]
        annotation = inner[0] if len(inner) == 1 else None
    return annotation if annotation in (int, float) else None


class SweepSpec(BaseModel):
    """参数扫描描述"""
    param: str
    values: List[float]
    overrides: Dict[str, float] = Field(default_factory=dict)
    seeds_per_point: int = Field(default=20, ge=1)
    base_seed: int = 0
    algorithms: List[Algorithm] = Field(
        default_factory=lambda: [Algorithm.NOTA, Algorithm.NOTA_RANDOM, Algorithm.OTA, Algorithm.OTA_RANDOM]
    )
    output_dir: Path = Path("results")
    workers: int = Field(default=0, ge=0)
    base: ScenarioConfig = Field(default_factory=ScenarioConfig)
    options: AlgorithmOptions = Field(default_factory=AlgorithmOptions)

    @field_validator("values")
    @classmethod
    def _sorted_values(cls, v: List[float]) -> List[float]:
        if not v:
            raise ValueError("sweep needs at least one value")
        return sorted(v)

    @field_validator("algorithms", mode="before")
    @classmethod
    def _parse_algorithms(cls, v):
        return [Algorithm.parse(a) if isinstance(a, str) else a for a in v]

    @model_validator(mode="after")
    def _known_param(self):
        fields = ScenarioConfig.model_fields
        for name in [self.param, *self.overrides]:
            if name not in fields:
                raise ValueError(f"'{name}' is not a ScenarioConfig field")
            if _numeric_type(name) is None:
                raise ValueError(f"'{name}' is not a numeric ScenarioConfig field")
        for value in self.values:
            try:
                self.config_at(value)
            except ValidationError as e:
                raise ValueError(f"{self.param}={value:g} is not a valid scenario: {e.errors()[0]['msg']}")
        return self

    def config_at(self, value: float) -> ScenarioConfig:
        """扫描点对应的场景配置（整数字段自动取整），经 ScenarioConfig 校验"""
        updates = {**self.overrides, self.param: value}
        typed = {k: int(round(v)) if _numeric_type(k) is int else float(v) for k, v in updates.items()}
        return ScenarioConfig.model_validate({**self.base.model_dump(), **typed})

    def seeds(self) -> List[int]:
        return [self.base_seed + s for s in range(self.seeds_per_point)]


class SweepTask(BaseModel):
    """工作队列中的一个 (算法, 扫描点, 种子) 任务"""
    algorithm: Algorithm
    value: float
    seed: int
    scenario: ScenarioConfig
    options: AlgorithmOptions


class TaskResult(BaseModel):
    """任务结果消息"""
    algorithm: Algorithm
    value: float
    seed: int
    status: str  # completed, infeasible, failed
    objective_nats: float = float("nan")
    iterations: int = 0
    termination: str = ""
    projection_warning: bool = False
    best_mu: Optional[float] = None
    error_msg: Optional[str] = None
    wall_seconds: float = 0.0
    records: List[IterationRecord] = Field(default_factory=list)

    @property
    def feasible(self) -> bool:
        return self.status == "completed"

    @property
    def objective_bps(self) -> float:
        return self.objective_nats / math.log(2.0)
