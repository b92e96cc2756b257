"""
系统模型求值服务
等效级联信道、IU 速率、收集能量、D2D 吞吐量、max-min 目标、惩罚项 Ω 与约束残差
"""
import dataclasses
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from app.exceptions import DegenerateInputException, ValidationException
from app.models import ScenarioConfig, ScenarioKind
from app.services.scenario import ChannelSet

# 归一化残差的可行性容差
FEAS_EPS = 1e-6


@dataclass(frozen=True)
class AffineChannel:
    """θ 的仿射映射: value(θ) = direct + coeff @ θ，θ 轴为 coeff 的最后一维"""
    direct: np.ndarray
    coeff: np.ndarray

    def at(self, theta: np.ndarray) -> np.ndarray:
        return self.direct + self.coeff @ theta

    def scaled(self, factor: float) -> "AffineChannel":
        return AffineChannel(self.direct * factor, self.coeff * factor)


@dataclass(frozen=True)
class CascadedChannels:
    """全部七类等效信道的仿射表示"""
    bs_iu: AffineChannel  # (U_I, M | N)
    bs_eu: AffineChannel  # (U_E, M | N)
    bs_d2d: AffineChannel  # (K, M | N)
    d2d_iu: AffineChannel  # (K, U_I | N)
    d2d_eu: AffineChannel  # (K, U_E | N)
    d2d_direct: AffineChannel  # (K | N)
    d2d_cross: AffineChannel  # (K, K | N)，[l, k] 为 l 发射机到 k 接收机

    def scaled(self, factor: float) -> "CascadedChannels":
        return CascadedChannels(**{f.name: getattr(self, f.name).scaled(factor) for f in dataclasses.fields(self)})


def cascaded_channels(ch: ChannelSet) -> CascadedChannels:
    """由物理信道构造 direct + reflected 的仿射系数（物理单位）"""
    g = ch.bs_to_irs
    h_rd, h_re, h_rk = ch.irs_to_iu.conj(), ch.irs_to_eu.conj(), ch.irs_to_d2drx.conj()
    h_kr = ch.d2dtx_to_irs
    return CascadedChannels(
        bs_iu=AffineChannel(ch.bs_to_iu.conj(), np.einsum("in,nm->imn", h_rd, g)),
        bs_eu=AffineChannel(ch.bs_to_eu.conj(), np.einsum("jn,nm->jmn", h_re, g)),
        bs_d2d=AffineChannel(ch.bs_to_d2drx.conj(), np.einsum("kn,nm->kmn", h_rk, g)),
        d2d_iu=AffineChannel(ch.d2dtx_to_iu, np.einsum("in,kn->kin", h_rd, h_kr)),
        d2d_eu=AffineChannel(ch.d2dtx_to_eu, np.einsum("jn,kn->kjn", h_re, h_kr)),
        d2d_direct=AffineChannel(ch.d2d_direct, h_rk * h_kr),
        d2d_cross=AffineChannel(ch.d2d_cross, np.einsum("kn,ln->lkn", h_rk, h_kr)),
    )


@dataclass(frozen=True)
class EffectiveChannels:
    """
    某个 θ 下的等效信道

    速率视图按噪声功率归一化（噪声方差为 1），能量视图保留物理单位 (mW)。
    affine / affine_energy 给出对应视图下 θ 到信道的仿射系数，供子问题 2 使用。
    """
    theta: np.ndarray
    bs_iu: np.ndarray
    bs_eu: np.ndarray
    bs_d2d: np.ndarray
    d2d_iu: np.ndarray
    d2d_eu: np.ndarray
    d2d_direct: np.ndarray
    d2d_cross: np.ndarray
    energy_bs_eu: np.ndarray
    energy_d2d_eu: np.ndarray
    affine: CascadedChannels
    affine_energy: CascadedChannels


def effective_channels(ch: ChannelSet, theta: np.ndarray) -> EffectiveChannels:
    """
    计算等效级联信道

    Args:
        ch: 物理信道
        theta: IRS 反射系数 (N,)

    Returns:
        EffectiveChannels
    """
    theta = np.asarray(theta, dtype=complex)
    if theta.shape != (ch.num_irs_elements,):
        raise ValidationException(f"theta has shape {theta.shape}, expected ({ch.num_irs_elements},)")
    physical = cascaded_channels(ch)
    rate = physical.scaled(1.0 / np.sqrt(ch.noise_power_mw))
    return EffectiveChannels(
        theta=theta,
        bs_iu=rate.bs_iu.at(theta),
        bs_eu=rate.bs_eu.at(theta),
        bs_d2d=rate.bs_d2d.at(theta),
        d2d_iu=rate.d2d_iu.at(theta),
        d2d_eu=rate.d2d_eu.at(theta),
        d2d_direct=rate.d2d_direct.at(theta),
        d2d_cross=rate.d2d_cross.at(theta),
        energy_bs_eu=physical.bs_eu.at(theta),
        energy_d2d_eu=physical.d2d_eu.at(theta),
        affine=rate,
        affine_energy=physical,
    )


@dataclass(frozen=True)
class DesignPoint:
    """
    一次 SCA 迭代的决策变量

    t 有两个分量 (t_i, t_e) 时为 N-OTA，三个分量 (t_i, t_e, t_d) 时为 OTA。
    """
    w: np.ndarray  # (U_I, M) 信息波束
    v: np.ndarray  # (U_E, M) 能量波束
    p: np.ndarray  # (K,) D2D 发射功率 (mW)
    t: np.ndarray  # 时间比例
    theta: np.ndarray  # (N,) IRS 反射系数

    def __post_init__(self):
        object.__setattr__(self, "w", np.atleast_2d(np.asarray(self.w, dtype=complex)))
        object.__setattr__(self, "v", np.asarray(self.v, dtype=complex).reshape(-1, self.w.shape[1]))
        object.__setattr__(self, "p", np.asarray(self.p, dtype=float).reshape(-1))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(-1))
        object.__setattr__(self, "theta", np.asarray(self.theta, dtype=complex).reshape(-1))
        if self.t.shape not in ((2,), (3,)):
            raise ValidationException(f"time fractions must have 2 or 3 components, got {self.t.shape}")
        if np.any(self.t <= 0):
            raise ValidationException("time fractions must be positive")
        if np.any(self.p < 0):
            raise ValidationException("D2D powers must be nonnegative")
        for name in ("w", "v", "p", "t", "theta"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValidationException(f"{name} contains non-finite entries")

    @property
    def scenario(self) -> ScenarioKind:
        return ScenarioKind.OTA if self.t.shape[0] == 3 else ScenarioKind.NOTA

    @property
    def tau(self) -> np.ndarray:
        return 1.0 / self.t

    @property
    def min_theta_modulus(self) -> float:
        return float(np.abs(self.theta).min()) if self.theta.size else 1.0

    def is_hard_feasible(self, tol: float = 1e-9) -> bool:
        return bool(np.all(np.abs(np.abs(self.theta) - 1.0) <= tol))

    def replace(self, **changes) -> "DesignPoint":
        return dataclasses.replace(self, **changes)

    def check_dims(self, ch: ChannelSet) -> None:
        expected = {
            "w": (ch.num_ius, ch.num_bs_antennas),
            "v": (ch.num_eus, ch.num_bs_antennas),
            "p": (ch.num_d2d_pairs,),
            "theta": (ch.num_irs_elements,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ValidationException(f"{name} has shape {getattr(self, name).shape}, expected {shape}")


@dataclass(frozen=True)
class ModelEval:
    """精确模型在某设计点上的求值结果，速率单位 nats/s/Hz，能量单位 mW·slot"""
    scenario: ScenarioKind
    iu_rate: np.ndarray
    iu_psi: np.ndarray
    iu_throughput: np.ndarray
    eu_energy: np.ndarray  # E (mW)
    eu_harvested: np.ndarray  # t_e ρ E
    d2d_throughput: np.ndarray
    d2d_psi: np.ndarray  # (K, 2) N-OTA 为 (ψ_ti, ψ_te)，(K, 1) OTA 为 ψ_td
    objective: float
    penalty: float
    residuals: Dict[str, float] = field(default_factory=dict)

    @property
    def max_violation(self) -> float:
        if not self.residuals:
            return 0.0
        return max(0.0, -min(self.residuals.values()))

    def is_feasible(self, eps: float = FEAS_EPS) -> bool:
        return self.max_violation <= eps

    def penalized(self, eta: float) -> float:
        return self.objective + eta * self.penalty

    def to_record(self) -> Dict[str, float]:
        """展平为 CSV 记录"""
        record: Dict[str, float] = {"objective": self.objective, "penalty": self.penalty,
                                    "max_violation": self.max_violation}
        for i, value in enumerate(self.iu_throughput):
            record[f"iu_throughput_{i}"] = float(value)
        for j, value in enumerate(self.eu_harvested):
            record[f"eu_harvested_{j}"] = float(value)
        for k, value in enumerate(self.d2d_throughput):
            record[f"d2d_throughput_{k}"] = float(value)
        return record


def penalty_omega(theta: np.ndarray) -> float:
    """Ω(θ) = 1/N − 1/Σ|θ_n|²，单位模时为 0"""
    theta = np.asarray(theta, dtype=complex).reshape(-1)
    if theta.size == 0:
        raise DegenerateInputException("penalty needs at least one IRS element")
    energy = float(np.sum(np.abs(theta) ** 2))
    if energy <= 0.0:
        raise DegenerateInputException("penalty undefined for theta = 0")
    return 1.0 / theta.size - 1.0 / energy


def _ratio_residual(achieved: float, required: float) -> float:
    return (achieved - required) / required if required > 0 else achieved


def _power_sq(beams: np.ndarray) -> np.ndarray:
    return np.sum(np.abs(beams) ** 2, axis=1) if beams.size else np.zeros(beams.shape[0])


def _evaluate(ch: ChannelSet, x: DesignPoint, cfg: ScenarioConfig, scenario: ScenarioKind) -> ModelEval:
    x.check_dims(ch)
    expected_t = 3 if scenario is ScenarioKind.OTA else 2
    if x.t.shape[0] != expected_t:
        raise ValidationException(f"{scenario.value} evaluation needs {expected_t} time fractions")
    ota = scenario is ScenarioKind.OTA
    eff = effective_channels(ch, x.theta)
    t_i, t_e = x.t[0], x.t[1]
    t_d = x.t[2] if ota else 0.0
    tag = "39" if ota else "7"

    # IU: 信号与干扰 |h_i w_l|²
    gains = np.abs(eff.bs_iu @ x.w.T) ** 2  # [i, l]
    signal = np.diag(gains).copy()
    psi_iu = gains.sum(axis=1) - signal + 1.0
    if not ota:
        psi_iu = psi_iu + x.p @ (np.abs(eff.d2d_iu) ** 2)
    iu_rate = np.log1p(signal / psi_iu)
    iu_throughput = t_i * iu_rate

    # EU 能量，物理单位，不计噪声
    energy = np.sum(np.abs(eff.energy_bs_eu @ x.v.T) ** 2, axis=1)
    if not ota:
        energy = energy + x.p @ (np.abs(eff.energy_d2d_eu) ** 2)
    harvested = t_e * cfg.rho * energy

    # D2D
    d2d_signal = x.p * np.abs(eff.d2d_direct) ** 2
    cross_gain = np.abs(eff.d2d_cross) ** 2
    np.fill_diagonal(cross_gain, 0.0)
    mutual = x.p @ cross_gain  # [k] = Σ_{l≠k} p_l |g_lk|²
    if ota:
        psi_d = mutual + 1.0
        d2d_throughput = t_d * np.log1p(d2d_signal / psi_d)
        d2d_psi = psi_d[:, None]
    else:
        psi_ti = mutual + np.sum(np.abs(eff.bs_d2d @ x.w.T) ** 2, axis=1) + 1.0
        psi_te = mutual + np.sum(np.abs(eff.bs_d2d @ x.v.T) ** 2, axis=1) + 1.0
        d2d_throughput = t_i * np.log1p(d2d_signal / psi_ti) + t_e * np.log1p(d2d_signal / psi_te)
        d2d_psi = np.column_stack([psi_ti, psi_te])

    objective = float(iu_throughput.min())
    penalty = penalty_omega(x.theta) if x.theta.size else 0.0

    residuals: Dict[str, float] = {}
    if cfg.e_min > 0:
        for j, value in enumerate(harvested):
            residuals[f"({tag}b) energy EU {j}"] = _ratio_residual(float(value), cfg.e_min)
    for k, value in enumerate(d2d_throughput):
        residuals[f"({tag}c) D2D rate {k}"] = _ratio_residual(float(value), cfg.r_k_min)
    residuals[f"({tag}d) time budget"] = 1.0 - float(x.t.sum())
    used = t_i * _power_sq(x.w).sum() + t_e * _power_sq(x.v).sum()
    budget = cfg.p_b_max * (1.0 - t_d)
    residuals[f"({tag}e) BS power budget"] = (budget - used) / cfg.p_b_max
    for i, value in enumerate(_power_sq(x.w)):
        residuals[f"({tag}f) IU beam {i}"] = (cfg.p_b_max - value) / cfg.p_b_max
    for j, value in enumerate(_power_sq(x.v)):
        residuals[f"({tag}f) EU beam {j}"] = (cfg.p_b_max - value) / cfg.p_b_max
    for k, value in enumerate(x.p):
        load = t_d * value if ota else value
        residuals[f"({tag}g) D2D power {k}"] = (cfg.p_k_max - load) / cfg.p_k_max
        residuals[f"({tag}g) D2D power nonneg {k}"] = value / cfg.p_k_max
    for n, value in enumerate(np.abs(x.theta)):
        residuals[f"(12) IRS modulus {n}"] = 1.0 - float(value) ** 2

    return ModelEval(
        scenario=scenario,
        iu_rate=iu_rate,
        iu_psi=psi_iu,
        iu_throughput=iu_throughput,
        eu_energy=energy,
        eu_harvested=harvested,
        d2d_throughput=d2d_throughput,
        d2d_psi=d2d_psi,
        objective=objective,
        penalty=penalty,
        residuals=residuals,
    )


def evaluate_nota(ch: ChannelSet, x: DesignPoint, cfg: ScenarioConfig) -> ModelEval:
    """N-OTA 场景精确求值（D2D 与基站传输同时进行）"""
    return _evaluate(ch, x, cfg, ScenarioKind.NOTA)


def evaluate_ota(ch: ChannelSet, x: DesignPoint, cfg: ScenarioConfig) -> ModelEval:
    """OTA 场景精确求值（D2D 占用独立时隙 t_d）"""
    return _evaluate(ch, x, cfg, ScenarioKind.OTA)


def evaluate(ch: ChannelSet, x: DesignPoint, cfg: ScenarioConfig, scenario: Optional[ScenarioKind] = None) -> ModelEval:
    return _evaluate(ch, x, cfg, scenario or x.scenario)
