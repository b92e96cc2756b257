"""
凸下界（surrogate）服务
对数比值下界、平方线性化以及各子问题速率/能量/惩罚项的模板

模板同时提供数值求值 value(x) 与精确对应量 exact(x)，x 为子问题基础布局下的实向量。
"""
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from app.exceptions import DegenerateInputException, LoweringException, TrustRegionException, ValidationException
from app.models import ScenarioConfig, ScenarioKind
from app.services.conic import (
    AffineForm,
    ComplexAffineForm,
    SubproblemKind,
    VariableLayout,
    linearize_square,
)
from app.services.scenario import ChannelSet
from app.services.system_model import DesignPoint, effective_channels, penalty_omega

ArrayLike = Union[float, np.ndarray]


def _require_positive(**values: ArrayLike) -> None:
    for name, value in values.items():
        if np.any(np.asarray(value) <= 0):
            raise DegenerateInputException(f"{name} must be strictly positive")


def lb_log1p_ratio(x: ArrayLike, y: ArrayLike, x_bar: ArrayLike, y_bar: ArrayLike) -> ArrayLike:
    """ln(1 + x/y) 在 (x̄, ȳ) 处的凹下界"""
    _require_positive(x=x, y=y, x_bar=x_bar, y_bar=y_bar)
    r = np.asarray(x_bar) / np.asarray(y_bar)
    return np.log1p(r) + r / (1.0 + r) * (2.0 - np.asarray(x_bar) / x - np.asarray(y) / y_bar)


def lb_log1p_ratio_over_t(x: ArrayLike, y: ArrayLike, t: ArrayLike,
                          x_bar: ArrayLike, y_bar: ArrayLike, t_bar: ArrayLike) -> ArrayLike:
    """ln(1 + x/y)/t 在 (x̄, ȳ, t̄) 处的凹下界"""
    _require_positive(x=x, y=y, t=t, x_bar=x_bar, y_bar=y_bar, t_bar=t_bar)
    r = np.asarray(x_bar) / np.asarray(y_bar)
    log_r = np.log1p(r)
    return (2.0 / t_bar) * log_r + r / (t_bar * (1.0 + r)) * (2.0 - np.asarray(x_bar) / x - np.asarray(y) / y_bar) \
        - log_r / np.asarray(t_bar) ** 2 * t


def lb_square(x: ArrayLike, x_bar: ArrayLike) -> ArrayLike:
    """x² ≥ 2x·x̄ − x̄²"""
    return 2.0 * np.asarray(x) * x_bar - np.asarray(x_bar) ** 2


def lb_penalty(theta: np.ndarray, theta_bar: np.ndarray) -> float:
    """Ω(θ) 在 θ̄ 处的凹下界 1/N − 1/Σ(2Re{θ̄*θ} − |θ̄|²)"""
    theta, theta_bar = np.asarray(theta, dtype=complex), np.asarray(theta_bar, dtype=complex)
    if theta.shape != theta_bar.shape or theta.size == 0:
        raise ValidationException("theta and theta_bar must be nonempty with equal shapes")
    denom = float(np.sum(2.0 * np.real(np.conj(theta_bar) * theta) - np.abs(theta_bar) ** 2))
    if denom <= 0:
        raise TrustRegionException("penalty surrogate evaluated outside its trust region")
    return 1.0 / theta.size - 1.0 / denom


@dataclass(frozen=True)
class SurrogateCoefficients:
    a: float
    b: float
    c: float
    x_bar: float
    y_bar: float
    t_bar: Optional[float] = None

    @classmethod
    def for_log1p_ratio(cls, x_bar: float, y_bar: float, weight: float = 1.0) -> "SurrogateCoefficients":
        _require_positive(x_bar=x_bar, y_bar=y_bar, weight=weight)
        r = x_bar / y_bar
        return cls(weight * np.log1p(r), weight * r / (1.0 + r), 0.0, float(x_bar), float(y_bar))

    @classmethod
    def for_log1p_ratio_over_t(cls, x_bar: float, y_bar: float, t_bar: float) -> "SurrogateCoefficients":
        _require_positive(x_bar=x_bar, y_bar=y_bar, t_bar=t_bar)
        r = x_bar / y_bar
        log_r = np.log1p(r)
        return cls(2.0 * log_r / t_bar, r / (t_bar * (1.0 + r)), log_r / t_bar ** 2,
                   float(x_bar), float(y_bar), float(t_bar))


@dataclass(frozen=True)
class QuadraticForm:
    """Σ_j |f_j(x)|² + linear(x)"""
    terms: Tuple[ComplexAffineForm, ...]
    linear: AffineForm

    def value(self, x: np.ndarray) -> float:
        return float(sum(abs(t.value(x)) ** 2 for t in self.terms) + self.linear.value(x))

    def linearize(self, x_bar: np.ndarray) -> AffineForm:
        """在 x̄ 处逐项线性化，处处不大于 value，x̄ 处相等"""
        out = self.linear
        for term in self.terms:
            out = out + linearize_square(term, term.value(x_bar))
        return out


@dataclass(frozen=True)
class TrustRegionCut:
    """仿射函数 L，要求 L ≥ 0；anchor = L(x̄) > 0"""
    form: AffineForm
    anchor: float
    label: str

    def value(self, x: np.ndarray) -> float:
        return self.form.value(x)

    def contains(self, x: np.ndarray, margin: float = 0.0) -> bool:
        return self.value(x) >= margin * self.anchor


@dataclass(frozen=True)
class RateTemplate:
    """
    速率项的凹下界 a + b(2 − anchor/L(x) − ψ(x)/ȳ) − c·τ(x)

    tau_index 不为空时对应 ln(1+X/ψ)/τ 族，否则对应 weight·ln(1+X/ψ)。
    """
    label: str
    coefficients: SurrogateCoefficients
    signal: QuadraticForm
    psi: QuadraticForm
    cut: TrustRegionCut
    tau_index: Optional[int] = None
    weight: float = 1.0

    def value(self, x: np.ndarray) -> float:
        k = self.coefficients
        denom = self.cut.value(x)
        if denom <= 0:
            raise TrustRegionException(f"{self.label}: point outside trust region")
        tau = x[self.tau_index] if self.tau_index is not None else 0.0
        return float(k.a + k.b * (2.0 - self.cut.anchor / denom - self.psi.value(x) / k.y_bar) - k.c * tau)

    def exact(self, x: np.ndarray) -> float:
        rate = self.weight * np.log1p(self.signal.value(x) / self.psi.value(x))
        if self.tau_index is not None:
            rate = rate / x[self.tau_index]
        return float(rate)


@dataclass(frozen=True)
class EnergyTemplate:
    """能量的仿射下界（物理单位 mW）"""
    label: str
    exact_form: QuadraticForm
    affine: AffineForm

    def value(self, x: np.ndarray) -> float:
        return self.affine.value(x)

    def exact(self, x: np.ndarray) -> float:
        return self.exact_form.value(x)


@dataclass(frozen=True)
class PenaltyTemplate:
    """1/N − 1/L(θ)，L 为 Σ|θ_n|² 的线性化"""
    num_elements: int
    modulus: QuadraticForm
    cut: TrustRegionCut

    def value(self, x: np.ndarray) -> float:
        denom = self.cut.value(x)
        if denom <= 0:
            raise TrustRegionException("penalty surrogate evaluated outside its trust region")
        return 1.0 / self.num_elements - 1.0 / denom

    def exact(self, x: np.ndarray) -> float:
        return 1.0 / self.num_elements - 1.0 / self.modulus.value(x)


@dataclass(frozen=True)
class BudgetSpec:
    """子问题降阶需要的静态量"""
    p_b_max: float
    p_k_max: float
    energy_scale: float  # ρ / e_min，无能量需求时为 0
    r_k_min: float
    tau_bar: Tuple[float, ...]


@dataclass(frozen=True)
class SubproblemTemplates:
    kind: SubproblemKind
    layout: VariableLayout
    expansion: DesignPoint
    x_bar: np.ndarray
    iu_rates: Tuple[RateTemplate, ...]
    energy: Tuple[EnergyTemplate, ...]
    d2d_rates: Tuple[Tuple[str, Tuple[RateTemplate, ...]], ...]
    penalty: Optional[PenaltyTemplate]
    eta: float
    objective_offset: float
    trust_margin: float
    budget: BudgetSpec

    def encode(self, point: DesignPoint) -> np.ndarray:
        return encode_point(self.layout, point)

    def decode(self, x: np.ndarray) -> DesignPoint:
        """由子问题解（可含辅助变量）恢复设计点，未参与优化的变量取展开点值"""
        values = self.layout.unpack(np.asarray(x)[:self.layout.size])
        changes = {}
        if "w" in values:
            changes["w"] = values["w"]
            changes["v"] = values["v"]
            changes["p"] = np.maximum(values["p"].real, 0.0)
        if "tau" in values:
            changes["t"] = 1.0 / np.asarray(values["tau"].real, dtype=float)
        if "theta" in values:
            changes["theta"] = values["theta"]
        return self.expansion.replace(**changes)

    def surrogate_objective(self, x: np.ndarray) -> float:
        """min_i IU 模板 + η·惩罚模板 + 常数项"""
        value = min(t.value(x) for t in self.iu_rates)
        if self.penalty is not None and self.eta > 0:
            value += self.eta * self.penalty.value(x)
        return value + self.objective_offset


def build_layout(ch: ChannelSet, cfg: ScenarioConfig, kind: SubproblemKind) -> VariableLayout:
    """子问题基础变量布局，波束按 √P_B、D2D 功率按 P_k 标准化"""
    layout = VariableLayout()
    if kind.block == "phase":
        layout.add("theta", (ch.num_irs_elements,), is_complex=True)
        return layout
    layout.add("w", (ch.num_ius, ch.num_bs_antennas), is_complex=True, scale=np.sqrt(cfg.p_b_max))
    layout.add("v", (ch.num_eus, ch.num_bs_antennas), is_complex=True, scale=np.sqrt(cfg.p_b_max))
    layout.add("p", (ch.num_d2d_pairs,), scale=cfg.p_k_max)
    if kind.block == "beam":
        layout.add("tau", (3 if kind.scenario is ScenarioKind.OTA else 2,))
    return layout


def encode_point(layout: VariableLayout, point: DesignPoint) -> np.ndarray:
    values = {"w": point.w, "v": point.v, "p": point.p, "tau": point.tau, "theta": point.theta}
    return layout.pack({k: v for k, v in values.items() if k in layout})


def _row_selector(shape: Tuple[int, int], row: int, coeffs: np.ndarray) -> np.ndarray:
    sel = np.zeros(shape, dtype=complex)
    sel[row] = coeffs
    return sel


def _beam_term(layout: VariableLayout, name: str, channel_row: np.ndarray, beam: int) -> ComplexAffineForm:
    """h · (第 beam 个波束)"""
    return layout.complex_form(name, _row_selector(layout.blocks[name].shape, beam, channel_row))


def _theta_term(layout: VariableLayout, coeff: np.ndarray, direct: complex) -> ComplexAffineForm:
    """direct + coeff · θ"""
    return layout.complex_form("theta", coeff, direct)


def _zero(layout: VariableLayout) -> AffineForm:
    return AffineForm.constant(0.0, layout.size)


def _expansion_cut(form: ComplexAffineForm, x_bar: np.ndarray, label: str) -> TrustRegionCut:
    beta = form.value(x_bar)
    anchor = abs(beta) ** 2
    if anchor <= 0:
        raise DegenerateInputException(f"{label}: zero numerator at the expansion point")
    return TrustRegionCut(linearize_square(form, beta), anchor, label)


def _rate_template(label: str, signal: QuadraticForm, psi: QuadraticForm, cut: TrustRegionCut,
                   x_bar: np.ndarray, *, tau_index: Optional[int] = None, tau_bar: float = 1.0,
                   weight: float = 1.0) -> RateTemplate:
    sig, interf = signal.value(x_bar), psi.value(x_bar)
    if sig <= 0:
        raise DegenerateInputException(f"{label}: zero numerator at the expansion point")
    if tau_index is not None:
        coeffs = SurrogateCoefficients.for_log1p_ratio_over_t(sig, interf, tau_bar)
    else:
        coeffs = SurrogateCoefficients.for_log1p_ratio(sig, interf, weight)
    return RateTemplate(label, coeffs, signal, psi, cut, tau_index, 1.0 if tau_index is not None else weight)


def _check_kind(kind: SubproblemKind, layout: VariableLayout) -> None:
    needed = "theta" if kind.block == "phase" else "w"
    if needed not in layout:
        raise LoweringException(f"layout does not match subproblem kind {kind.value}")


def build_iu_rate_surrogate(ch: ChannelSet, x_bar: DesignPoint, cfg: ScenarioConfig, which: SubproblemKind,
                            layout: Optional[VariableLayout] = None) -> Tuple[RateTemplate, ...]:
    """
    IU 吞吐量的凹下界模板（每个 IU 一个）

    Args:
        ch: 物理信道
        x_bar: 可行展开点
        cfg: 场景配置
        which: 子问题类型
        layout: 基础变量布局，缺省时按 which 构建

    Returns:
        各 IU 的 RateTemplate，附带信赖域割
    """
    which = SubproblemKind(which)
    layout = layout or build_layout(ch, cfg, which)
    _check_kind(which, layout)
    x_vec = encode_point(layout, x_bar)
    nota = which.scenario is ScenarioKind.NOTA
    eff = effective_channels(ch, x_bar.theta)
    templates = []
    for i in range(ch.num_ius):
        label = f"({'15' if which.block != 'phase' else '28'}) IU rate {i}"
        if which.block == "phase":
            aff = eff.affine
            coeff, direct = aff.bs_iu.coeff[i], aff.bs_iu.direct[i]
            sig = _theta_term(layout, coeff.T @ x_bar.w[i], direct @ x_bar.w[i])
            interf = [_theta_term(layout, coeff.T @ x_bar.w[l], direct @ x_bar.w[l])
                      for l in range(ch.num_ius) if l != i]
            if nota:
                interf += [_theta_term(layout, aff.d2d_iu.coeff[k, i], aff.d2d_iu.direct[k, i]).scaled(np.sqrt(x_bar.p[k]))
                           for k in range(ch.num_d2d_pairs)]
            linear = _zero(layout) + 1.0
        else:
            sig = _beam_term(layout, "w", eff.bs_iu[i], i)
            interf = [_beam_term(layout, "w", eff.bs_iu[i], l) for l in range(ch.num_ius) if l != i]
            linear = _zero(layout) + 1.0
            if nota:
                linear = linear + layout.real_form("p", np.abs(eff.d2d_iu[:, i]) ** 2)
        signal = QuadraticForm((sig,), _zero(layout))
        psi = QuadraticForm(tuple(interf), linear)
        cut = _expansion_cut(sig, x_vec, label)
        if which.block == "beam":
            templates.append(_rate_template(label, signal, psi, cut, x_vec,
                                            tau_index=layout.index("tau", 0), tau_bar=float(x_bar.tau[0])))
        else:
            templates.append(_rate_template(label, signal, psi, cut, x_vec, weight=float(x_bar.t[0])))
    return tuple(templates)


def build_energy_linearization(ch: ChannelSet, x_bar: DesignPoint, cfg: ScenarioConfig, which: SubproblemKind,
                               layout: Optional[VariableLayout] = None) -> Tuple[EnergyTemplate, ...]:
    """能量 E 的仿射下界（每个 EU 一个），物理单位"""
    which = SubproblemKind(which)
    layout = layout or build_layout(ch, cfg, which)
    _check_kind(which, layout)
    x_vec = encode_point(layout, x_bar)
    nota = which.scenario is ScenarioKind.NOTA
    eff = effective_channels(ch, x_bar.theta)
    templates = []
    for j in range(ch.num_eus):
        if which.block == "phase":
            aff = eff.affine_energy
            coeff, direct = aff.bs_eu.coeff[j], aff.bs_eu.direct[j]
            terms = [_theta_term(layout, coeff.T @ x_bar.v[l], direct @ x_bar.v[l]) for l in range(ch.num_eus)]
            if nota:
                terms += [_theta_term(layout, aff.d2d_eu.coeff[k, j], aff.d2d_eu.direct[k, j]).scaled(np.sqrt(x_bar.p[k]))
                          for k in range(ch.num_d2d_pairs)]
            linear = _zero(layout)
            label = f"(31) energy EU {j}"
        else:
            terms = [_beam_term(layout, "v", eff.energy_bs_eu[j], l) for l in range(ch.num_eus)]
            linear = _zero(layout)
            if nota:
                linear = linear + layout.real_form("p", np.abs(eff.energy_d2d_eu[:, j]) ** 2)
            label = f"(17) energy EU {j}"
        exact = QuadraticForm(tuple(terms), linear)
        templates.append(EnergyTemplate(label, exact, exact.linearize(x_vec)))
    return tuple(templates)


def build_d2d_rate_surrogate(ch: ChannelSet, x_bar: DesignPoint, cfg: ScenarioConfig, which: SubproblemKind,
                             layout: Optional[VariableLayout] = None) -> Tuple[Tuple[str, Tuple[RateTemplate, ...]], ...]:
    """
    D2D 吞吐量下界模板，每对返回 (标签, 模板组)

    N-OTA 每对两个模板（t_i 与 t_e 两段），OTA 每对一个（t_d 段）。
    """
    which = SubproblemKind(which)
    layout = layout or build_layout(ch, cfg, which)
    _check_kind(which, layout)
    x_vec = encode_point(layout, x_bar)
    nota = which.scenario is ScenarioKind.NOTA
    eff = effective_channels(ch, x_bar.theta)
    phase = which.block == "phase"
    tag = "35" if phase else "21"
    pairs = []
    for k in range(ch.num_d2d_pairs):
        others = [l for l in range(ch.num_d2d_pairs) if l != k]
        if phase:
            aff = eff.affine
            h_k = _theta_term(layout, aff.d2d_direct.coeff[k], aff.d2d_direct.direct[k])
            signal = QuadraticForm((h_k.scaled(np.sqrt(x_bar.p[k])),), _zero(layout))
            cut = _expansion_cut(h_k, x_vec, f"({tag}) D2D link {k}")
            mutual = [_theta_term(layout, aff.d2d_cross.coeff[l, k], aff.d2d_cross.direct[l, k]).scaled(np.sqrt(x_bar.p[l]))
                      for l in others]
            bs_coeff, bs_direct = aff.bs_d2d.coeff[k], aff.bs_d2d.direct[k]
            from_w = [_theta_term(layout, bs_coeff.T @ x_bar.w[i], bs_direct @ x_bar.w[i]) for i in range(ch.num_ius)]
            from_v = [_theta_term(layout, bs_coeff.T @ x_bar.v[j], bs_direct @ x_bar.v[j]) for j in range(ch.num_eus)]
            linear = _zero(layout) + 1.0
        else:
            gain = np.zeros(ch.num_d2d_pairs)
            gain[k] = abs(eff.d2d_direct[k]) ** 2
            signal = QuadraticForm((), layout.real_form("p", gain))
            selector = np.zeros(ch.num_d2d_pairs)
            selector[k] = 1.0
            p_form = layout.real_form("p", selector)
            anchor = p_form.value(x_vec)
            if anchor <= 0:
                raise DegenerateInputException(f"D2D pair {k}: zero power at the expansion point")
            cut = TrustRegionCut(p_form, anchor, f"({tag}) D2D power {k}")
            mutual = []
            cross = np.abs(eff.d2d_cross[:, k]) ** 2
            cross[k] = 0.0
            linear = _zero(layout) + 1.0 + layout.real_form("p", cross)
            from_w = [_beam_term(layout, "w", eff.bs_d2d[k], i) for i in range(ch.num_ius)]
            from_v = [_beam_term(layout, "v", eff.bs_d2d[k], j) for j in range(ch.num_eus)]

        label = f"({tag}) D2D rate {k}"
        if nota:
            segments = [("t_i", 0, tuple(mutual + from_w)), ("t_e", 1, tuple(mutual + from_v))]
        else:
            segments = [("t_d", 2, tuple(mutual))]
        group = []
        for name, idx, terms in segments:
            psi = QuadraticForm(terms, linear)
            seg_label = f"{label} {name}"
            if which.block == "beam":
                group.append(_rate_template(seg_label, signal, psi, cut, x_vec,
                                            tau_index=layout.index("tau", idx), tau_bar=float(x_bar.tau[idx])))
            else:
                group.append(_rate_template(seg_label, signal, psi, cut, x_vec, weight=float(x_bar.t[idx])))
        pairs.append((label, tuple(group)))
    return tuple(pairs)


def build_penalty_template(x_bar: DesignPoint, layout: VariableLayout) -> PenaltyTemplate:
    n = x_bar.theta.size
    x_vec = encode_point(layout, x_bar)
    terms = tuple(_theta_term(layout, np.eye(n)[idx], 0.0) for idx in range(n))
    modulus = QuadraticForm(terms, _zero(layout))
    anchor = modulus.value(x_vec)
    if anchor <= 0:
        raise DegenerateInputException("penalty undefined for theta = 0")
    return PenaltyTemplate(n, modulus, TrustRegionCut(modulus.linearize(x_vec), anchor, "(29) penalty"))


def build_subproblem_templates(ch: ChannelSet, x_bar: DesignPoint, cfg: ScenarioConfig, kind: SubproblemKind,
                               eta: float = 0.0, trust_margin: float = 1e-6) -> SubproblemTemplates:
    """
    在展开点 x̄ 处构建某类子问题的全部模板

    Args:
        ch: 物理信道
        x_bar: 展开点（可行性问题中其 τ 即固定的 τ⁽⁰⁾）
        cfg: 场景配置
        kind: 子问题类型
        eta: 惩罚权重
        trust_margin: 信赖域严格内点裕量 δ

    Returns:
        SubproblemTemplates
    """
    kind = SubproblemKind(kind)
    if x_bar.scenario is not kind.scenario:
        raise LoweringException(f"expansion point is {x_bar.scenario.value}, subproblem is {kind.value}")
    if kind.block == "phase" and ch.num_irs_elements == 0:
        raise LoweringException("phase subproblem needs at least one IRS element")
    x_bar.check_dims(ch)
    layout = build_layout(ch, cfg, kind)
    x_vec = encode_point(layout, x_bar)

    iu = build_iu_rate_surrogate(ch, x_bar, cfg, kind, layout)
    energy: Tuple[EnergyTemplate, ...] = ()
    if cfg.e_min > 0:
        energy = build_energy_linearization(ch, x_bar, cfg, kind, layout)
        for template in energy:
            if template.value(x_vec) <= 0:
                raise DegenerateInputException(f"{template.label}: no harvested energy at the expansion point")
    d2d: Sequence = ()
    if cfg.r_k_min > 0:
        d2d = build_d2d_rate_surrogate(ch, x_bar, cfg, kind, layout)

    penalty = None
    offset = 0.0
    if x_bar.theta.size:
        if kind.block == "phase":
            penalty = build_penalty_template(x_bar, layout)
        elif eta > 0:
            offset = eta * penalty_omega(x_bar.theta)

    budget = BudgetSpec(
        p_b_max=cfg.p_b_max,
        p_k_max=cfg.p_k_max,
        energy_scale=cfg.rho / cfg.e_min if cfg.e_min > 0 else 0.0,
        r_k_min=cfg.r_k_min,
        tau_bar=tuple(float(v) for v in x_bar.tau),
    )
    return SubproblemTemplates(
        kind=kind,
        layout=layout,
        expansion=x_bar,
        x_bar=x_vec,
        iu_rates=iu,
        energy=energy,
        d2d_rates=tuple(d2d),
        penalty=penalty,
        eta=float(eta),
        objective_offset=offset,
        trust_margin=trust_margin,
        budget=budget,
    )
