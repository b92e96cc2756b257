"""
锥规划中间表示与求解服务

约定:
- 复数决策变量按标量交错存放 (Re, Im)，每个变量块带物理尺度因子，物理值 = scale · x。
- 约束块为仿射映射 A x + b 属于某个锥: zero（等式）、nonneg、soc（首元素 ≥ 其余范数）、
  rsoc（2·u·v ≥ ‖w‖²，u, v ≥ 0）。
- 目标为最大化 c·x + offset。

复杂度（未在运行时计算）: 以 U = U_I + U_E 计，nota1 的基础实变量数为 2M·U + K + 2，
降阶后每个速率模板增加 2 个辅助变量与 2 个旋转锥，另有 τ 倒数、功率预算与 ε 图变量；
nota2 的基础实变量数为 2N。具体计数见 docs/conic-lowering.md。
"""
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import yaml
from loguru import logger

from app.exceptions import LoweringException, ValidationException
from app.models import ScenarioKind

if TYPE_CHECKING:
    from app.services.surrogate import RateTemplate, SubproblemTemplates

# τ 的上界，对应 t ≥ 1e-4
TAU_MAX = 1e4


class SubproblemKind(str, Enum):
    NOTA1 = "nota1"
    NOTA2 = "nota2"
    OTA1 = "ota1"
    OTA2 = "ota2"
    FEAS_NOTA = "feas_nota"
    FEAS_OTA = "feas_ota"

    @property
    def scenario(self) -> ScenarioKind:
        return ScenarioKind.OTA if self in (SubproblemKind.OTA1, SubproblemKind.OTA2, SubproblemKind.FEAS_OTA) \
            else ScenarioKind.NOTA

    @property
    def block(self) -> str:
        """"beam"：(w, v, p, τ) 子问题；"phase"：θ 子问题；"feas"：μ 可行性问题"""
        if self in (SubproblemKind.NOTA1, SubproblemKind.OTA1):
            return "beam"
        if self in (SubproblemKind.NOTA2, SubproblemKind.OTA2):
            return "phase"
        return "feas"

    @classmethod
    def for_block(cls, scenario: ScenarioKind, block: str) -> "SubproblemKind":
        table = {
            (ScenarioKind.NOTA, "beam"): cls.NOTA1, (ScenarioKind.NOTA, "phase"): cls.NOTA2,
            (ScenarioKind.OTA, "beam"): cls.OTA1, (ScenarioKind.OTA, "phase"): cls.OTA2,
            (ScenarioKind.NOTA, "feas"): cls.FEAS_NOTA, (ScenarioKind.OTA, "feas"): cls.FEAS_OTA,
        }
        return table[(scenario, block)]


def _pad(a: np.ndarray, n: int) -> np.ndarray:
    if a.shape[0] >= n:
        return a
    return np.concatenate([a, np.zeros(n - a.shape[0])])


@dataclass(frozen=True)
class AffineForm:
    """实仿射函数 coef · x + const，coef 长度可短于 x（其余系数为 0）"""
    coef: np.ndarray
    const: float = 0.0

    @staticmethod
    def constant(value: float, n: int = 0) -> "AffineForm":
        return AffineForm(np.zeros(n), float(value))

    def value(self, x: np.ndarray) -> float:
        n = min(self.coef.shape[0], x.shape[0])
        if np.any(self.coef[n:] != 0):
            raise ValidationException("affine form references variables beyond the given vector")
        return float(self.coef[:n] @ x[:n] + self.const)

    def padded(self, n: int) -> np.ndarray:
        return _pad(self.coef, n)

    def __add__(self, other):
        if isinstance(other, AffineForm):
            n = max(self.coef.shape[0], other.coef.shape[0])
            return AffineForm(_pad(self.coef, n) + _pad(other.coef, n), self.const + other.const)
        return AffineForm(self.coef, self.const + float(other))

    __radd__ = __add__

    def __neg__(self):
        return AffineForm(-self.coef, -self.const)

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, s: float):
        return AffineForm(self.coef * float(s), self.const * float(s))

    __rmul__ = __mul__


@dataclass(frozen=True)
class ComplexAffineForm:
    """复仿射函数，实部与虚部各为一个 AffineForm"""
    re: AffineForm
    im: AffineForm

    def value(self, x: np.ndarray) -> complex:
        return complex(self.re.value(x), self.im.value(x))

    def scaled(self, s: float) -> "ComplexAffineForm":
        return ComplexAffineForm(self.re * s, self.im * s)


def linearize_square(form: ComplexAffineForm, beta: complex) -> AffineForm:
    """|f|² ≥ 2Re{f·conj(β)} − |β|²，在 f = β 处取等"""
    beta = complex(beta)
    return form.re * (2.0 * beta.real) + form.im * (2.0 * beta.imag) - abs(beta) ** 2


@dataclass(frozen=True)
class VariableBlock:
    name: str
    shape: Tuple[int, ...]
    is_complex: bool
    scale: float
    offset: int

    @property
    def count(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1

    @property
    def size(self) -> int:
        return 2 * self.count if self.is_complex else self.count


class VariableLayout:
    """命名变量块到实向量的映射"""

    def __init__(self):
        self.blocks: Dict[str, VariableBlock] = {}
        self.size = 0

    def copy(self) -> "VariableLayout":
        other = VariableLayout()
        other.blocks = dict(self.blocks)
        other.size = self.size
        return other

    def add(self, name: str, shape, is_complex: bool = False, scale: float = 1.0) -> VariableBlock:
        if name in self.blocks:
            raise LoweringException(f"variable block '{name}' already defined")
        shape = tuple(int(s) for s in np.atleast_1d(shape))
        block = VariableBlock(name, shape, is_complex, float(scale), self.size)
        self.blocks[name] = block
        self.size += block.size
        return block

    def __contains__(self, name: str) -> bool:
        return name in self.blocks

    def index(self, name: str, flat: int = 0) -> int:
        block = self.blocks[name]
        if block.is_complex:
            raise LoweringException(f"'{name}' is complex, use complex_form")
        return block.offset + flat

    def real_form(self, name: str, coeffs, const: float = 0.0) -> AffineForm:
        """Σ coeffs · (物理值) + const"""
        block = self.blocks[name]
        c = np.broadcast_to(np.asarray(coeffs, dtype=float), block.shape).reshape(-1)
        coef = np.zeros(block.offset + block.size)
        coef[block.offset:] = block.scale * c
        return AffineForm(coef, float(const))

    def unit(self, name: str, flat: int = 0) -> AffineForm:
        """标准化变量本身（不乘尺度）"""
        block = self.blocks[name]
        coef = np.zeros(block.offset + block.size)
        coef[block.offset + flat] = 1.0
        return AffineForm(coef)

    def complex_form(self, name: str, coeffs, const: complex = 0j) -> ComplexAffineForm:
        """Σ coeffs · z + const，z 为该复变量块的物理值"""
        block = self.blocks[name]
        c = np.broadcast_to(np.asarray(coeffs, dtype=complex), block.shape).reshape(-1) * block.scale
        n = block.offset + block.size
        re, im = np.zeros(n), np.zeros(n)
        re[block.offset::2] = c.real
        re[block.offset + 1::2] = -c.imag
        im[block.offset::2] = c.imag
        im[block.offset + 1::2] = c.real
        const = complex(const)
        return ComplexAffineForm(AffineForm(re, const.real), AffineForm(im, const.imag))

    def pack(self, values: Dict[str, np.ndarray]) -> np.ndarray:
        x = np.zeros(self.size)
        for name, block in self.blocks.items():
            if name not in values:
                continue
            val = np.asarray(values[name]).reshape(-1) / block.scale
            if val.shape[0] != block.count:
                raise ValidationException(f"value for '{name}' has {val.shape[0]} entries, expected {block.count}")
            if block.is_complex:
                x[block.offset:block.offset + block.size:2] = val.real
                x[block.offset + 1:block.offset + block.size:2] = val.imag
            else:
                x[block.offset:block.offset + block.size] = np.real(val)
        return x

    def unpack(self, x: np.ndarray) -> Dict[str, np.ndarray]:
        out = {}
        for name, block in self.blocks.items():
            seg = x[block.offset:block.offset + block.size]
            if block.is_complex:
                val = seg[0::2] + 1j * seg[1::2]
            else:
                val = seg.copy()
            out[name] = (block.scale * val).reshape(block.shape)
        return out

    def describe(self) -> Dict[str, Dict[str, Any]]:
        return {
            name: {"offset": b.offset, "shape": list(b.shape), "complex": b.is_complex, "scale": b.scale}
            for name, b in self.blocks.items()
        }


class ConeKind(str, Enum):
    ZERO = "zero"
    NONNEG = "nonneg"
    SOC = "soc"
    RSOC = "rsoc"


@dataclass(frozen=True)
class ConeBlock:
    """A x + b ∈ 锥，label 记录来源约束"""
    kind: ConeKind
    a: np.ndarray
    b: np.ndarray
    label: str

    def slack(self, x: np.ndarray) -> np.ndarray:
        return self.a @ x + self.b

    def margin(self, x: np.ndarray) -> float:
        """锥内为非负，越界时为负"""
        y = self.slack(x)
        if self.kind is ConeKind.ZERO:
            return -float(np.max(np.abs(y))) if y.size else 0.0
        if self.kind is ConeKind.NONNEG:
            return float(y.min()) if y.size else 0.0
        if self.kind is ConeKind.SOC:
            return float(y[0] - np.linalg.norm(y[1:]))
        u, v, w = y[0], y[1], y[2:]
        return float(min(u, v, 2.0 * u * v - w @ w))


@dataclass(frozen=True)
class ConicProgram:
    """最大化 objective · x + offset，约束为锥块列表"""
    n: int
    objective: np.ndarray
    offset: float
    blocks: Tuple[ConeBlock, ...]
    variables: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    kind: str = ""

    def __post_init__(self):
        if self.objective.shape != (self.n,):
            raise ValidationException("objective length does not match variable count")
        for block in self.blocks:
            if block.a.ndim != 2 or block.a.shape[1] != self.n or block.a.shape[0] != block.b.shape[0]:
                raise ValidationException(f"block '{block.label}' is dimensionally inconsistent")
            if block.kind is ConeKind.RSOC and block.a.shape[0] < 2:
                raise ValidationException(f"rotated cone '{block.label}' needs at least two rows")

    def value(self, x: np.ndarray) -> float:
        return float(self.objective @ x + self.offset)

    def variable(self, x: np.ndarray, name: str) -> np.ndarray:
        info = self.variables[name]
        size = int(np.prod(info["shape"])) * (2 if info["complex"] else 1)
        return x[info["offset"]:info["offset"] + size]

    def count(self, kind: ConeKind) -> int:
        return sum(1 for b in self.blocks if b.kind is kind)

    def labels(self) -> List[str]:
        return [b.label for b in self.blocks]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "format": "ded2d-conic/1",
            "kind": self.kind,
            "n": self.n,
            "sense": "maximize",
            "objective": self.objective.tolist(),
            "offset": self.offset,
            "variables": self.variables,
            "blocks": [
                {"kind": b.kind.value, "label": b.label, "a": b.a.tolist(), "b": b.b.tolist()}
                for b in self.blocks
            ],
        }

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_yaml(cls, text: str) -> "ConicProgram":
        data = yaml.safe_load(text)
        n = int(data["n"])
        blocks = tuple(
            ConeBlock(ConeKind(b["kind"]), np.asarray(b["a"], dtype=float).reshape(-1, n),
                      np.asarray(b["b"], dtype=float), b["label"])
            for b in data["blocks"]
        )
        return cls(n, np.asarray(data["objective"], dtype=float), float(data["offset"]), blocks,
                   data.get("variables") or {}, data.get("kind", ""))


class ProgramBuilder:
    """逐块构建 ConicProgram，新增辅助变量时自动扩展布局"""

    def __init__(self, layout: VariableLayout, kind: str = ""):
        self.layout = layout.copy()
        self.kind = kind
        self._rows: List[Tuple[ConeKind, List[AffineForm], str]] = []
        self._objective = AffineForm.constant(0.0)
        self._aux = 0

    def new_var(self, name: Optional[str] = None, size: int = 1) -> List[AffineForm]:
        if name is None:
            name = f"aux{self._aux}"
            self._aux += 1
        self.layout.add(name, size)
        return [self.layout.unit(name, i) for i in range(size)]

    def add(self, kind: ConeKind, forms: Sequence[AffineForm], label: str) -> None:
        self._rows.append((kind, list(forms), label))

    def nonneg(self, form: AffineForm, label: str) -> None:
        self.add(ConeKind.NONNEG, [form], label)

    def zero(self, form: AffineForm, label: str) -> None:
        self.add(ConeKind.ZERO, [form], label)

    def soc(self, head: AffineForm, tail: Sequence[AffineForm], label: str) -> None:
        self.add(ConeKind.SOC, [head, *tail], label)

    def rsoc(self, u: AffineForm, v: AffineForm, tail: Sequence[AffineForm], label: str) -> None:
        self.add(ConeKind.RSOC, [u, v, *tail], label)

    def maximize(self, form: AffineForm) -> None:
        self._objective = form

    def build(self) -> ConicProgram:
        n = self.layout.size
        blocks = []
        for kind, forms, label in self._rows:
            a = np.vstack([f.padded(n) for f in forms])
            b = np.array([f.const for f in forms])
            a, b = _normalized(a, b)
            blocks.append(ConeBlock(kind, a, b, label))
        return ConicProgram(n, self._objective.padded(n), self._objective.const, tuple(blocks),
                            self.layout.describe(), self.kind)


def _normalized(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    锥块整体除以最大系数绝对值

    四类锥对正数缩放不变，缩放后的块与原块表示同一约束。
    N-OTA 能量约束中 D2D 项乘以 ρ/e_min 后可达 1e4 量级。
    """
    scale = max(float(np.max(np.abs(a), initial=0.0)), float(np.max(np.abs(b), initial=0.0)))
    if scale > 0.0:
        return a / scale, b / scale
    return a, b


def _stacked(forms: Sequence) -> List[AffineForm]:
    """复形式展开为 (Re, Im) 行"""
    rows: List[AffineForm] = []
    for f in forms:
        if isinstance(f, ComplexAffineForm):
            rows.extend([f.re, f.im])
        else:
            rows.append(f)
    return rows


def _lower_rate(builder: ProgramBuilder, template: "RateTemplate", trust_margin: float) -> AffineForm:
    """
    速率模板 a + b(2 − anchor/L − ψ/ȳ) − c·τ 降阶为关于扩展变量的仿射式

    倒数项与 ψ 的二次部分分别引入辅助变量 u、z:
    u·(L/anchor) ≥ 1 与 z ≥ Σ|f_j|²/ȳ，二者都以旋转锥表示。
    """
    coeffs = template.coefficients
    cut_hat = template.cut.form * (1.0 / template.cut.anchor)
    (u,) = builder.new_var()
    builder.rsoc(u, cut_hat, [AffineForm.constant(np.sqrt(2.0))], f"{template.label} reciprocal")
    builder.nonneg(cut_hat - trust_margin, f"{template.cut.label} trust region")

    expr = AffineForm.constant(coeffs.a + 2.0 * coeffs.b) - coeffs.b * u
    y_bar = coeffs.y_bar
    if template.psi.terms:
        (z,) = builder.new_var()
        tail = [row * (1.0 / np.sqrt(y_bar)) for row in _stacked(template.psi.terms)]
        builder.rsoc(z, AffineForm.constant(0.5), tail, f"{template.label} interference")
        expr = expr - coeffs.b * z
    expr = expr - template.psi.linear * (coeffs.b / y_bar)
    if template.tau_index is not None and coeffs.c:
        tau_coef = np.zeros(template.tau_index + 1)
        tau_coef[template.tau_index] = 1.0
        expr = expr - AffineForm(tau_coef) * coeffs.c
    return expr


def lower_subproblem(templates: "SubproblemTemplates", kind: SubproblemKind) -> ConicProgram:
    """
    将模板集合降阶为 SOCP

    Args:
        templates: surrogate 模块在可行展开点构建的模板
        kind: 子问题类型，须与模板一致

    Returns:
        ConicProgram
    """
    kind = SubproblemKind(kind)
    if templates.kind is not kind:
        raise LoweringException(f"templates were built for {templates.kind.value}, not {kind.value}")
    layout = templates.layout
    block = kind.block
    ota = kind.scenario is ScenarioKind.OTA
    tag = "40" if ota else "8"
    delta = templates.trust_margin
    required_blocks = {"beam": ("w", "v", "p", "tau"), "phase": ("theta",), "feas": ("w", "v", "p")}[block]
    for name in required_blocks:
        if name not in layout:
            raise LoweringException(f"{kind.value} needs variable block '{name}'")

    builder = ProgramBuilder(layout, kind.value)
    budget = templates.budget

    if block == "feas":
        (head,) = builder.new_var("mu")
    else:
        (head,) = builder.new_var("s")

    # 功率与时间约束
    if block in ("beam", "feas"):
        num_ius, num_eus = layout.blocks["w"].shape[0], layout.blocks["v"].shape[0]
        num_pairs = layout.blocks["p"].count
        w_rows = [layout.complex_form("w", _selector(layout.blocks["w"].shape, i, m))
                  for i in range(num_ius) for m in range(layout.blocks["w"].shape[1])]
        v_rows = [layout.complex_form("v", _selector(layout.blocks["v"].shape, j, m))
                  for j in range(num_eus) for m in range(layout.blocks["v"].shape[1])]
        w_rows = [f.scaled(1.0 / np.sqrt(budget.p_b_max)) for f in w_rows]
        v_rows = [f.scaled(1.0 / np.sqrt(budget.p_b_max)) for f in v_rows]
        antennas = layout.blocks["w"].shape[1]
        one = AffineForm.constant(1.0)
        for i in range(num_ius):
            builder.soc(one, _stacked(w_rows[i * antennas:(i + 1) * antennas]), f"({tag}f) IU beam {i}")
        for j in range(num_eus):
            builder.soc(one, _stacked(v_rows[j * antennas:(j + 1) * antennas]), f"({tag}f) EU beam {j}")
        for k in range(num_pairs):
            p_hat = layout.unit("p", k)
            builder.nonneg(p_hat, f"({tag}g) D2D power nonneg {k}")

    if block == "beam":
        num_tau = layout.blocks["tau"].count
        taus = [layout.unit("tau", idx) for idx in range(num_tau)]
        recips = builder.new_var("recip", num_tau)
        names = ("i", "e", "d")
        for idx, (tau, r) in enumerate(zip(taus, recips)):
            builder.nonneg(tau - 1.0, f"tau_{names[idx]} lower bound")
            builder.nonneg(TAU_MAX - tau, f"tau_{names[idx]} upper bound")
            builder.rsoc(r, tau, [AffineForm.constant(np.sqrt(2.0))], f"({tag}d) reciprocal tau_{names[idx]}")
        time_used = recips[0]
        for r in recips[1:]:
            time_used = time_used + r
        builder.nonneg(1.0 - time_used, f"({tag}d) time budget")

        power_used = AffineForm.constant(0.0)
        if w_rows:
            (q_w,) = builder.new_var("q_w")
            builder.rsoc(q_w, taus[0], [f * np.sqrt(2.0) for f in _stacked(w_rows)],
                         f"({tag}e) IU power over tau_i")
            power_used = power_used + q_w
        if v_rows:
            (q_e,) = builder.new_var("q_e")
            builder.rsoc(q_e, taus[1], [f * np.sqrt(2.0) for f in _stacked(v_rows)],
                         f"({tag}e) EU power over tau_e")
            power_used = power_used + q_e
        if ota:
            power_used = power_used + recips[2]
        builder.nonneg(1.0 - power_used, f"({tag}e) BS power budget")
        for k in range(num_pairs):
            cap = taus[2] if ota else AffineForm.constant(1.0)
            builder.nonneg(cap - layout.unit("p", k), f"({tag}g) D2D power {k}")
    elif block == "feas":
        tau_bar = budget.tau_bar
        scale_i, scale_e = 1.0 / np.sqrt(tau_bar[0]), 1.0 / np.sqrt(tau_bar[1])
        rows = [f.scaled(scale_i) for f in w_rows] + [f.scaled(scale_e) for f in v_rows]
        cap = np.sqrt(1.0 - 1.0 / tau_bar[2]) if ota else 1.0
        builder.soc(AffineForm.constant(cap), _stacked(rows), "(37e) BS power budget")
        for k in range(num_pairs):
            cap_k = tau_bar[2] if ota else 1.0
            builder.nonneg(cap_k - layout.unit("p", k), f"(37) D2D power {k}")
    else:
        num_elements = layout.blocks["theta"].count
        for n in range(num_elements):
            theta_n = layout.complex_form("theta", _selector((num_elements,), n))
            builder.soc(AffineForm.constant(1.0), [theta_n.re, theta_n.im], f"(12) IRS modulus {n}")

    # IU 速率: 目标的 ε 图
    for template in templates.iu_rates:
        expr = _lower_rate(builder, template, delta)
        builder.nonneg(expr - head, template.label)

    # 能量
    if templates.energy:
        for template in templates.energy:
            lhs = template.affine * budget.energy_scale
            if block == "beam":
                rhs = layout.unit("tau", 1)
            elif block == "phase":
                rhs = AffineForm.constant(budget.tau_bar[1])
            else:
                rhs = head * budget.tau_bar[1]
            builder.nonneg(lhs - rhs, template.label)

    # D2D 速率
    for label, pair in templates.d2d_rates:
        total = AffineForm.constant(0.0)
        for template in pair:
            total = total + _lower_rate(builder, template, delta)
        rhs = head * budget.r_k_min if block == "feas" else AffineForm.constant(budget.r_k_min)
        builder.nonneg(total - rhs, label)

    objective = head
    if block == "phase" and templates.penalty is not None and templates.eta > 0:
        penalty = templates.penalty
        cut_hat = penalty.cut.form * (1.0 / penalty.cut.anchor)
        (u,) = builder.new_var("u_penalty")
        builder.rsoc(u, cut_hat, [AffineForm.constant(np.sqrt(2.0))], "(29) penalty reciprocal")
        builder.nonneg(cut_hat - delta, f"{penalty.cut.label} trust region")
        objective = objective + templates.eta * (1.0 / penalty.num_elements) - u * (templates.eta / penalty.cut.anchor)
    objective = objective + templates.objective_offset
    builder.maximize(objective)
    program = builder.build()
    logger.debug(f"Lowered {kind.value}: n={program.n}, blocks={len(program.blocks)}, "
                 f"rsoc={program.count(ConeKind.RSOC)}, soc={program.count(ConeKind.SOC)}")
    return program


def _selector(shape: Tuple[int, ...], *index: int) -> np.ndarray:
    sel = np.zeros(shape, dtype=complex)
    sel[index] = 1.0
    return sel


class SolveStatus(str, Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    MAX_ITER = "max_iter"


@dataclass(frozen=True)
class ConicSolution:
    x: Optional[np.ndarray]
    objective: float
    status: SolveStatus
    primal_residual: float
    dual_residual: float
    iterations: int
    wall_seconds: float

    @property
    def has_point(self) -> bool:
        return self.x is not None


def _cvxopt_data(prog: ConicProgram):
    """映射为 cvxopt.conelp 的 (c, G, h, dims, A, b)，h − G x ∈ K"""
    lin_a, lin_b, soc_a, soc_b, soc_dims, eq_a, eq_b = [], [], [], [], [], [], []
    for block in prog.blocks:
        a, b = block.a, block.b
        if block.kind is ConeKind.ZERO:
            eq_a.append(a)
            eq_b.append(-b)
        elif block.kind is ConeKind.NONNEG:
            lin_a.append(a)
            lin_b.append(b)
        else:
            if block.kind is ConeKind.RSOC:
                # 2uv ≥ ‖w‖²  ⇔  (u+v, u−v, √2 w) ∈ SOC
                t = np.zeros((a.shape[0], a.shape[0]))
                t[0, :2] = (1.0, 1.0)
                t[1, :2] = (1.0, -1.0)
                t[2:, 2:] = np.sqrt(2.0) * np.eye(a.shape[0] - 2)
                a, b = t @ a, t @ b
            soc_a.append(a)
            soc_b.append(b)
            soc_dims.append(a.shape[0])
    n = prog.n
    g_rows = lin_a + soc_a
    g = -np.vstack(g_rows) if g_rows else np.zeros((0, n))
    h = np.concatenate(lin_b + soc_b) if g_rows else np.zeros(0)
    dims = {"l": int(sum(x.shape[0] for x in lin_a)), "q": soc_dims, "s": []}
    a_eq = np.vstack(eq_a) if eq_a else None
    b_eq = np.concatenate(eq_b) if eq_b else None
    return -prog.objective, g, h, dims, a_eq, b_eq


# 依次尝试的 KKT 求解器，None 为 cvxopt 默认；后两者带迭代精化
KKT_SOLVERS: Tuple[Optional[str], ...] = (None, "ldl", "ldl2")


def _solve_cvxopt(prog: ConicProgram, tol: float, max_iters: int):
    from cvxopt import matrix, solvers

    c, g, h, dims, a_eq, b_eq = _cvxopt_data(prog)
    kwargs = {}
    if a_eq is not None:
        kwargs = {"A": matrix(np.ascontiguousarray(a_eq)), "b": matrix(np.ascontiguousarray(b_eq))}
    error: Optional[Exception] = None
    fallback = None
    for kktsolver in KKT_SOLVERS:
        options = {"show_progress": False, "abstol": tol, "reltol": tol, "feastol": tol, "maxiters": max_iters}
        if kktsolver is not None:
            options["refinement"] = 2
        try:
            result = solvers.conelp(
                matrix(np.ascontiguousarray(c)), matrix(np.ascontiguousarray(g)), matrix(np.ascontiguousarray(h)),
                dims, kktsolver=kktsolver, options=options, **kwargs
            )
        except (ArithmeticError, ValueError) as e:
            error = e
            logger.warning(f"conelp failed on {prog.kind or 'program'} with kktsolver={kktsolver or 'default'}: {e}")
            continue
        parsed = _parse_conelp(result)
        if parsed[1] is not SolveStatus.MAX_ITER:
            return parsed
        # 未收敛时保留首个结果，继续换 KKT 求解器
        fallback = fallback or parsed
        logger.debug(f"conelp stalled on {prog.kind or 'program'} with kktsolver={kktsolver or 'default'}")
    if fallback is not None:
        return fallback
    raise error


def _parse_conelp(result: Dict[str, Any]):
    status = {
        "optimal": SolveStatus.OPTIMAL,
        "primal infeasible": SolveStatus.INFEASIBLE,
        "dual infeasible": SolveStatus.UNBOUNDED,
    }.get(result["status"], SolveStatus.MAX_ITER)
    x = None
    if status in (SolveStatus.OPTIMAL, SolveStatus.MAX_ITER) and result.get("x") is not None:
        x = np.array(result["x"]).reshape(-1)
    primal = result.get("primal infeasibility")
    dual = result.get("dual infeasibility")
    return x, status, float("nan") if primal is None else float(primal), \
        float("nan") if dual is None else float(dual), int(result.get("iterations") or 0)


SOLVER_BACKENDS = {"cvxopt": _solve_cvxopt}


def solve(prog: ConicProgram, tol: float = 1e-8, max_iters: int = 200, backend: str = "cvxopt") -> ConicSolution:
    """
    求解锥规划

    Args:
        prog: ConicProgram
        tol: 原始/对偶残差与对偶间隙容差
        max_iters: 内点法最大迭代数
        backend: 求解器后端名

    Returns:
        ConicSolution，所有 KKT 求解器都数值失败时状态为 max_iter 且无解点
    """
    if backend not in SOLVER_BACKENDS:
        raise ValidationException(f"Unknown solver backend: {backend}")
    started = time.perf_counter()
    try:
        x, status, primal, dual, iterations = SOLVER_BACKENDS[backend](prog, tol, max_iters)
    except (ArithmeticError, ValueError) as e:
        logger.warning(f"Conic solve failed numerically ({prog.kind}): {e}")
        x, status, primal, dual, iterations = None, SolveStatus.MAX_ITER, float("nan"), float("nan"), 0
    elapsed = time.perf_counter() - started
    objective = prog.value(x) if x is not None else float("nan")
    logger.debug(f"Solved {prog.kind or 'program'}: status={status.value}, obj={objective:.9g}, "
                 f"iters={iterations}, {elapsed * 1e3:.1f} ms")
    return ConicSolution(x, objective, status, primal, dual, iterations, elapsed)
