"""
场景与信道生成服务
按仿真设定生成几何位置、路径损耗、Rician/Rayleigh 小尺度衰落以及 BS-IRS 视距矩阵
"""
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np
from loguru import logger

from app.exceptions import ChannelGenerationException, ValidationException
from app.models import ScenarioConfig

SNAPSHOT_FORMAT_VERSION = 1
REDRAW_BUDGET = 100
MIN_DISTANCE = 1e-6


@dataclass(frozen=True)
class ChannelSet:
    """
    一次信道实现（物理单位，未按噪声归一化）

    约定: IU 的等效行信道为 conj(bs_to_iu) + (θ · conj(irs_to_iu)) @ bs_to_irs，
    其余级联信道同理。d2d_cross[l, k] 为第 l 个发射机到第 k 个接收机，对角线不使用。
    """
    bs_to_irs: np.ndarray  # (N, M)
    bs_to_iu: np.ndarray  # (U_I, M)
    bs_to_eu: np.ndarray  # (U_E, M)
    bs_to_d2drx: np.ndarray  # (K, M)
    irs_to_iu: np.ndarray  # (U_I, N)
    irs_to_eu: np.ndarray  # (U_E, N)
    irs_to_d2drx: np.ndarray  # (K, N)
    d2dtx_to_irs: np.ndarray  # (K, N)
    d2d_direct: np.ndarray  # (K,)
    d2d_cross: np.ndarray  # (K, K)
    d2dtx_to_iu: np.ndarray  # (K, U_I)
    d2dtx_to_eu: np.ndarray  # (K, U_E)
    noise_power_mw: float

    @property
    def num_bs_antennas(self) -> int:
        return self.bs_to_iu.shape[1]

    @property
    def num_irs_elements(self) -> int:
        return self.bs_to_irs.shape[0]

    @property
    def num_ius(self) -> int:
        return self.bs_to_iu.shape[0]

    @property
    def num_eus(self) -> int:
        return self.bs_to_eu.shape[0]

    @property
    def num_d2d_pairs(self) -> int:
        return self.d2d_direct.shape[0]

    def validate(self, config: Optional[ScenarioConfig] = None) -> "ChannelSet":
        """检查维度一致性与有限性"""
        m, n = self.num_bs_antennas, self.num_irs_elements
        ui, ue, k = self.num_ius, self.num_eus, self.num_d2d_pairs
        expected = {
            "bs_to_irs": (n, m), "bs_to_iu": (ui, m), "bs_to_eu": (ue, m), "bs_to_d2drx": (k, m),
            "irs_to_iu": (ui, n), "irs_to_eu": (ue, n), "irs_to_d2drx": (k, n), "d2dtx_to_irs": (k, n),
            "d2d_direct": (k,), "d2d_cross": (k, k), "d2dtx_to_iu": (k, ui), "d2dtx_to_eu": (k, ue),
        }
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValidationException(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValidationException(f"{name} contains non-finite entries")
        if not (np.isfinite(self.noise_power_mw) and self.noise_power_mw > 0):
            raise ValidationException("noise power must be positive and finite")
        if config is not None:
            counts = (config.num_bs_antennas, config.num_irs_elements, config.num_ius,
                      config.num_eus, config.num_d2d_pairs)
            if counts != (m, n, ui, ue, k):
                raise ValidationException(f"channel dimensions {(m, n, ui, ue, k)} do not match config {counts}")
        return self

    def as_arrays(self) -> Dict[str, np.ndarray]:
        return {f.name: np.asarray(getattr(self, f.name)) for f in fields(self)}


def pathloss_gain(distance: Union[float, np.ndarray], exponent: float) -> Union[float, np.ndarray]:
    """大尺度线性增益，路径损耗 30 + 10γ·log10(d) dB"""
    loss_db = 30.0 + 10.0 * exponent * np.log10(distance)
    return 10.0 ** (-loss_db / 10.0)


def bs_irs_gain_db(distance: float, antenna_gain_bs_dbi: float, element_gain_irs_dbi: float) -> float:
    """BS-IRS 链路大尺度增益 (dB)"""
    return antenna_gain_bs_dbi + element_gain_irs_dbi - 35.9 - 22.0 * np.log10(distance)


def los_matrix(rng: np.random.Generator, num_elements: int, num_antennas: int) -> np.ndarray:
    """
    满秩 BS-IRS 视距矩阵，所有元素模为 1

    每个 IRS 行抽取一组到达角 (θ, φ)，每个 BS 列抽取一组离开角；
    行方向使用 θ̄ = π − θ, φ̄ = π + φ。
    """
    theta_r = rng.uniform(0.0, np.pi, num_elements)
    phi_r = rng.uniform(0.0, 2.0 * np.pi, num_elements)
    theta_t = rng.uniform(0.0, np.pi, num_antennas)
    phi_t = rng.uniform(0.0, 2.0 * np.pi, num_antennas)
    row = np.arange(num_elements) * np.sin(np.pi - theta_r) * np.sin(np.pi + phi_r)
    col = np.arange(num_antennas) * np.sin(theta_t) * np.sin(phi_t)
    return np.exp(1j * np.pi * (row[:, None] + col[None, :]))


def rayleigh(rng: np.random.Generator, shape) -> np.ndarray:
    """归一化 CN(0,1) 衰落"""
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)


def rician(rng: np.random.Generator, shape, factor_db: float) -> np.ndarray:
    """Rician 衰落，视距相位每条链路抽取一次"""
    kappa = 10.0 ** (factor_db / 10.0)
    shape = tuple(np.atleast_1d(shape))
    los_phase = rng.uniform(0.0, 2.0 * np.pi, shape[:-1] + (1,))
    los = np.exp(1j * los_phase) * np.ones(shape)
    return np.sqrt(kappa / (1.0 + kappa)) * los + np.sqrt(1.0 / (1.0 + kappa)) * rayleigh(rng, shape)


def _distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """a (P,3) 与 b (Q,3) 两两距离 (P,Q)"""
    return np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)


def _draw_positions(rng: np.random.Generator, config: ScenarioConfig) -> Dict[str, np.ndarray]:
    width, depth = config.deployment_area

    def uniform_users(count: int) -> np.ndarray:
        xy = rng.uniform((0.0, 0.0), (width, depth), (count, 2))
        return np.column_stack([xy, np.full(count, config.user_height)])

    iu = uniform_users(config.num_ius)
    eu = uniform_users(config.num_eus)
    tx = uniform_users(config.num_d2d_pairs)
    heading = rng.uniform(0.0, 2.0 * np.pi, config.num_d2d_pairs)
    offset = config.d2d_pair_distance * np.column_stack([np.cos(heading), np.sin(heading), np.zeros_like(heading)])
    return {"iu": iu, "eu": eu, "d2d_tx": tx, "d2d_rx": tx + offset}


def _geometry_is_degenerate(pos: Dict[str, np.ndarray], bs: np.ndarray, irs: np.ndarray) -> bool:
    receivers = np.vstack([pos["iu"], pos["eu"], pos["d2d_rx"]])
    anchors = np.vstack([bs, irs])
    checks = [
        _distances(receivers, anchors),
        _distances(pos["d2d_tx"], np.vstack([receivers, irs])),
        _distances(bs, irs),
    ]
    return any(d.size and d.min() < MIN_DISTANCE for d in checks)


def generate_channels(config: ScenarioConfig, seed: int) -> ChannelSet:
    """
    生成一次信道实现

    Args:
        config: 场景配置
        seed: 随机种子，相同 (config, seed) 输出完全一致

    Returns:
        物理单位的 ChannelSet

    Raises:
        ChannelGenerationException: 退化几何重抽次数耗尽
    """
    rng = np.random.default_rng(seed)
    bs = np.asarray(config.bs_position, dtype=float)[None, :]
    irs = np.asarray(config.irs_position, dtype=float)[None, :]

    for attempt in range(REDRAW_BUDGET):
        pos = _draw_positions(rng, config)
        if not _geometry_is_degenerate(pos, bs, irs):
            break
        logger.debug(f"Degenerate geometry on attempt {attempt}, redrawing")
    else:
        raise ChannelGenerationException(f"Geometry still degenerate after {REDRAW_BUDGET} redraws (seed={seed})")

    m, n = config.num_bs_antennas, config.num_irs_elements
    k = config.num_d2d_pairs
    g_ray = config.pathloss_exponent_rayleigh

    def ray_link(dist: np.ndarray, size: int) -> np.ndarray:
        # dist: (P,) 每条链路一个距离，返回 (P, size)
        amp = np.sqrt(pathloss_gain(dist, g_ray))
        return amp[:, None] * rayleigh(rng, (dist.shape[0], size))

    d_bs_irs = float(_distances(bs, irs)[0, 0])
    gain_bs_irs = 10.0 ** (bs_irs_gain_db(d_bs_irs, config.antenna_gain_bs_dbi, config.element_gain_irs_dbi) / 10.0)
    bs_to_irs = np.sqrt(gain_bs_irs) * los_matrix(rng, n, m)

    bs_to_iu = ray_link(_distances(pos["iu"], bs)[:, 0], m)
    d_bs_eu = _distances(pos["eu"], bs)[:, 0]
    bs_to_eu = np.sqrt(pathloss_gain(d_bs_eu, config.pathloss_exponent_rician))[:, None] * rician(
        rng, (config.num_eus, m), config.rician_factor_db
    )
    bs_to_d2drx = ray_link(_distances(pos["d2d_rx"], bs)[:, 0], m)

    irs_to_iu = ray_link(_distances(pos["iu"], irs)[:, 0], n)
    irs_to_eu = ray_link(_distances(pos["eu"], irs)[:, 0], n)
    irs_to_d2drx = ray_link(_distances(pos["d2d_rx"], irs)[:, 0], n)
    d2dtx_to_irs = ray_link(_distances(pos["d2d_tx"], irs)[:, 0], n)

    d_tx_rx = _distances(pos["d2d_tx"], pos["d2d_rx"])  # [l, k]
    cross = np.sqrt(pathloss_gain(d_tx_rx, g_ray)) * rayleigh(rng, (k, k))
    d2d_direct = np.diagonal(cross).copy()
    d2d_cross = cross.copy()
    np.fill_diagonal(d2d_cross, 0.0)

    d2dtx_to_iu = np.sqrt(pathloss_gain(_distances(pos["d2d_tx"], pos["iu"]), g_ray)) * rayleigh(rng, (k, config.num_ius))
    d2dtx_to_eu = np.sqrt(pathloss_gain(_distances(pos["d2d_tx"], pos["eu"]), g_ray)) * rayleigh(rng, (k, config.num_eus))

    channels = ChannelSet(
        bs_to_irs=bs_to_irs,
        bs_to_iu=bs_to_iu,
        bs_to_eu=bs_to_eu,
        bs_to_d2drx=bs_to_d2drx,
        irs_to_iu=irs_to_iu,
        irs_to_eu=irs_to_eu,
        irs_to_d2drx=irs_to_d2drx,
        d2dtx_to_irs=d2dtx_to_irs,
        d2d_direct=d2d_direct,
        d2d_cross=d2d_cross,
        d2dtx_to_iu=d2dtx_to_iu,
        d2dtx_to_eu=d2dtx_to_eu,
        noise_power_mw=config.noise_power_mw,
    )
    logger.debug(f"Generated channels: seed={seed}, d_bs_irs={d_bs_irs:.3f} m, gain_bs_irs={10*np.log10(gain_bs_irs):.2f} dB")
    return channels.validate(config)


def save_channels(channels: ChannelSet, path: Union[str, Path]) -> Path:
    """保存为带版本号的 .npz 快照"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = channels.as_arrays()
    with open(path, "wb") as f:
        np.savez(f, format_version=np.int64(SNAPSHOT_FORMAT_VERSION), **arrays)
    return path


def load_channels(path: Union[str, Path]) -> ChannelSet:
    """读取 .npz 快照"""
    with np.load(Path(path)) as data:
        version = int(data["format_version"])
        if version != SNAPSHOT_FORMAT_VERSION:
            raise ValidationException(f"Unsupported channel snapshot version {version}")
        kwargs = {f.name: data[f.name] for f in fields(ChannelSet)}
    kwargs["noise_power_mw"] = float(kwargs["noise_power_mw"])
    return ChannelSet(**kwargs).validate()

