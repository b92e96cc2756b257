"""
pytest 公共配置与夹具
"""
import numpy as np
import pytest

from app.models import AlgorithmOptions, ScenarioConfig
from app.services.scenario import ChannelSet, generate_channels

# 参考材料与虚拟环境不参与收集
collect_ignore_glob = ["examples/*", "venv*", "results/*"]


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="运行耗时的统计测试")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: 多种子统计测试，需要 --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="需要 --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def small_config() -> ScenarioConfig:
    """小规模场景: M=3, N=3, U_I=2, U_E=1, K=2"""
    return ScenarioConfig(
        num_bs_antennas=3,
        num_irs_elements=3,
        num_ius=2,
        num_eus=1,
        num_d2d_pairs=2,
        e_min_dbm=-90.0,
        r_k_min_bps=0.1,
    )


@pytest.fixture
def fast_options() -> AlgorithmOptions:
    return AlgorithmOptions(max_outer_iters=5, convergence_tol=1e-3, rng_seed=3)


@pytest.fixture
def channels(small_config) -> ChannelSet:
    return generate_channels(small_config, seed=7)


@pytest.fixture
def channel_factory():
    """
    手工构造信道，未给出的链路全部为 0

    Returns:
        build(m, n, ui, ue, k, noise=1.0, **links) -> ChannelSet
    """
    def build(m: int, n: int, ui: int, ue: int, k: int, noise: float = 1.0, **links) -> ChannelSet:
        shapes = {
            "bs_to_irs": (n, m), "bs_to_iu": (ui, m), "bs_to_eu": (ue, m), "bs_to_d2drx": (k, m),
            "irs_to_iu": (ui, n), "irs_to_eu": (ue, n), "irs_to_d2drx": (k, n), "d2dtx_to_irs": (k, n),
            "d2d_direct": (k,), "d2d_cross": (k, k), "d2dtx_to_iu": (k, ui), "d2dtx_to_eu": (k, ue),
        }
        arrays = {name: np.zeros(shape, dtype=complex) for name, shape in shapes.items()}
        for name, value in links.items():
            arrays[name] = np.asarray(value, dtype=complex).reshape(shapes[name])
        return ChannelSet(noise_power_mw=noise, **arrays).validate()

    return build
