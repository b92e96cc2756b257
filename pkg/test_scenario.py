"""
场景与信道生成测试
"""
import math

import numpy as np
import pytest

from app.exceptions import ValidationException
from app.models import ScenarioConfig
from app.services.scenario import (
    SNAPSHOT_FORMAT_VERSION,
    bs_irs_gain_db,
    generate_channels,
    load_channels,
    los_matrix,
    pathloss_gain,
    rayleigh,
    rician,
    save_channels,
)


class TestGeometry:
    def test_bs_irs_distance(self):
        cfg = ScenarioConfig()
        d = float(np.linalg.norm(np.subtract(cfg.bs_position, cfg.irs_position)))
        assert d == pytest.approx(math.sqrt(5425))
        assert d == pytest.approx(73.655, abs=1e-3)

    def test_bs_irs_gain(self):
        assert bs_irs_gain_db(73.655, 5.0, 5.0) == pytest.approx(-66.98, abs=0.01)

    def test_pathloss_monotone(self):
        d = np.array([1.0, 5.0, 20.0, 80.0, 200.0])
        gain = pathloss_gain(d, 2.0)
        assert np.all(np.diff(gain) < 0)
        # 1 m 处为 −30 dB
        assert gain[0] == pytest.approx(1e-3)

    def test_table_defaults(self):
        cfg = ScenarioConfig()
        assert (cfg.num_bs_antennas, cfg.num_irs_elements, cfg.num_ius, cfg.num_eus, cfg.num_d2d_pairs) == (6, 10, 2, 2, 3)
        assert cfg.p_b_max == pytest.approx(100.0)
        assert cfg.e_min == pytest.approx(1.0)
        assert cfg.r_k_min == pytest.approx(0.4 * math.log(2.0))
        assert 10 * math.log10(cfg.noise_power_mw) == pytest.approx(-104.0)

    def test_no_energy_requirement(self):
        assert ScenarioConfig(e_min_dbm=None).e_min == 0.0


class TestFading:
    def test_los_unit_modulus(self):
        g = los_matrix(np.random.default_rng(1), 8, 4)
        assert g.shape == (8, 4)
        np.testing.assert_allclose(np.abs(g), 1.0, atol=1e-12)

    def test_rayleigh_mean_power(self):
        h = rayleigh(np.random.default_rng(2), (100000,))
        assert 0.95 <= np.mean(np.abs(h) ** 2) <= 1.05

    def test_rician_mean_power(self):
        h = rician(np.random.default_rng(3), (20000, 4), 10.0)
        assert 0.95 <= np.mean(np.abs(h) ** 2) <= 1.05


class TestGenerateChannels:
    def test_shapes(self, small_config, channels):
        assert channels.bs_to_irs.shape == (3, 3)
        assert channels.bs_to_iu.shape == (2, 3)
        assert channels.d2d_cross.shape == (2, 2)
        assert np.all(np.diag(channels.d2d_cross) == 0)
        assert channels.noise_power_mw == pytest.approx(small_config.noise_power_mw)

    def test_deterministic(self, small_config):
        a = generate_channels(small_config, seed=11).as_arrays()
        b = generate_channels(small_config, seed=11).as_arrays()
        c = generate_channels(small_config, seed=12).as_arrays()
        for name in a:
            np.testing.assert_array_equal(a[name], b[name])
        assert not np.array_equal(a["bs_to_iu"], c["bs_to_iu"])

    def test_bs_irs_link_gain(self, small_config, channels):
        # 视距矩阵模为 1，幅度只由大尺度增益决定
        expected = 10 ** (bs_irs_gain_db(math.sqrt(5425), 5.0, 5.0) / 20)
        np.testing.assert_allclose(np.abs(channels.bs_to_irs), expected, rtol=1e-12)

    def test_degenerate_dimensions(self):
        cfg = ScenarioConfig(num_irs_elements=0, num_eus=0, num_d2d_pairs=0)
        ch = generate_channels(cfg, seed=0)
        assert ch.bs_to_irs.shape == (0, 6)
        assert ch.d2d_direct.shape == (0,)
        assert ch.bs_to_eu.shape == (0, 6)

    def test_config_mismatch(self, channels):
        with pytest.raises(ValidationException):
            channels.validate(ScenarioConfig())


class TestSnapshot:
    def test_save_and_load(self, channels, tmp_path):
        path = save_channels(channels, tmp_path / "ch.npz")
        loaded = load_channels(path)
        for name, value in channels.as_arrays().items():
            np.testing.assert_array_equal(value, getattr(loaded, name))

    def test_unknown_version(self, channels, tmp_path):
        path = tmp_path / "old.npz"
        with open(path, "wb") as f:
            np.savez(f, format_version=np.int64(SNAPSHOT_FORMAT_VERSION + 1), **channels.as_arrays())
        with pytest.raises(ValidationException):
            load_channels(path)
