"""
系统模型求值测试: 等效信道、速率、能量、残差与 Ω
"""
import math

import numpy as np
import pytest

from app.exceptions import DegenerateInputException, ValidationException
from app.models import ScenarioConfig, ScenarioKind
from app.services.system_model import (
    DesignPoint,
    effective_channels,
    evaluate,
    evaluate_nota,
    evaluate_ota,
    penalty_omega,
)


def _tiny_config(**kw) -> ScenarioConfig:
    fields = dict(num_bs_antennas=1, num_irs_elements=1, num_ius=1, num_eus=0, num_d2d_pairs=0,
                  e_min_dbm=None, r_k_min_bps=0.0)
    fields.update(kw)
    return ScenarioConfig(**fields)


def _random_point(rng, ch, cfg, scenario=ScenarioKind.NOTA) -> DesignPoint:
    def beams(rows):
        b = rng.standard_normal((rows, ch.num_bs_antennas)) + 1j * rng.standard_normal((rows, ch.num_bs_antennas))
        return b * math.sqrt(cfg.p_b_max / 4) / max(np.linalg.norm(b), 1e-12) if rows else b

    t = (0.4, 0.6) if scenario is ScenarioKind.NOTA else (0.3, 0.3, 0.4)
    theta = rng.uniform(0.2, 1.0, ch.num_irs_elements) * np.exp(1j * rng.uniform(0, 2 * np.pi, ch.num_irs_elements))
    return DesignPoint(w=beams(ch.num_ius), v=beams(ch.num_eus), p=rng.uniform(0, cfg.p_k_max, ch.num_d2d_pairs),
                       t=t, theta=theta)


def _oracle(ch, x, cfg, ota):
    """逐元素循环实现的独立求值"""
    n0 = ch.noise_power_mw
    g = ch.bs_to_irs
    th = x.theta

    def bs_row(direct, irs_row):
        out = np.conj(direct).copy()
        for n in range(ch.num_irs_elements):
            out = out + th[n] * np.conj(irs_row[n]) * g[n]
        return out

    def d2d_link(direct, irs_row, tx_row):
        out = complex(direct)
        for n in range(ch.num_irs_elements):
            out += np.conj(irs_row[n]) * th[n] * tx_row[n]
        return out

    t_i, t_e = x.t[0], x.t[1]
    iu = []
    for i in range(ch.num_ius):
        h = bs_row(ch.bs_to_iu[i], ch.irs_to_iu[i])
        sig = abs(h @ x.w[i]) ** 2 / n0
        den = 1.0
        for l in range(ch.num_ius):
            if l != i:
                den += abs(h @ x.w[l]) ** 2 / n0
        if not ota:
            for k in range(ch.num_d2d_pairs):
                den += x.p[k] * abs(d2d_link(ch.d2dtx_to_iu[k, i], ch.irs_to_iu[i], ch.d2dtx_to_irs[k])) ** 2 / n0
        iu.append(t_i * math.log(1 + sig / den))

    harvested = []
    for j in range(ch.num_eus):
        h = bs_row(ch.bs_to_eu[j], ch.irs_to_eu[j])
        e = sum(abs(h @ x.v[l]) ** 2 for l in range(ch.num_eus))
        if not ota:
            for k in range(ch.num_d2d_pairs):
                e += x.p[k] * abs(d2d_link(ch.d2dtx_to_eu[k, j], ch.irs_to_eu[j], ch.d2dtx_to_irs[k])) ** 2
        harvested.append(t_e * cfg.rho * e)

    d2d = []
    for k in range(ch.num_d2d_pairs):
        hk = d2d_link(ch.d2d_direct[k], ch.irs_to_d2drx[k], ch.d2dtx_to_irs[k])
        sig = x.p[k] * abs(hk) ** 2 / n0
        mutual = sum(x.p[l] * abs(d2d_link(ch.d2d_cross[l, k], ch.irs_to_d2drx[k], ch.d2dtx_to_irs[l])) ** 2 / n0
                     for l in range(ch.num_d2d_pairs) if l != k)
        if ota:
            d2d.append(x.t[2] * math.log(1 + sig / (mutual + 1)))
        else:
            gb = bs_row(ch.bs_to_d2drx[k], ch.irs_to_d2drx[k])
            psi_i = mutual + sum(abs(gb @ x.w[i]) ** 2 for i in range(ch.num_ius)) / n0 + 1
            psi_e = mutual + sum(abs(gb @ x.v[j]) ** 2 for j in range(ch.num_eus)) / n0 + 1
            d2d.append(t_i * math.log(1 + sig / psi_i) + t_e * math.log(1 + sig / psi_e))
    return np.array(iu), np.array(harvested), np.array(d2d)


class TestEffectiveChannels:
    def test_zero_theta_gives_direct(self, channels):
        eff = effective_channels(channels, np.zeros(channels.num_irs_elements))
        scale = 1 / math.sqrt(channels.noise_power_mw)
        np.testing.assert_allclose(eff.bs_iu, channels.bs_to_iu.conj() * scale)
        np.testing.assert_allclose(eff.d2d_direct, channels.d2d_direct * scale)
        np.testing.assert_allclose(eff.energy_bs_eu, channels.bs_to_eu.conj())

    def test_scalar_expansion(self, channel_factory):
        h_b, h_r, g = 0.3 - 0.2j, 0.7 + 0.1j, -0.4 + 0.9j
        ch = channel_factory(1, 1, 1, 0, 0, bs_to_iu=h_b, irs_to_iu=h_r, bs_to_irs=g)
        theta = np.array([0.6 + 0.8j])
        eff = effective_channels(ch, theta)
        assert eff.bs_iu[0, 0] == pytest.approx(np.conj(h_b) + theta[0] * np.conj(h_r) * g)

    def test_affine(self, channels):
        rng = np.random.default_rng(5)
        n = channels.num_irs_elements
        t1 = rng.standard_normal(n) + 1j * rng.standard_normal(n)
        t2 = rng.standard_normal(n) + 1j * rng.standard_normal(n)
        e0 = effective_channels(channels, np.zeros(n))
        e1, e2 = effective_channels(channels, t1), effective_channels(channels, t2)
        e12 = effective_channels(channels, t1 + t2)
        for name in ("bs_iu", "bs_eu", "bs_d2d", "d2d_iu", "d2d_eu", "d2d_direct", "d2d_cross"):
            lhs = getattr(e12, name) - getattr(e0, name)
            rhs = (getattr(e1, name) - getattr(e0, name)) + (getattr(e2, name) - getattr(e0, name))
            np.testing.assert_allclose(lhs, rhs, atol=1e-12 * np.abs(rhs).max())

    def test_dimension_mismatch(self, channels):
        with pytest.raises(ValidationException):
            effective_channels(channels, np.zeros(channels.num_irs_elements + 1))


class TestEvaluate:
    def test_unit_sinr(self, channel_factory):
        ch = channel_factory(1, 1, 1, 0, 0, bs_to_iu=1.0)
        x = DesignPoint(w=[[1.0]], v=np.zeros((0, 1)), p=[], t=(0.5, 0.5), theta=[1.0])
        ev = evaluate_nota(ch, x, _tiny_config())
        assert ev.iu_throughput[0] == pytest.approx(0.5 * math.log(2.0))
        assert ev.objective == pytest.approx(0.5 * math.log(2.0))

    def test_harvested_energy(self, channel_factory):
        ch = channel_factory(1, 1, 1, 1, 0, bs_to_iu=1.0, bs_to_eu=math.sqrt(2.0))
        x = DesignPoint(w=[[1.0]], v=[[1.0]], p=[], t=(0.5, 0.5), theta=[1.0])
        ev = evaluate_nota(ch, x, _tiny_config(num_eus=1))
        assert ev.eu_energy[0] == pytest.approx(2.0)
        assert ev.eu_harvested[0] == pytest.approx(0.5)

    def test_ota_without_d2d_time_matches_nota(self, channel_factory):
        ch = channel_factory(1, 1, 1, 0, 1, bs_to_iu=1.0, d2dtx_to_iu=0.5, d2d_direct=1.0)
        cfg = _tiny_config(num_d2d_pairs=1)
        nota = evaluate_nota(ch, DesignPoint(w=[[1.0]], v=np.zeros((0, 1)), p=[0.0], t=(0.5, 0.5), theta=[1.0]), cfg)
        ota = evaluate_ota(ch, DesignPoint(w=[[1.0]], v=np.zeros((0, 1)), p=[0.0], t=(0.5, 0.5, 1e-9), theta=[1.0]), cfg)
        assert ota.iu_throughput[0] == pytest.approx(nota.iu_throughput[0], rel=1e-12)

    def test_ota_d2d_power_budget(self, channel_factory):
        ch = channel_factory(1, 1, 1, 0, 1, bs_to_iu=1.0, d2d_direct=1.0)
        cfg = _tiny_config(num_d2d_pairs=1)
        label = "(39g) D2D power 0"
        within = evaluate_ota(ch, DesignPoint(w=[[1.0]], v=np.zeros((0, 1)), p=[150.0], t=(0.25, 0.25, 0.5),
                                              theta=[1.0]), cfg)
        assert within.residuals[label] >= 0
        beyond = evaluate_ota(ch, DesignPoint(w=[[1.0]], v=np.zeros((0, 1)), p=[250.0], t=(0.25, 0.25, 0.5),
                                              theta=[1.0]), cfg)
        assert beyond.residuals[label] < 0
        assert not beyond.is_feasible()

    def test_wrong_time_fractions(self, channel_factory):
        ch = channel_factory(1, 1, 1, 0, 0, bs_to_iu=1.0)
        x = DesignPoint(w=[[1.0]], v=np.zeros((0, 1)), p=[], t=(0.5, 0.5), theta=[1.0])
        with pytest.raises(ValidationException):
            evaluate_ota(ch, x, _tiny_config())

    def test_invalid_point(self):
        with pytest.raises(ValidationException):
            DesignPoint(w=[[np.nan]], v=np.zeros((0, 1)), p=[], t=(0.5, 0.5), theta=[1.0])
        with pytest.raises(ValidationException):
            DesignPoint(w=[[1.0]], v=np.zeros((0, 1)), p=[-1.0], t=(0.5, 0.5), theta=[1.0])

    @pytest.mark.parametrize("scenario", [ScenarioKind.NOTA, ScenarioKind.OTA])
    def test_matches_oracle(self, small_config, scenario):
        from app.services.scenario import generate_channels

        rng = np.random.default_rng(21)
        for seed in range(10):
            ch = generate_channels(small_config, seed)
            x = _random_point(rng, ch, small_config, scenario)
            ev = evaluate(ch, x, small_config)
            iu, harvested, d2d = _oracle(ch, x, small_config, scenario is ScenarioKind.OTA)
            np.testing.assert_allclose(ev.iu_throughput, iu, rtol=1e-10)
            np.testing.assert_allclose(ev.eu_harvested, harvested, rtol=1e-10)
            np.testing.assert_allclose(ev.d2d_throughput, d2d, rtol=1e-10)
            assert ev.objective == pytest.approx(iu.min(), rel=1e-10)

    def test_common_phase_invariance(self, small_config, channels):
        x = _random_point(np.random.default_rng(4), channels, small_config)
        w = x.w.copy()
        w[0] *= np.exp(1j * 1.234)
        a = evaluate(channels, x, small_config)
        b = evaluate(channels, x.replace(w=w), small_config)
        assert b.objective == pytest.approx(a.objective, rel=1e-12)

    def test_residual_labels(self, small_config, channels):
        ev = evaluate(channels, _random_point(np.random.default_rng(8), channels, small_config), small_config)
        assert "(7b) energy EU 0" in ev.residuals
        assert "(7c) D2D rate 1" in ev.residuals
        assert "(7e) BS power budget" in ev.residuals
        assert "(12) IRS modulus 2" in ev.residuals


class TestPenalty:
    def test_unit_modulus(self):
        assert penalty_omega(np.exp(1j * np.linspace(0, 3, 10))) == pytest.approx(0.0, abs=1e-15)

    def test_half_modulus(self):
        assert penalty_omega(np.full(4, 0.5)) == pytest.approx(-0.75)

    def test_nonpositive_inside_ball(self):
        rng = np.random.default_rng(9)
        for _ in range(100):
            theta = rng.uniform(0.01, 1.0, 6) * np.exp(1j * rng.uniform(0, 2 * np.pi, 6))
            assert penalty_omega(theta) <= 1e-15

    def test_zero_theta(self):
        with pytest.raises(DegenerateInputException):
            penalty_omega(np.zeros(3))
