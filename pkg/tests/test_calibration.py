import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dmimo_lab import calibration as cal
from dmimo_lab.numkit import RngStream
from oracles import coherent_power_direct

TWO_PI = 2 * math.pi


def hw_single(phi_tx=0.0, phi_rx=0.0, phi_cable=0.0, phi_ch=0.0, phi_ref=0.0, phi_pilot=0.0, a=1.0):
    return cal.HardwarePhaseModel([phi_tx], [phi_rx], [phi_cable], [[phi_ch]], [[a]],
                                  phi_tx_ue=[phi_pilot], phi_ref=phi_ref)


class TestMeasurements:
    def test_reference(self):
        assert cal.measure_reference(hw_single(phi_rx=0.1, phi_cable=0.2), 0) == pytest.approx(0.1)

    def test_reference_zero(self):
        assert cal.measure_reference(hw_single(), 0) == 0.0

    def test_reference_wraps(self):
        a = cal.measure_reference(hw_single(phi_rx=0.1, phi_cable=0.2), 0)
        b = cal.measure_reference(hw_single(phi_rx=0.1 + TWO_PI, phi_cable=0.2), 0)
        assert a == pytest.approx(b, abs=1e-12)

    def test_pilot(self):
        assert cal.measure_pilot(hw_single(phi_rx=0.1, phi_ch=0.5), 0) == pytest.approx(0.4)
        assert cal.measure_pilot(hw_single(), 0) == 0.0

    def test_pilot_symmetry(self):
        hw = cal.HardwarePhaseModel([0.3, 1.1], [0.2, 0.2], [0.5, -0.9], [[0.7], [0.7]], [[1.0], [2.0]])
        assert cal.measure_pilot(hw, 0) == cal.measure_pilot(hw, 1)

    def test_loopback(self):
        assert cal.measure_loopback(hw_single(phi_tx=0.3, phi_rx=0.1), 0) == pytest.approx(0.2)
        assert cal.measure_loopback(hw_single(phi_tx=0.4, phi_rx=0.4), 0) == 0.0

    def test_loopback_isolated(self):
        a = cal.measure_loopback(hw_single(phi_tx=0.3, phi_rx=0.1), 0)
        b = cal.measure_loopback(hw_single(phi_tx=0.3, phi_rx=0.1, phi_cable=2.0, phi_ch=-1.0), 0)
        assert a == b

    def test_wrap_range(self):
        x = cal.wrap(np.linspace(-20, 20, 1001))
        assert np.all(x > -math.pi) and np.all(x <= math.pi)
        assert cal.wrap(-math.pi) == pytest.approx(math.pi)


class TestAlignAndCompensate:
    def test_align_cancels_rx_and_cable(self):
        ledger = cal.measure_all(hw_single(phi_rx=0.1, phi_cable=0.2, phi_ch=0.5))
        assert cal.align_csi(ledger, 0) == pytest.approx(0.5, abs=1e-12)

    def test_align_zero(self):
        assert cal.align_csi(cal.measure_all(hw_single()), 0) == 0.0

    def test_align_rx_independent(self):
        hw = cal.HardwarePhaseModel([0.0, 0.0], [0.1, 2.9], [0.3, 0.3], [[0.8], [0.8]], [[1.0], [1.0]])
        ledger = cal.measure_all(hw)
        assert cal.align_csi(ledger, 0) == pytest.approx(cal.align_csi(ledger, 1), abs=1e-12)

    def test_compensate_zero_hardware(self):
        assert cal.compensate_downlink(cal.measure_all(hw_single()), 0.7, 0) == pytest.approx(0.7)

    def test_compensate_cancels_tx(self):
        ledger = cal.measure_all(hw_single(phi_tx=0.3, phi_rx=0.1, phi_cable=0.2))
        assert cal.compensate_downlink(ledger, 0.0, 0) == pytest.approx(-0.3, abs=1e-12)

    def test_compensate_ignores_channel(self):
        a = cal.compensate_downlink(cal.measure_all(hw_single(phi_tx=0.3, phi_ch=0.0)), 0.2, 0)
        b = cal.compensate_downlink(cal.measure_all(hw_single(phi_tx=0.3, phi_ch=1.7)), 0.2, 0)
        assert a == b

    def test_incomplete_ledger(self):
        ledger = cal.PhaseLedger(np.zeros(2))
        with pytest.raises(cal.IncompleteLedger, match="pilot"):
            cal.align_csi(ledger, 0)
        with pytest.raises(cal.IncompleteLedger, match="loopback"):
            cal.compensate_downlink(ledger, 0.0, 1)
        ledger.phi_Pilot[(0, 0)] = 0.1
        with pytest.raises(cal.IncompleteLedger, match="reference"):
            cal.align_csi(ledger, 0)
        assert not ledger.complete()


class TestSimulateDownlink:
    def test_single_ap_power(self):
        hw = hw_single(phi_tx=1.0, phi_ch=2.0, a=0.7)
        for theta in (0.0, 1.3, -2.0):
            assert abs(cal.simulate_downlink(hw, [theta])) ** 2 == pytest.approx(0.49)

    def test_calibrated_equal_gain(self):
        hw = cal.HardwarePhaseModel.random(RngStream(3), 12, a=0.5)
        assert cal.calibrated_mrt_power(hw) == pytest.approx((12 * 0.5) ** 2, rel=1e-9)

    def test_twenty_log_m(self):
        p1 = cal.calibrated_mrt_power(cal.HardwarePhaseModel.random(RngStream(1), 1))
        p15 = cal.calibrated_mrt_power(cal.HardwarePhaseModel.random(RngStream(2), 15))
        assert 10 * math.log10(p15 / p1) == pytest.approx(23.52, abs=5e-3)

    def test_uncalibrated_is_worse(self):
        hw = cal.HardwarePhaseModel.random(RngStream(9), 33)
        assert cal.calibrated_mrt_power(hw, compensate=False) < 0.5 * cal.calibrated_mrt_power(hw)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), M=st.integers(1, 33))
def test_coherence_invariant(seed, M):
    r = RngStream(seed)
    a = r.child("a").uniform(0.1, 2.0, M)
    hw = cal.HardwarePhaseModel.random(r, M, a=a)
    expected = float(np.sum(a)) ** 2
    assert cal.calibrated_mrt_power(hw) == pytest.approx(expected, rel=1e-9)
    direct = coherent_power_direct(a, hw.phi_tx, hw.phi_rx, hw.phi_cable, hw.phi_ch[:, 0],
                                   hw.phi_ref, hw.phi_tx_ue[0])
    assert direct == pytest.approx(expected, rel=1e-9)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), M=st.integers(2, 33))
def test_csi_error_is_ap_independent(seed, M):
    hw = cal.HardwarePhaseModel.random(RngStream(seed), M)
    ledger = cal.measure_all(hw)
    err = cal.wrap(np.array([cal.align_csi(ledger, i) for i in range(M)]) - hw.phi_ch[:, 0])
    spread = cal.wrap(err - err[0])
    assert np.max(np.abs(spread)) <= 1e-12


def test_literal_mode_needs_matched_rx_and_cable():
    hw = cal.HardwarePhaseModel.random(RngStream(5), 8)
    hw.phi_rx[:] = hw.phi_cable + 0.4
    assert cal.calibrated_mrt_power(hw, "literal") == pytest.approx(64.0, rel=1e-9)
    hw.phi_rx[3] += 1.0
    assert cal.calibrated_mrt_power(hw, "literal") < 64.0 * (1 - 1e-6)


def test_multiuser_precoder_compensation():
    rng = RngStream(4)
    g = rng.child("H").complex_gaussian((6, 2))
    hw = cal.HardwarePhaseModel.random(rng, 6, 2, channel=g)
    ledger = cal.measure_all(hw)
    H_est = cal.estimate_channel(ledger, hw.a)
    W = np.conj(H_est) @ np.linalg.inv(H_est.T @ np.conj(H_est))
    G = cal.simulate_downlink_matrix(hw, cal.compensate_precoder(ledger, W))
    off = np.abs(G[~np.eye(2, dtype=bool)])
    assert off.max() <= 1e-9 * np.abs(np.diag(G)).min()


def test_hardware_validation():
    with pytest.raises(ValueError, match="positive"):
        hw_single(a=0.0)
    with pytest.raises(ValueError, match="shape"):
        cal.HardwarePhaseModel([0.0, 0.0], [0.0], [0.0], [[0.0]], [[1.0]])
