import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dmimo_lab import calibration as cal
from dmimo_lab import gnn
from dmimo_lab import protocol as proto
from dmimo_lab.numkit import RngStream

AP = lambda i: proto.NodeId("AP", i)  # noqa: E731


def report(i, amp, phase=0.0, k=0):
    return {"ap": i, "ue": k, "amplitude": amp, "phi_csi": phase}


def random_hw(seed, M=8, K=1):
    r = RngStream(seed)
    return cal.HardwarePhaseModel.random(r, M, K, channel=r.child("H").complex_gaussian((M, K)))


class TestCpuAggregate:
    def test_assembly(self):
        H = proto.cpu_aggregate([report(0, 1.0), report(1, 2.0), report(2, 3.0)], 3)
        np.testing.assert_allclose(H[:, 0], [1, 2, 3])

    def test_order_independent(self):
        reps = [report(i, 1.0 + i, 0.3 * i) for i in range(5)]
        a = proto.cpu_aggregate(reps, 5)
        b = proto.cpu_aggregate(reps[::-1], 5)
        assert np.array_equal(a, b)

    def test_missing_names_index(self):
        with pytest.raises(proto.ProtocolViolation, match="AP index 2"):
            proto.cpu_aggregate([report(0, 1.0), report(1, 1.0)], 3)

    def test_duplicate(self):
        with pytest.raises(proto.ProtocolViolation, match="duplicate"):
            proto.cpu_aggregate([report(0, 1.0), report(0, 1.0)], 1)

    def test_out_of_range(self):
        with pytest.raises(proto.ProtocolViolation, match="outside"):
            proto.cpu_aggregate([report(4, 1.0)], 2)


class TestWire:
    def test_frame_round_trip(self):
        w = np.array([0.5 - 0.25j, 1e-300 + 3j])
        msg = proto.ProtocolMessage(proto.PRECODER_ASSIGNMENT, proto.CPU, AP(1), "III",
                                    {"ap": 1, "weights": w, "symbols": np.array([1j])})
        frame = proto.encode_frame(msg)
        assert int.from_bytes(frame[:4], "big") == len(frame) - 4
        back, rest = proto.decode_frame(frame + b"xyz")
        assert rest == b"xyz"
        assert np.array_equal(back.payload["weights"], w) and back.receiver == AP(1)

    def test_truncated(self):
        frame = proto.encode_frame(proto.ProtocolMessage(proto.LOOPBACK_REPORT, AP(0), proto.CPU, "I",
                                                         {"phi_loop": 0.1}))
        with pytest.raises(proto.ProtocolViolation, match="truncated"):
            proto.decode_frame(frame[:-3])

    def test_wrong_stage_tag(self):
        msg = proto.ProtocolMessage(proto.PILOT_REPORT, AP(0), proto.CPU, "I", report(0, 1.0))
        with pytest.raises(proto.ProtocolViolation, match="stage"):
            msg.validate()

    def test_missing_payload_field(self):
        msg = proto.ProtocolMessage(proto.PILOT_REPORT, AP(0), proto.CPU, "II", {"ap": 0})
        with pytest.raises(proto.ProtocolViolation, match="lacks"):
            msg.validate()

    def test_tcp_loopback(self):
        tcp = proto.TcpLoopback()
        try:
            msg = proto.ProtocolMessage(proto.PILOT_REPORT, AP(3), proto.CPU, "II", report(3, 0.2, 1.0))
            assert tcp.roundtrip(msg) == msg
        finally:
            tcp.close()


class TestRound:
    def test_mrt_is_coherent(self):
        hw = random_hw(0, 12)
        res = proto.run_tdd_round(hw, proto.make_precoder("mrt"))
        assert res.received_power[0] == pytest.approx(np.sum(hw.a) ** 2, rel=1e-9)

    def test_matches_monolithic(self):
        hw = random_hw(1, 8, 2)
        pre = proto.make_precoder("rzf", sigma2=0.1)
        res = proto.run_tdd_round(hw, pre)
        assert np.max(np.abs(res.W - proto.monolithic_round(hw, pre))) <= 1e-12

    def test_stage_order(self):
        res = proto.run_tdd_round(random_hw(2), proto.make_precoder("mrt"))
        stages = [e.stage for e in res.events]
        assert res.stage_order_ok() and stages[0] == "I" and stages[-1] == "III"

    def test_shuffle_and_tcp_do_not_matter(self):
        hw = random_hw(3, 6, 2)
        pre = proto.make_precoder("mrt")
        base = proto.run_tdd_round(hw, pre, rng=RngStream(0))
        for kw in ({"shuffle": True}, {"transport": "tcp"}):
            other = proto.run_tdd_round(hw, pre, rng=RngStream(0), **kw)
            assert np.array_equal(other.W, base.W)

    def test_deterministic_log(self):
        hw = random_hw(4)
        a = proto.run_tdd_round(hw, proto.make_precoder("mrt"), rng=RngStream(1), shuffle=True)
        b = proto.run_tdd_round(hw, proto.make_precoder("mrt"), rng=RngStream(1), shuffle=True)
        assert [e.as_row() for e in a.events] == [e.as_row() for e in b.events]

    def test_dropped_pilot_times_out(self):
        with pytest.raises(proto.StageTimeout, match="AP2") as info:
            proto.run_tdd_round(random_hw(5, 4), proto.make_precoder("mrt"),
                                drop=[(proto.PILOT_REPORT, AP(2))])
        assert info.value.stage == "II" and info.value.missing == [AP(2)]

    def test_dropped_loopback_times_out(self):
        with pytest.raises(proto.StageTimeout) as info:
            proto.run_tdd_round(random_hw(5, 4), proto.make_precoder("mrt"),
                                drop=[(proto.LOOPBACK_REPORT, AP(0))])
        assert info.value.stage == "I"

    def test_literal_mode_loses_coherence(self):
        hw = random_hw(6, 16)
        res = proto.run_tdd_round(hw, proto.make_precoder("mrt"), mode="literal")
        assert res.received_power[0] < 0.5 * np.sum(hw.a) ** 2

    def test_gnn_from_file(self, tmp_path):
        m = gnn.init_model(RngStream(0), 2, 8, head_std=0.5)
        gnn.save_model(m, tmp_path / "m.json")
        hw = random_hw(7, 5, 2)
        pre = proto.make_precoder("gnn", model=str(tmp_path / "m.json"))
        res = proto.run_tdd_round(hw, pre)
        assert np.max(np.abs(res.W - proto.monolithic_round(hw, pre))) <= 1e-12

    def test_unknown_precoder(self):
        with pytest.raises(ValueError):
            proto.make_precoder("zf")
        with pytest.raises(ValueError):
            proto.make_precoder("gnn")


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), M=st.integers(1, 16), K=st.integers(1, 3))
def test_oracle_equivalence(seed, M, K):
    hw = random_hw(seed, M, K)
    pre = proto.make_precoder("mrt")
    res = proto.run_tdd_round(hw, pre, rng=RngStream(seed), shuffle=True)
    assert np.max(np.abs(res.W - proto.monolithic_round(hw, pre))) <= 1e-12


class TestRps:
    def test_single_ap_constant(self, rng):
        p = proto.run_rps_round(random_hw(0, 1), 50, rng)
        np.testing.assert_allclose(p, p[0], rtol=1e-13)

    def test_noncoherent_mean(self):
        hw = cal.HardwarePhaseModel.random(RngStream(1), 15)
        p = proto.run_rps_round(hw, 100_000, RngStream(2))
        assert p.mean() == pytest.approx(15.0, rel=0.03)
        assert 10 * math.log10(p.mean()) == pytest.approx(11.76, abs=0.15)

    def test_slots_validated(self, rng):
        with pytest.raises(ValueError):
            proto.run_rps_round(random_hw(0, 2), 0, rng)
