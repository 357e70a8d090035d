import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from dmimo_lab import channel as ch
from dmimo_lab.numkit import RngStream
from oracles import pathloss_direct

BOUNDS = ((0.0, 4.0), (0.0, 8.0), (0.0, 2.4))


class TestPathloss:
    def test_unit_distance_unit_carrier(self):
        assert ch.pathloss_db(1.0, 1.0) == pytest.approx(32.4, abs=1e-12)

    def test_ten_metres(self):
        assert ch.pathloss_db(10.0, 0.92) == pytest.approx(63.5758, abs=1e-3)

    def test_three_and_a_half_metres(self):
        expected = 32.4 + 31.9 * math.log10(3.5) - 0.7242
        assert ch.pathloss_db(3.5, 0.92) == pytest.approx(expected, abs=1e-3)

    def test_vectorized_matches_scalar(self):
        d = np.array([0.5, 1.0, 7.3])
        np.testing.assert_allclose(ch.pathloss_db(d, 0.92), [pathloss_direct(x, 0.92) for x in d], rtol=1e-14)

    @pytest.mark.parametrize("d", [0.0, -1.0, np.inf])
    def test_degenerate_distance(self, d):
        with pytest.raises(ch.DegenerateGeometry):
            ch.pathloss_db(d, 0.92)


@settings(max_examples=100, deadline=None)
@given(d1=st.floats(1e-3, 1e3), d2=st.floats(1e-3, 1e3), fc=st.floats(0.1, 100))
def test_pathloss_monotone_in_distance(d1, d2, fc):
    lo, hi = sorted((d1, d2))
    assert ch.pathloss_db(lo, fc) <= ch.pathloss_db(hi, fc)


def test_wavelength():
    assert ch.wavelength(0.92) == pytest.approx(0.32585, abs=1e-4)


class TestSynthChannel:
    def test_single_link_composition(self):
        topo = ch.Topology([[0.0, 0.0, 1.0]], [[0.0, 0.0, 0.0]], 1.0, BOUNDS)
        c = ch.synth_channel(topo, ch.SOURCE_DOMAIN, RngStream(0))
        assert abs(c.H[0, 0]) ** 2 == pytest.approx(10 ** -3.24 * abs(c.h_small[0, 0]) ** 2, rel=1e-12)

    def test_deterministic(self):
        topo = ch.default_site(8).place([[1.0, 2.0, 0.0], [3.0, 5.0, 0.0]])
        a = ch.synth_channel(topo, ch.SHIFTED_DOMAIN, RngStream(5))
        b = ch.synth_channel(topo, ch.SHIFTED_DOMAIN, RngStream(5))
        assert np.array_equal(a.H, b.H)

    def test_coincident_positions(self):
        topo = ch.Topology([[1.0, 1.0, 0.0]], [[1.0, 1.0, 0.0]], 0.92, BOUNDS)
        with pytest.raises(ch.DegenerateGeometry):
            ch.synth_channel(topo, ch.SOURCE_DOMAIN, RngStream(0))

    def test_small_scale_power(self):
        site = ch.default_site(33)
        ds = ch.generate_dataset(site, ch.SOURCE_DOMAIN, 10_000, 4, RngStream(1))
        assert 0.98 <= np.mean(np.abs(ds.h_small) ** 2) <= 1.02

    @pytest.mark.parametrize("domain", [ch.SOURCE_DOMAIN, ch.SHIFTED_DOMAIN])
    def test_composition_invariant(self, domain):
        ds = ch.generate_dataset(ch.default_site(8), domain, 50, 2, RngStream(2))
        assert max(ds.sample(i).composition_error() for i in range(len(ds))) <= 1e-12


class TestLosChannel:
    def test_integer_wavelength_phase(self):
        lam = ch.wavelength(0.92)
        site = ch.Site([[1.0, 1.0, lam]], 0.92, BOUNDS)
        c = ch.los_channel(site, (1.0, 1.0, 0.0))
        assert abs(np.angle(c.h_small[0, 0])) <= 1e-12

    def test_equidistant_aps_share_phase(self):
        site = ch.Site([[1.0, 4.0, 2.4], [3.0, 4.0, 2.4]], 0.92, BOUNDS)
        c = ch.los_channel(site, (2.0, 4.0))
        assert c.H.shape == (2, 1)
        assert c.H[0, 0] == pytest.approx(c.H[1, 0], abs=1e-15)

    def test_target_on_ap(self):
        site = ch.Site([[1.0, 1.0, 0.0]], 0.92, BOUNDS)
        with pytest.raises(ch.DegenerateGeometry):
            ch.los_channel(site, (1.0, 1.0, 0.0))

    def test_target_outside(self):
        with pytest.raises(ValueError, match="outside"):
            ch.los_channel(ch.default_site(4), (9.0, 1.0))


class TestGenerateDataset:
    def test_single_user_bookkeeping(self):
        ds = ch.generate_dataset(ch.default_site(8), ch.SOURCE_DOMAIN, 100, 1, RngStream(0))
        assert len(ds) == 100 and ds.H.shape == (100, 8, 1) and ds.positions.shape == (100, 1, 3)

    def test_pairs_are_distinct(self):
        ds = ch.generate_dataset(ch.default_site(8), ch.SOURCE_DOMAIN, 100, 2, RngStream(0))
        assert np.all(np.any(ds.positions[:, 0] != ds.positions[:, 1], axis=-1))

    def test_positions_uniform(self):
        site = ch.default_site(4)
        ds = ch.generate_dataset(site, ch.SOURCE_DOMAIN, 10_000, 1, RngStream(3))
        xy = ds.positions[:, 0]
        assert stats.kstest(xy[:, 0], stats.uniform(0, 4).cdf).statistic <= 0.02
        assert stats.kstest(xy[:, 1], stats.uniform(0, 8).cdf).statistic <= 0.02

    def test_pool_too_small(self):
        with pytest.raises(ValueError, match="distinct"):
            ch.generate_dataset(ch.default_site(4), ch.SOURCE_DOMAIN, 5, 3, RngStream(0),
                                positions_pool=[[1.0, 1.0], [2.0, 2.0]])

    def test_pool_pairing(self):
        pool = [[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]]
        ds = ch.generate_dataset(ch.default_site(4), ch.SOURCE_DOMAIN, 20, 2, RngStream(0), positions_pool=pool)
        assert np.all(np.any(ds.positions[:, 0] != ds.positions[:, 1], axis=-1))


@pytest.fixture(scope="module")
def big():
    return ch.generate_dataset(ch.default_site(4), ch.SOURCE_DOMAIN, 10_000, 1, RngStream(4))


class TestSpatialSplit:
    @pytest.mark.parametrize("mask", [None, ((1.0, 1.0), (2.0, 2.0))])
    def test_mask_covering_nothing(self, big, mask):
        out = ch.spatial_split(big, mask, 0.1, RngStream(0))
        assert not np.any(out.region == "extrap")

    def test_half_area_mask(self, big):
        out = ch.spatial_split(big, ((0.0, 2.0), (0.0, 8.0)), 0.1, RngStream(0))
        assert np.mean(out.region == "extrap") == pytest.approx(0.5, abs=0.05)
        assert set(out.split[out.region == "extrap"]) == {"test"}

    def test_tags_partition(self, big):
        out = ch.spatial_split(big, ((2.0, 4.0), (4.0, 8.0)), 0.1, RngStream(0), 0.2)
        assert sum(out.counts().values()) == len(big)
        interp = out.region == "interp"
        assert np.mean(out.split[interp] == "val") == pytest.approx(0.1, abs=1e-3)

    def test_mask_swallows_everything(self, big):
        with pytest.raises(ValueError, match="every sample"):
            ch.spatial_split(big, ((0.0, 4.0), (0.0, 8.0)), 0.1, RngStream(0))

    def test_mask_outside_area(self, big):
        with pytest.raises(ValueError, match="intersect"):
            ch.spatial_split(big, ((10.0, 11.0), (0.0, 8.0)), 0.1, RngStream(0))


class TestCsiFiles:
    @pytest.fixture
    def ds(self):
        d = ch.generate_dataset(ch.default_site(6), ch.SHIFTED_DOMAIN, 100, 2, RngStream(8))
        return ch.spatial_split(d, ((0.0, 1.0), (0.0, 2.0)), 0.1, RngStream(9))

    def test_round_trip_bit_identical(self, ds, tmp_path):
        p = tmp_path / "a.jsonl"
        ch.export_csi(ds, p)
        back = ch.import_csi(p)
        assert np.array_equal(back.H, ds.H) and np.array_equal(back.positions, ds.positions)
        assert np.array_equal(back.beta, ds.beta)
        assert list(back.split) == list(ds.split) and list(back.region) == list(ds.region)
        assert max(back.sample(i).composition_error() for i in range(len(back))) <= 1e-12

    def test_nan_names_record(self, ds, tmp_path):
        p = tmp_path / "a.jsonl"
        ch.export_csi(ds, p)
        lines = p.read_text().splitlines()
        rec = json.loads(lines[3])
        rec["H_re"][0][0] = "NaN"
        lines[3] = json.dumps(rec).replace('"NaN"', "NaN")
        p.write_text("\n".join(lines) + "\n")
        with pytest.raises(ch.CsiFormatError, match=r"line 4.*non-finite"):
            ch.import_csi(p)

    def test_smallest_instance(self, tmp_path):
        p = tmp_path / "one.jsonl"
        p.write_text(
            '{"format": "dmimo-csi", "version": 1, "M": 1, "K": 1, "fc_ghz": 0.92}\n'
            '{"id": 0, "ue_pos": [[1, 1, 0]], "H_re": [[1]], "H_im": [[0]], "region": "interp", "split": "train"}\n'
        )
        ds = ch.import_csi(p)
        assert ds.H.shape == (1, 1, 1) and ds.H[0, 0, 0] == 1 + 0j

    def test_version_mismatch(self, tmp_path):
        p = tmp_path / "v.jsonl"
        p.write_text('{"format": "dmimo-csi", "version": 9, "M": 1, "K": 1, "fc_ghz": 0.92}\n')
        with pytest.raises(ch.CsiFormatError, match="version"):
            ch.import_csi(p)

    def test_truncated_record(self, ds, tmp_path):
        p = tmp_path / "t.jsonl"
        ch.export_csi(ds, p)
        p.write_text(p.read_text()[:-40])
        with pytest.raises(ch.CsiFormatError, match="line 101"):
            ch.import_csi(p)

    def test_wrong_shape(self, tmp_path):
        p = tmp_path / "s.jsonl"
        p.write_text(
            '{"format": "dmimo-csi", "version": 1, "M": 2, "K": 1, "fc_ghz": 0.92}\n'
            '{"id": 7, "ue_pos": [[1, 1, 0]], "H_re": [[1]], "H_im": [[0]], "region": "interp", "split": "train"}\n'
        )
        with pytest.raises(ch.CsiFormatError, match="id=7.*shape"):
            ch.import_csi(p)


def test_subset_regrids_same_area():
    site = ch.default_site(33)
    small = site.subset(5)
    assert small.M == 5 and small.area_bounds == site.area_bounds
