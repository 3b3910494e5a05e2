from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from netscope import vfilter as VF
from oracles import loop_virtual_filter

GOLDEN = Path(__file__).parent / "golden"


def weights(seed, k=8, q=3, a=3, kh=7, p=4, dtype=np.float32):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((k, q, kh, kh)).astype(dtype), rng.standard_normal((p, k, a, a)).astype(dtype)


class TestVirtualFilter:
    def test_one_hot_selects_filter(self):
        w1, _ = weights(0)
        w2 = np.zeros((4, 8, 3, 3), np.float32)
        w2[2, 5, 1, 1] = 1.0
        vf = VF.virtual_filter(w1, w2, 2)
        assert np.array_equal(vf.filter, w1[5])
        assert vf.couplings[0] == VF.Coupling(5, 1.0, 1, 1)

    def test_zero_second_layer(self):
        w1, _ = weights(1)
        vf = VF.virtual_filter(w1, np.zeros((4, 8, 3, 3), np.float32), 0)
        assert not vf.filter.any()

    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    @pytest.mark.parametrize("p", [0, 2, 3])
    def test_matches_loop_oracle_bitwise(self, dtype, p):
        w1, w2 = weights(2, dtype=dtype)
        acc, taps = loop_virtual_filter(w1, w2, p)
        vf = VF.virtual_filter(w1, w2, p)
        assert np.array_equal(vf.filter, acc)
        got = sorted((c.k, c.coefficient, c.i, c.j) for c in vf.couplings)
        assert got == [(k, float(c), i, j) for k, c, i, j in taps]

    def test_one_by_one_kernel(self):
        w1, _ = weights(3)
        w2 = np.random.default_rng(3).standard_normal((2, 8, 1, 1)).astype(np.float32)
        vf = VF.virtual_filter(w1, w2, 1)
        assert all((c.i, c.j) == (0, 0) for c in vf.couplings)
        assert np.array_equal(vf.filter, loop_virtual_filter(w1, w2, 1)[0])

    def test_tap_tie_breaks_row_major(self):
        w1, _ = weights(4, k=1)
        w2 = np.zeros((1, 1, 3, 3), np.float32)
        w2[0, 0, 2, 0] = -2.0
        w2[0, 0, 1, 2] = 2.0
        assert VF.virtual_filter(w1, w2, 0).couplings[0] == VF.Coupling(0, 2.0, 1, 2)

    def test_linearity_in_w1(self):
        a, w2 = weights(5, dtype=np.float64)
        b, _ = weights(6, dtype=np.float64)
        f = lambda w: VF.virtual_filter(w, w2, 1).filter
        np.testing.assert_allclose(f(2 * a + 3 * b), 2 * f(a) + 3 * f(b), rtol=1e-12, atol=1e-12)

    @given(st.integers(0, 10_000), st.floats(0.01, 100))
    @settings(max_examples=25)
    def test_order_scale_invariant(self, seed, alpha):
        w1, w2 = weights(seed, dtype=np.float64)
        ks = [c.k for c in VF.virtual_filter(w1, w2, 0).couplings]
        assert ks == [c.k for c in VF.virtual_filter(w1, alpha * w2, 0).couplings]
        assert sorted(ks) == list(range(8))

    def test_sort_modes(self):
        w1, w2 = weights(7)
        signed = [c.coefficient for c in VF.virtual_filter(w1, w2, 0).couplings]
        mags = [abs(c.coefficient) for c in VF.virtual_filter(w1, w2, 0, "abs").couplings]
        assert signed == sorted(signed, reverse=True)
        assert mags == sorted(mags, reverse=True)

    def test_shape_mismatch(self):
        w1, _ = weights(0)
        with pytest.raises(ValueError, match="W1"):
            VF.virtual_filter(w1, np.zeros((2, 5, 3, 3), np.float32), 0)
        with pytest.raises(IndexError):
            VF.virtual_filter(w1, np.zeros((2, 8, 3, 3), np.float32), 2)

    def test_all_channels(self):
        w1, w2 = weights(8)
        assert [v.p for v in VF.virtual_filter_all(w1, w2)] == [0, 1, 2, 3]


class TestReport:
    def test_tsv_non_increasing(self):
        w1, w2 = weights(9)
        rows = VF.couplings_tsv(VF.virtual_filter(w1, w2, 3)).splitlines()
        assert rows[0] == "rank\tk\tcoefficient\ti_tilde\tj_tilde"
        coefs = [float(r.split("\t")[2]) for r in rows[1:]]
        assert len(coefs) == 8 and coefs == sorted(coefs, reverse=True)

    def test_golden_report(self, tmp_path):
        w1, w2 = weights(10)
        paths = VF.export_vfilter_report(VF.virtual_filter(w1, w2, 1), w1, tmp_path, scale=4)
        assert [p.name for p in paths] == ["vfilter_p1.ppm", "vfilter_p1_sorted.ppm", "vfilter_p1.tsv"]
        for p in paths:
            assert p.read_bytes() == (GOLDEN / p.name).read_bytes(), p.name
