import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

import naive
from deepmatch import descriptors as D
from deepmatch.geometry import Discretization, LevelGeometry, pool_params
from deepmatch.pyramid import (
    NO_SWITCH,
    SENTINEL,
    ConfigError,
    DescriptorField,
    ScoreMap,
    aggregate,
    build_pyramid,
    correlate,
    is_sentinel,
    max_pool,
    pyramid_from_scores,
)


def unit_fields(ref_vec, tgt_vecs):
    """1x1 reference grid at pixel (1, 1) against a 3x3 dense target field."""
    ref = DescriptorField(np.asarray(ref_vec, float)[None, None], stride=1, offset=1)
    tgt = DescriptorField(np.asarray(tgt_vecs, float), stride=1, offset=0)
    geom = LevelGeometry(level=0, R=1, alpha0=1, beta0=1, delta0=1, H=1, W=1)
    return ref, tgt, geom


def self_pyramid(img, disc, nu=1.4):
    ref = D.extract_fixed(img, disc.alpha0, disc.beta0)
    tgt = D.extract_fixed(img, disc.gamma0, 0)
    return build_pyramid(ref, tgt, disc, [nu] * disc.levels, img.shape)


class TestCorrelate:
    def test_self_match_center_is_one(self, textured64):
        disc = Discretization(levels=0, R0=6)
        pyr = self_pyramid(textured64, disc)
        center = pyr.maps[0].data[:, :, 6, 6]
        assert np.allclose(center, 1.0)

    def test_orthogonal_is_zero(self):
        tgt = np.zeros((3, 3, 2))
        tgt[..., 1] = 1.0
        s, raw = correlate(*unit_fields([1.0, 0.0], tgt))
        assert np.all(s.data == 0.0) and np.all(raw == 0.0)

    def test_antiparallel_rectified(self):
        tgt = np.zeros((3, 3, 2))
        tgt[..., 0] = -1.0
        s, raw = correlate(*unit_fields([1.0, 0.0], tgt))
        assert np.all(s.data == 0.0) and np.all(raw == -1.0)

    def test_off_image_is_sentinel(self):
        tgt = np.ones((2, 2, 1))
        ref = DescriptorField(np.ones((1, 1, 1)), stride=1, offset=0)
        geom = LevelGeometry(level=0, R=1, alpha0=1, beta0=0, delta0=1, H=1, W=1)
        s, _ = correlate(ref, DescriptorField(tgt, 1, 0), geom)
        assert is_sentinel(s.data[0, 0, 0]).all() and is_sentinel(s.data[0, 0, :, 0]).all()
        assert np.all(s.data[0, 0, 1:, 1:] == 1.0)


class TestMaxPool:
    def geom(self, R=4, H=1, W=1):
        return LevelGeometry(level=0, R=R, alpha0=1, beta0=0, delta0=1, H=H, W=W)

    def test_constant(self):
        g = self.geom()
        pooled, sw = max_pool(ScoreMap(np.full((1, 1, 9, 9), 0.3), g))
        assert pooled.data.shape == (1, 1, 5, 5)
        assert np.all(pooled.data == 0.3)
        assert np.all(sw != NO_SWITCH)

    @pytest.mark.parametrize("spike", [(4, 4), (3, 3), (0, 8), (5, 2)])
    def test_spike(self, spike):
        g = self.geom()
        data = np.zeros((1, 1, 9, 9))
        data[0, 0][spike] = 0.8
        pooled, sw = max_pool(ScoreMap(data, g))
        window, stride, pad, _ = pool_params(g)
        for a in range(5):
            for b in range(5):
                covers = all(stride * o - pad <= k <= stride * o - pad + window - 1 for o, k in zip((a, b), spike))
                if covers:
                    assert pooled.data[0, 0, a, b] == 0.8
                    assert sw[0, 0, a, b] == spike[0] * 9 + spike[1]
                else:
                    assert pooled.data[0, 0, a, b] == 0.0

    def test_all_sentinel(self):
        pooled, sw = max_pool(ScoreMap(np.full((2, 1, 9, 9), SENTINEL), self.geom(H=2)))
        assert is_sentinel(pooled.data).all()
        assert np.all(sw == NO_SWITCH)

    def test_tie_takes_first_in_raster_order(self):
        data = np.zeros((1, 1, 9, 9))
        pooled, sw = max_pool(ScoreMap(data, self.geom()))
        # output (1, 1) covers k rows/cols 1..3; the first is (1, 1)
        assert sw[0, 0, 1, 1] == 1 * 9 + 1

    @given(hnp.arrays(np.float64, (2, 2, 7, 7), elements=st.floats(0, 1)), st.floats(0, 1))
    def test_monotone_and_switch_consistent(self, data, rate):
        mask = np.random.default_rng(int(rate * 1000)).random(data.shape) < rate
        data = np.where(mask, SENTINEL, data)
        g = self.geom(R=3, H=2, W=2)
        pooled, sw = max_pool(ScoreMap(data, g))
        assert np.array_equal(pooled.data, naive.pool(data, g))
        flat = data.reshape(2, 2, -1)
        for r in range(2):
            for c in range(2):
                live = sw[r, c] != NO_SWITCH
                assert np.array_equal(flat[r, c][sw[r, c][live]], pooled.data[r, c][live])
                assert is_sentinel(pooled.data[r, c][~live]).all()


class TestAggregate:
    def geom(self, H, W):
        return LevelGeometry(level=0, R=1, H=H, W=W)

    def test_plain_average(self):
        p = ScoreMap(np.full((3, 3, 3, 3), 0.6), self.geom(3, 3), "pooled")
        out, pre = aggregate(p, 1.0)
        assert np.allclose(out.data[:2, :2], 0.6)
        assert out.geom.level == 1

    def test_out_of_grid_children_count_as_zero(self):
        p = ScoreMap(np.full((1, 1, 3, 3), 0.6), self.geom(1, 1), "pooled")
        out, _ = aggregate(p, 1.0)
        assert np.allclose(out.data, 0.15)

    def test_power(self):
        p = ScoreMap(np.full((2, 2, 3, 3), 0.5), self.geom(2, 2), "pooled")
        out, pre = aggregate(p, 1.4)
        assert pre[0, 0, 0, 0] == 0.5
        assert out.data[0, 0, 0, 0] == pytest.approx(0.378929, abs=1e-6)

    def test_sentinel_counts_as_zero(self):
        d = np.full((2, 2, 3, 3), 0.8)
        d[1, 1] = SENTINEL
        out, _ = aggregate(ScoreMap(d, self.geom(2, 2), "pooled"), 1.0)
        assert np.allclose(out.data[0, 0], 0.6)

    def test_rejects_nonpositive_exponent(self):
        with pytest.raises(ConfigError):
            aggregate(ScoreMap(np.zeros((1, 1, 3, 3)), self.geom(1, 1), "pooled"), 0.0)

    @given(hnp.arrays(np.float64, (3, 2, 3, 3), elements=st.floats(0, 1)), st.floats(1.0, 3.0))
    def test_range_and_oracle(self, data, nu):
        g = self.geom(3, 2)
        out, _ = aggregate(ScoreMap(data, g, "pooled"), nu)
        assert np.all((out.data >= 0) & (out.data <= 1))
        assert np.allclose(out.data, naive.aggregate(data, g, nu), rtol=1e-12, atol=0)


class TestBuildPyramid:
    def test_level_zero_only(self, textured64):
        pyr = self_pyramid(textured64, Discretization(levels=0, R0=4))
        assert pyr.L == 0 and len(pyr.switches) == 0

    def test_exponent_count_checked(self, textured64):
        disc = Discretization(levels=2, R0=4)
        ref = D.extract_fixed(textured64, 8, 4)
        tgt = D.extract_fixed(textured64, 1, 0)
        with pytest.raises(ConfigError):
            build_pyramid(ref, tgt, disc, [1.4], textured64.shape)

    def test_shapes(self, textured64):
        disc = Discretization(levels=3, R0=10)
        pyr = self_pyramid(textured64, disc)
        assert [m.data.shape for m in pyr.maps] == [(8, 8, 2 * R + 1, 2 * R + 1) for R in (10, 5, 3, 2)]
        for m in pyr.maps:
            assert np.all((m.data >= 0) | is_sentinel(m.data))
            assert np.all(m.data[~is_sentinel(m.data)] <= 1.0 + 1e-12)

    def test_self_match_center_is_max(self, textured128):
        disc = Discretization(levels=4, R0=20)
        pyr = self_pyramid(textured128, disc)
        for l, m in enumerate(pyr.maps):
            R = m.R
            inner = m.data[4:12, 4:12]
            center = inner[:, :, R, R]
            assert np.all(center >= inner.reshape(8, 8, -1).max(axis=-1) - 1e-12), f"level {l}"

    def test_nu_one_matches_recursion(self):
        rng = np.random.default_rng(3)
        img = rng.integers(0, 256, (16, 16)).astype(float)
        disc = Discretization(levels=2, R0=4, alpha0=4, beta0=2, delta0=4)
        ref = D.extract_fixed(img, disc.alpha0, disc.beta0)
        tgt = D.extract_fixed(img[::-1], disc.gamma0, 0)
        pyr = build_pyramid(ref, tgt, disc, [1.0, 1.0], img.shape)
        expect = naive.pyramid_maps(pyr.maps[0].data, pyr.geoms[0], [1.0, 1.0])
        for got, want in zip(pyr.maps, expect):
            assert np.allclose(got.data, want, rtol=1e-12, atol=1e-15)

    def test_translation_equivariance(self):
        from deepmatch.synthetic import texture

        img = texture((96, 96), "noise", np.random.default_rng(2))
        disc = Discretization(levels=2, R0=4)
        a = self_pyramid(img, disc)
        shifted = np.roll(img, (8, 8), axis=(0, 1))
        b = self_pyramid(shifted, disc)
        for l in range(3):
            assert np.allclose(b.maps[l].data[4:7, 4:7], a.maps[l].data[3:6, 3:6], atol=1e-12)

    def test_pyramid_from_scores_rejects_bad_exponent(self):
        g = LevelGeometry(level=0, R=2, H=1, W=1)
        with pytest.raises(ConfigError):
            pyramid_from_scores(ScoreMap(np.zeros((1, 1, 5, 5)), g), [-1.0])
