import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from splitfedcl import field
from splitfedcl.errors import DegenerateMask, InvalidSigma


def brute_force_sdf(mask):
    """O(N^2) nearest opposite-membership pixel distance, negative inside."""
    mask = np.asarray(mask, dtype=bool)
    pts = np.argwhere(np.ones_like(mask))
    inside = np.argwhere(mask)
    outside = np.argwhere(~mask)
    out = np.empty(mask.shape)
    for r, c in pts:
        other = outside if mask[r, c] else inside
        d = np.sqrt(((other - (r, c)) ** 2).sum(axis=1)).min()
        out[r, c] = -d if mask[r, c] else d
    return out


def disk(n, radius, center=None):
    c = (n - 1) / 2 if center is None else center
    rr, cc = np.mgrid[0:n, 0:n]
    return (rr - c) ** 2 + (cc - c) ** 2 <= radius ** 2


def non_degenerate(draw_mask):
    return draw_mask.any() and not draw_mask.all()


masks = st.integers(1, 12).flatmap(
    lambda h: st.integers(1, 12).flatmap(
        lambda w: arrays(bool, (h, w)))).filter(non_degenerate)


class TestSignedDistance:
    def test_three_pixel_row(self):
        np.testing.assert_array_equal(field.signed_distance([[False, True, False]]), [[1.0, -1.0, 1.0]])

    def test_single_pixel_corner_distance(self):
        m = np.zeros((5, 5), bool)
        m[2, 2] = True
        phi = field.signed_distance(m)
        assert phi[0, 0] == pytest.approx(math.sqrt(8))
        assert phi[2, 2] == -1.0

    @pytest.mark.parametrize("value", [True, False])
    def test_degenerate_mask_raises(self, value):
        with pytest.raises(DegenerateMask):
            field.signed_distance(np.full((4, 4), value))

    @settings(max_examples=60, deadline=None)
    @given(masks)
    def test_matches_brute_force(self, m):
        np.testing.assert_array_equal(field.signed_distance(m), brute_force_sdf(m))

    @settings(max_examples=60, deadline=None)
    @given(masks)
    def test_complement_negates(self, m):
        np.testing.assert_array_equal(field.signed_distance(~m), -field.signed_distance(m))

    def test_deterministic(self):
        m = np.random.default_rng(0).random((20, 20)) > 0.6
        a, b = field.signed_distance(m), field.signed_distance(m)
        assert a.tobytes() == b.tobytes()


class TestGradientMagnitude:
    def test_constant_is_zero(self):
        np.testing.assert_array_equal(field.gradient_magnitude(np.full((5, 6), 3.2)), 0.0)

    def test_column_ramp(self):
        f = np.tile(np.arange(4.0), (4, 1))
        g = field.gradient_magnitude(f)
        # central difference is 1 inside and 0.5 on the replicate-padded edge columns
        np.testing.assert_allclose(g[:, 1:3], 1.0)
        np.testing.assert_allclose(g[:, [0, 3]], 0.0)

    def test_step_edge_maxima_straddle_step(self):
        f = np.zeros((5, 6))
        f[:, 3:] = 1.0
        g = field.gradient_magnitude(f)
        assert set(np.argwhere(g == g.max())[:, 1]) == {2, 3}
        np.testing.assert_array_equal(g[:, [0, 1, 4, 5]], 0.0)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (7, 9), elements=st.floats(-1e3, 1e3)))
    def test_range(self, f):
        g = field.gradient_magnitude(f)
        assert g.min() >= 0.0 and g.max() <= 1.0
        assert np.isfinite(g).all()


class TestLaplacian:
    def test_ramp_interior_zero(self):
        f = np.tile(2.0 * np.arange(6), (5, 1))
        lap = field.laplacian_magnitude(f)
        np.testing.assert_allclose(lap[1:-1, 1:-1], 0.0, atol=1e-12)

    def test_impulse_peak_at_centre(self):
        f = np.zeros((5, 5))
        f[2, 2] = 1.0
        lap = field.laplacian_magnitude(f)
        assert np.unravel_index(lap.argmax(), lap.shape) == (2, 2)
        assert lap[2, 2] == 1.0
        # |-4| at the centre against |1| at the four neighbours
        assert lap[1, 2] == pytest.approx(0.25)

    def test_constant_is_zero(self):
        np.testing.assert_array_equal(field.laplacian_magnitude(np.ones((4, 4))), 0.0)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (6, 5), elements=st.floats(-1e3, 1e3)))
    def test_range(self, f):
        lap = field.laplacian_magnitude(f)
        assert lap.min() >= 0.0 and lap.max() <= 1.0


class TestCurvature:
    def test_half_plane_is_flat(self):
        m = np.zeros((40, 40), bool)
        m[:, :20] = True
        phi = field.signed_distance(m)
        band = field.boundary_band(phi, 3.0)
        kappa = field.curvature(phi, eq_radius=math.sqrt(m.sum() / math.pi))
        assert kappa[band].max() < 0.05

    @pytest.mark.parametrize("radius", [8, 12, 16])
    def test_analytic_disk_curvature_is_inverse_radius(self, radius):
        n = 2 * radius + 21
        rr, cc = np.mgrid[0:n, 0:n] - (n - 1) / 2
        phi = np.hypot(rr, cc) - radius
        band = field.boundary_band(phi, 0.2 * radius)
        raw = np.abs(field.mean_curvature(phi))
        # the level set at distance phi is a circle of radius r + phi
        np.testing.assert_allclose(raw[band], 1.0 / (radius + phi[band]), rtol=0.05)
        kappa = field.curvature(phi, radius)
        assert np.abs(kappa[band] - 1.0).max() < 0.3

    @pytest.mark.parametrize("radius", [8, 12, 16, 30])
    def test_pixel_disk_curvature_cue_near_one(self, radius):
        m = disk(2 * radius + 21, radius)
        phi = field.signed_distance(m)
        r_eq = math.sqrt(m.sum() / math.pi)
        band = field.boundary_band(phi, 0.2 * r_eq)
        kappa = field.curvature(phi, r_eq)[band]
        assert np.median(kappa) == pytest.approx(1.0, abs=0.3)
        assert np.abs(kappa - 1.0).mean() < 0.3

    def test_constant_is_zero(self):
        np.testing.assert_array_equal(field.curvature(np.full((6, 6), 2.0), 5.0), 0.0)

    def test_unit_normal_zero_on_flat_field(self):
        nr, nc = field.unit_normal(np.ones((4, 4)))
        assert not nr.any() and not nc.any()


class TestGaussianSmooth:
    def test_constant_unchanged(self):
        f = np.full((9, 7), 0.37)
        np.testing.assert_allclose(field.gaussian_smooth(f, 1.5), f, rtol=0, atol=1e-15)

    def test_impulse_centre_is_kernel_centre_weight(self):
        f = np.zeros((15, 15))
        f[7, 7] = 1.0
        out = field.gaussian_smooth(f, 1.0)
        x = np.arange(-3, 4)
        k = np.exp(-0.5 * x ** 2)
        k /= k.sum()
        assert out[7, 7] == pytest.approx(k[3] ** 2, rel=1e-12)

    def test_subpixel_sigma_near_identity(self):
        f = np.random.default_rng(1).random((10, 10))
        assert np.abs(field.gaussian_smooth(f, 0.1) - f).max() < 1e-3

    @pytest.mark.parametrize("sigma", [0.0, -1.0])
    def test_invalid_sigma(self, sigma):
        with pytest.raises(InvalidSigma):
            field.gaussian_smooth(np.ones((3, 3)), sigma)

    def test_kernel_radius_and_mass(self):
        k = field.gaussian_kernel(1.4)
        assert len(k) == 2 * math.ceil(3 * 1.4) + 1
        assert k.sum() == pytest.approx(1.0, abs=1e-15)

    def test_mass_preserved_for_interior_field(self):
        f = np.zeros((40, 40))
        f[15:25, 12:28] = np.random.default_rng(2).random((10, 16))
        assert field.gaussian_smooth(f, 2.0).sum() == pytest.approx(f.sum(), rel=1e-6)

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, (8, 8), elements=st.floats(-10, 10)),
           arrays(np.float64, (8, 8), elements=st.floats(-10, 10)),
           st.floats(-5, 5), st.floats(-5, 5), st.floats(0.3, 3.0))
    def test_linear(self, f, g, a, b, sigma):
        lhs = field.gaussian_smooth(a * f + b * g, sigma)
        rhs = a * field.gaussian_smooth(f, sigma) + b * field.gaussian_smooth(g, sigma)
        np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-9)


class TestBoundaryBand:
    def test_inclusive(self):
        phi = np.array([[1.0, -1.0, 1.0]])
        assert field.boundary_band(phi, 1.0).all()
        assert not field.boundary_band(phi, 0.5).any()

    def test_disk_annulus(self):
        n, r = 41, 10
        m = disk(n, r)
        band = field.boundary_band(field.signed_distance(m), 2.0)
        rr, cc = np.mgrid[0:n, 0:n]
        radius = np.hypot(rr - 20, cc - 20)
        assert radius[band].min() >= 7.5 and radius[band].max() <= 12.5
        assert band[(radius >= 8.6) & (radius <= 11.4)].all()

    def test_invalid_width(self):
        with pytest.raises(ValueError):
            field.boundary_band(np.ones((2, 2)), 0.0)


def test_bilinear_sampling_interpolates_and_clamps():
    f = np.array([[0.0, 1.0], [2.0, 3.0]])
    vals = field.sample_bilinear(f, [0.5, 0.0, -3.0], [0.5, 0.25, 5.0])
    np.testing.assert_allclose(vals, [1.5, 0.25, 1.0])
