import numpy as np
import pytest

from diffensemble.optics import (
    AmplitudeMask,
    ComplexField,
    DetectorLayout,
    GridMismatchError,
    GridSpec,
    PhaseLayer,
    adjoint_propagate,
    apply_phase_layer,
    detector_readout,
    differential_layout,
    direct_dft_propagate,
    lens_phase,
    propagate,
    transfer_function,
)


def random_field(grid, rng, batch=()):
    shape = batch + (grid.side, grid.side)
    return ComplexField(grid, rng.normal(size=shape) + 1j * rng.normal(size=shape))


def band_limited_field(grid, rng):
    """Random field with zero evanescent content."""
    f = random_field(grid, rng)
    h = transfer_function(grid, 0.0)  # 1 on propagating band, 0 outside
    v = np.fft.ifft2(np.fft.fft2(f.values) * h.real)
    return ComplexField(grid, v)


class TestGridSpec:
    def test_rejects_odd_or_small_side(self):
        with pytest.raises(ValueError):
            GridSpec(side=5)
        with pytest.raises(ValueError):
            GridSpec(side=2)

    def test_rejects_bad_pitch(self):
        with pytest.raises(ValueError):
            GridSpec(side=8, pitch=0.0)
        with pytest.raises(ValueError):
            GridSpec(side=8, pitch=float("nan"))

    def test_extent_and_coords(self):
        g = GridSpec(side=8, pitch=0.5)
        assert g.extent == 4.0
        x, y = g.coords()
        assert x[0, 0] == pytest.approx(-1.75)
        assert x[0, -1] == pytest.approx(1.75)
        assert np.allclose(x, -x[:, ::-1])


class TestTransferFunction:
    def test_zero_distance_is_identity_on_band(self):
        g = GridSpec(16)
        h = transfer_function(g, 0.0)
        band = np.abs(h) > 0
        assert np.allclose(h[band], 1.0)

    def test_dc_component_phase(self):
        g = GridSpec(16)
        for d in (1.0, 40.0, 3.7):
            h = transfer_function(g, d)
            assert h[0, 0] == pytest.approx(np.exp(1j * 2 * np.pi * d), abs=1e-12)

    def test_evanescent_zeroed(self):
        g = GridSpec(16, pitch=0.25)  # fine pitch so evanescent freqs exist
        h = transfer_function(g, 5.0)
        f = np.fft.fftfreq(g.side, d=g.pitch)
        fx, fy = np.meshgrid(f, f)
        assert np.all(h[fx**2 + fy**2 > 1] == 0)
        assert np.allclose(np.abs(h[fx**2 + fy**2 < 1]), 1.0)

    def test_unit_modulus_on_band(self):
        g = GridSpec(32)
        h = transfer_function(g, 40.0)
        mags = np.abs(h)
        assert np.all((np.abs(mags - 1) < 1e-14) | (mags == 0))

    def test_nonfinite_distance_rejected(self):
        with pytest.raises(ValueError):
            transfer_function(GridSpec(8), float("nan"))
        with pytest.raises(ValueError):
            transfer_function(GridSpec(8), float("inf"))


class TestPropagate:
    def test_zero_field(self):
        g = GridSpec(16)
        out = propagate(ComplexField(g, np.zeros((16, 16))), 40.0)
        assert np.all(out.values == 0)

    def test_uniform_field_dc_eigenfunction(self):
        g = GridSpec(16)
        u = ComplexField(g, np.ones((16, 16)))
        out = propagate(u, 40.0)
        expected = np.exp(1j * 2 * np.pi * 40.0)
        assert np.allclose(out.values, expected, atol=1e-8)

    def test_matches_direct_dft_oracle(self):
        rng = np.random.default_rng(7)
        g = GridSpec(16)
        for d in (0.0, 1.0, 40.0):
            u = random_field(g, rng)
            fast = propagate(u, d).values
            slow = direct_dft_propagate(u, d).values
            rel = np.linalg.norm(fast - slow) / np.linalg.norm(slow)
            assert rel <= 1e-10

    def test_linearity(self):
        rng = np.random.default_rng(3)
        g = GridSpec(16)
        u, v = random_field(g, rng), random_field(g, rng)
        a, b = 2.5 - 0.5j, -1.25 + 3j
        combined = propagate(ComplexField(g, a * u.values + b * v.values), 40.0)
        split = a * propagate(u, 40.0).values + b * propagate(v, 40.0).values
        assert np.allclose(combined.values, split, atol=1e-12)

    def test_power_conservation_band_limited(self):
        rng = np.random.default_rng(11)
        g = GridSpec(32, pitch=0.25)
        u = band_limited_field(g, rng)
        p0 = u.power()
        p1 = propagate(u, 40.0).power()
        assert abs(p1 - p0) / p0 <= 1e-9

    def test_composition(self):
        rng = np.random.default_rng(13)
        g = GridSpec(16)
        u = random_field(g, rng)
        once = propagate(u, 25.0).values
        twice = propagate(propagate(u, 10.0), 15.0).values
        rel = np.linalg.norm(once - twice) / np.linalg.norm(once)
        assert rel <= 1e-10

    def test_batched_equals_loop(self):
        rng = np.random.default_rng(17)
        g = GridSpec(16)
        batch = random_field(g, rng, batch=(5,))
        out = propagate(batch, 40.0).values
        for i in range(5):
            single = propagate(ComplexField(g, batch.values[i]), 40.0).values
            assert np.allclose(out[i], single, atol=1e-13)


class TestDirectOracle:
    def test_refuses_large_grid(self):
        g = GridSpec(128)
        with pytest.raises(ValueError):
            direct_dft_propagate(ComplexField(g, np.zeros((128, 128))), 1.0)

    def test_zero_field(self):
        g = GridSpec(16)
        out = direct_dft_propagate(ComplexField(g, np.zeros((16, 16))), 40.0)
        assert np.allclose(out.values, 0.0, atol=1e-14)

    def test_impulse_response_regression(self):
        # Frozen fingerprint of the discrete point-spread function.
        g = GridSpec(16)
        v = np.zeros((16, 16))
        v[8, 8] = 1.0
        out = direct_dft_propagate(ComplexField(g, v), 40.0).values
        assert out[8, 8] == pytest.approx(
            -0.12500804645727656 - 0.019512075666206923j, abs=1e-12
        )
        assert np.sum(np.abs(out) ** 2) == pytest.approx(0.75390625, abs=1e-9)


class TestAdjoint:
    def test_adjoint_identity(self):
        rng = np.random.default_rng(23)
        g = GridSpec(16)
        u, v = random_field(g, rng), random_field(g, rng)
        lhs = np.vdot(propagate(u, 40.0).values, v.values)
        rhs = np.vdot(u.values, adjoint_propagate(v, 40.0).values)
        assert abs(lhs - rhs) / abs(lhs) <= 1e-12

    def test_zero_distance_identity_on_band(self):
        rng = np.random.default_rng(29)
        g = GridSpec(16)
        u = band_limited_field(g, rng)
        out = adjoint_propagate(u, 0.0)
        assert np.allclose(out.values, u.values, atol=1e-12)

    def test_adjoint_inverts_propagate_on_band(self):
        rng = np.random.default_rng(31)
        g = GridSpec(16)
        u = band_limited_field(g, rng)
        back = adjoint_propagate(propagate(u, 40.0), 40.0)
        rel = np.linalg.norm(back.values - u.values) / np.linalg.norm(u.values)
        assert rel <= 1e-10


class TestPhaseLayer:
    def test_zero_phase_identity(self):
        rng = np.random.default_rng(37)
        g = GridSpec(16)
        u = random_field(g, rng)
        out = apply_phase_layer(u, PhaseLayer(g, np.zeros((16, 16))))
        assert np.array_equal(out.values, u.values)

    def test_pi_phase_negates(self):
        rng = np.random.default_rng(41)
        g = GridSpec(16)
        u = random_field(g, rng)
        out = apply_phase_layer(u, PhaseLayer(g, np.full((16, 16), np.pi)))
        assert np.allclose(out.values, -u.values, atol=1e-14)

    def test_power_preserved_exactly(self):
        rng = np.random.default_rng(43)
        g = GridSpec(16)
        u = random_field(g, rng)
        layer = PhaseLayer(g, rng.uniform(0, 2 * np.pi, (16, 16)))
        out = apply_phase_layer(u, layer)
        assert np.sum(np.abs(out.values) ** 2) == pytest.approx(
            np.sum(np.abs(u.values) ** 2), rel=1e-14
        )

    def test_grid_mismatch(self):
        u = ComplexField(GridSpec(16), np.ones((16, 16)))
        layer = PhaseLayer(GridSpec(8), np.zeros((8, 8)))
        with pytest.raises(GridMismatchError):
            apply_phase_layer(u, layer)


class TestLens:
    def test_center_phase_zero_amplitude_one(self):
        g = GridSpec(64)
        phase, amp = lens_phase(145.6, 30.0, g)
        i = g.side // 2
        # nearest pixel to the axis sits at (0.25, 0.25)
        assert abs(phase.phase[i, i]) < np.pi * 0.125 / 145.6 + 1e-9
        assert amp.amplitude[i, i] == 1.0

    def test_quadratic_phase_value(self):
        g = GridSpec(64)
        phase, _ = lens_phase(145.6, 30.0, g)
        x, y = g.coords()
        assert np.allclose(phase.phase, -np.pi * (x**2 + y**2) / 145.6)

    def test_aperture_blocks_outside_radius(self):
        # paper-sized lens on a grid large enough to hold it
        g = GridSpec(256)
        _, amp = lens_phase(145.6, 104.0, g)
        x, y = g.coords()
        r = np.sqrt(x**2 + y**2)
        assert np.all(amp.amplitude[r > 53.0] == 0.0)
        assert np.all(amp.amplitude[r < 51.9] == 1.0)

    def test_oversized_aperture_rejected(self):
        with pytest.raises(ValueError):
            lens_phase(145.6, 104.0, GridSpec(64))


class TestDetectors:
    def test_default_layout_geometry(self):
        g = GridSpec(128)  # 64-lambda reference grid
        layout = differential_layout(g)
        assert layout.detector_width == pytest.approx(6.4)
        assert layout.centers.shape == (20, 2)
        # 6.4-lambda square at 0.5 pitch covers 13x13 pixel centers
        assert layout.masks[0].sum() == 13 * 13

    def test_footprint_outside_grid_rejected(self):
        g = GridSpec(16)
        with pytest.raises(ValueError):
            DetectorLayout(g, 2.0, np.tile([3.9, 0.0], (20, 1)), 10)

    def test_overlap_rejected(self):
        g = GridSpec(64)
        centers = np.zeros((20, 2))
        centers[:, 0] = np.linspace(-10, 10, 20)
        with pytest.raises(ValueError):
            DetectorLayout(g, 4.0, centers, 10)

    def test_zero_field_zero_signals(self):
        g = GridSpec(128)
        layout = differential_layout(g)
        s = detector_readout(ComplexField(g, np.zeros((128, 128))), layout)
        assert np.all(s == 0)

    def test_uniform_field_area_integral(self):
        g = GridSpec(128)
        layout = differential_layout(g)
        s = detector_readout(ComplexField(g, np.ones((128, 128))), layout)
        assert np.allclose(s, 13 * 13 * 0.25)

    def test_signals_nonnegative_and_bounded_by_power(self):
        rng = np.random.default_rng(47)
        g = GridSpec(128)
        layout = differential_layout(g)
        u = random_field(g, rng)
        s = detector_readout(u, layout)
        assert np.all(s >= 0)
        assert s.sum() <= u.power() + 1e-12

    def test_batched_readout(self):
        rng = np.random.default_rng(53)
        g = GridSpec(128)
        layout = differential_layout(g)
        u = random_field(g, rng, batch=(3,))
        s = detector_readout(u, layout)
        assert s.shape == (3, 20)
        s0 = detector_readout(ComplexField(g, u.values[0]), layout)
        assert np.allclose(s[0], s0)


class TestMasks:
    def test_amplitude_bounds_enforced(self):
        g = GridSpec(8)
        with pytest.raises(ValueError):
            AmplitudeMask(g, np.full((8, 8), 1.5))
        with pytest.raises(ValueError):
            AmplitudeMask(g, np.full((8, 8), -0.1))
