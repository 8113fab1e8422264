"""
Tests for Spectral Module
"""

import numpy as np
import pytest

from autodiff import Tensor, vjp
from data import Discretization, FunctionSample
from errors import DomainError, NonUniformGridError
from spectral import (
    FftOperator, NudftOperator, SpectralPreprocessor, dft_uniform, idft_uniform, make_nudft_plan, make_operator,
    mode_set, n_modes, nudft_adjoint, nudft_forward, resample, spectral_postprocess_baseline,
    spectral_preprocess_baseline,
)


def _cosine(grid: Discretization, k: int) -> FunctionSample:
    return FunctionSample(np.cos(2 * np.pi * k * grid.positions[:, 0]), grid)


class TestModeSet:
    """Test the half-spectrum frequency set"""

    def test_counts(self):
        """Mode counts match the enumerated set"""
        assert len(mode_set(8, 1)) == n_modes(8, 1) == 8
        assert len(mode_set(4, 2)) == n_modes(4, 2) == 28

    def test_last_dimension_nonnegative(self):
        """The last dimension keeps 0 <= k < M, the others |k| < M"""
        freqs = mode_set(4, 2)
        assert freqs[:, 1].min() == 0 and freqs[:, 1].max() == 3
        assert freqs[:, 0].min() == -3 and freqs[:, 0].max() == 3

    def test_invalid_modes(self):
        """Test M < 1 is rejected"""
        with pytest.raises(DomainError):
            mode_set(0, 1)


class TestUniformTransforms:
    """Test dft_uniform / idft_uniform"""

    def test_constant(self):
        """A constant maps to mode 0 only"""
        grid = Discretization.uniform(64)
        s = dft_uniform(FunctionSample(np.full(64, 2.5), grid), 8)
        c = s.complex()[:, 0]
        assert abs(s.lookup((0,))[0] - 2.5) < 1e-12
        assert np.max(np.abs(c[1:])) < 1e-12

    def test_cosine_mode(self):
        """cos(2 pi 3x) on 64 points has |Theta_3| = 1/2 and nothing else"""
        grid = Discretization.uniform(64)
        s = dft_uniform(_cosine(grid, 3), 8)
        magnitudes = np.abs(s.complex()[:, 0])
        assert abs(magnitudes[3] - 0.5) < 1e-12
        assert np.max(np.delete(magnitudes, 3)) < 1e-12

    def test_linearity(self, rng):
        """dft(a f + b g) = a dft(f) + b dft(g)"""
        grid = Discretization.uniform(32)
        f, g = rng.standard_normal(32), rng.standard_normal(32)
        lhs = dft_uniform(FunctionSample(2.0 * f - 0.5 * g, grid), 8).coeffs
        rhs = 2.0 * dft_uniform(FunctionSample(f, grid), 8).coeffs - 0.5 * dft_uniform(FunctionSample(g, grid), 8).coeffs
        assert np.allclose(lhs, rhs, atol=1e-12)

    def test_full_band_round_trip(self, rng):
        """Odd N with M = (N + 1) / 2 is an exact full band"""
        grid = Discretization.uniform(63)
        f = FunctionSample(rng.standard_normal(63), grid)
        back = idft_uniform(dft_uniform(f, 32), grid)
        assert np.max(np.abs(back.values - f.values)) < 1e-10

    def test_full_band_round_trip_2d(self, rng):
        """Test the 2-D full band round trip"""
        grid = Discretization.uniform((9, 9))
        f = FunctionSample(rng.standard_normal(81), grid)
        back = idft_uniform(dft_uniform(f, 5), grid)
        assert np.max(np.abs(back.values - f.values)) < 1e-10

    def test_parseval(self, rng):
        """sum |f|^2 / N equals sum |Theta|^2 over the signed set"""
        grid = Discretization.uniform(63)
        values = rng.standard_normal(63)
        signed = dft_uniform(FunctionSample(values, grid), 32).to_signed()
        assert abs(np.sum(values ** 2) / 63 - np.sum(np.abs(signed.complex()) ** 2)) < 1e-9

    def test_signed_half_conversion(self, rng):
        """to_signed then to_half restores the stored coefficients"""
        grid = Discretization.uniform((9, 9))
        s = dft_uniform(FunctionSample(rng.standard_normal(81), grid), 4)
        back = s.to_signed().to_half()
        assert np.array_equal(back.freqs, s.freqs)
        assert np.allclose(back.coeffs, s.coeffs)

    def test_zero_spectrum(self):
        """Zero spectrum gives the zero function"""
        grid = Discretization.uniform(16)
        s = dft_uniform(FunctionSample(np.zeros(16), grid), 4)
        assert np.all(idft_uniform(s, grid).values == 0.0)

    def test_non_uniform_rejected(self, rng):
        """Irregular positions are directed to the NUDFT path"""
        disc = Discretization.random(32, 1, rng)
        with pytest.raises(NonUniformGridError):
            dft_uniform(FunctionSample(np.zeros(32), disc), 4)

    def test_band_too_wide(self):
        """Test N < 2M - 1 is rejected"""
        grid = Discretization.uniform(8)
        with pytest.raises(DomainError):
            dft_uniform(FunctionSample(np.zeros(8), grid), 8)


class TestNudft:
    """Test the dense NUDFT plan"""

    def test_matches_fft_on_uniform_grid(self, rng):
        """NUDFT on a uniform grid reduces to the DFT"""
        for n, m in [(16, 4), (33, 17), (64, 32)]:
            grid = Discretization.uniform(n)
            f = FunctionSample(rng.standard_normal(n), grid)
            a = nudft_forward(make_nudft_plan(grid, m), f).coeffs
            b = dft_uniform(f, m).coeffs
            assert np.max(np.abs(a - b)) < 1e-10

    def test_single_point_at_origin(self):
        """exp(0) = 1 for every mode"""
        disc = Discretization(np.zeros((1, 1)))
        s = nudft_forward(make_nudft_plan(disc, 5), FunctionSample(np.ones(1), disc))
        assert np.allclose(s.complex()[:, 0], 1.0)

    def test_constant_on_irregular_points(self, rng):
        """Mode 0 of a constant is the constant on any point set"""
        disc = Discretization.random(50, 1, rng)
        s = nudft_forward(make_nudft_plan(disc, 6), FunctionSample(np.full(50, 3.0), disc))
        assert abs(s.lookup((0,))[0] - 3.0) < 1e-12

    def test_uniform_full_band_adjoint_is_inverse(self, rng):
        """Adjoint after forward is the identity on a full-band uniform grid"""
        grid = Discretization.uniform(31)
        plan = make_nudft_plan(grid, 16)
        f = FunctionSample(rng.standard_normal(31), grid)
        back = nudft_adjoint(plan, nudft_forward(plan, f))
        assert np.max(np.abs(back.values - f.values)) < 1e-9

    def test_adjoint_inner_product(self, rng):
        """<V f, s> = <f, Vbar_T s>"""
        disc = Discretization.random(40, 1, rng)
        plan = make_nudft_plan(disc, 8)
        f = rng.standard_normal(40)
        s = rng.standard_normal(8) + 1j * rng.standard_normal(8)
        assert abs(np.vdot(s, plan.V @ f) - np.vdot(plan.Vbar_T @ s, f)) < 1e-10
        assert np.allclose(plan.Vbar_T, plan.V.conj().T)

    def test_zero_spectrum(self, rng):
        """Test zero spectrum on irregular points"""
        disc = Discretization.random(20, 1, rng)
        plan = make_nudft_plan(disc, 4)
        s = nudft_forward(plan, FunctionSample(np.zeros(20), disc))
        assert np.all(nudft_adjoint(plan, s).values == 0.0)

    def test_plan_is_deterministic_and_memoized(self, rng):
        """Plans depend only on positions and M"""
        positions = rng.uniform(size=(25, 1))
        a = make_nudft_plan(Discretization(positions), 6)
        b = make_nudft_plan(Discretization(positions.copy()), 6)
        assert a is b
        assert make_nudft_plan(Discretization(positions), 7) is not a

    def test_length_mismatch(self, rng):
        """A sample on other positions is rejected"""
        plan = make_nudft_plan(Discretization.random(10, 1, rng), 3)
        other = Discretization.random(11, 1, rng)
        with pytest.raises(ValueError):
            nudft_forward(plan, FunctionSample(np.zeros(11), other))

    def test_resample_band_limited(self, rng):
        """A band-limited function is evaluated exactly on new points"""
        grid = Discretization.uniform(33)
        target = Discretization.random(57, 1, rng)
        values = np.cos(2 * np.pi * 2 * grid.positions[:, 0])
        out = resample(values, grid, target, 17)
        assert np.max(np.abs(out[:, 0] - np.cos(2 * np.pi * 2 * target.positions[:, 0]))) < 1e-10


class TestOperators:
    """Test the differentiable batched operators"""

    def test_fft_and_nudft_agree_on_uniform_grid(self, rng):
        """Both paths give the same analysis and synthesis on a uniform grid"""
        grid = Discretization.uniform((8, 8))
        fft = FftOperator(grid, 4)
        nudft = NudftOperator(grid.positions, 4)
        x = Tensor(rng.standard_normal((2, 64, 3)))
        assert np.allclose(fft.analysis(x).data, nudft.analysis(x).data, atol=1e-12)
        s = Tensor(rng.standard_normal((2, fft.n_modes, 3, 2)))
        assert np.allclose(fft.synthesis(s).data, nudft.synthesis(s).data, atol=1e-10)

    @pytest.mark.parametrize("path", ["fft", "nudft", "nudft_batched"])
    def test_reverse_rule_is_adjoint(self, path, rng):
        """<A x, y> = <x, A^T y> through the reverse pass"""
        grid = Discretization.uniform(16)
        if path == "fft":
            op = make_operator(np.stack([grid.positions] * 2), 5, "fft", grid.grid_shape)
        elif path == "nudft":
            op = make_operator(np.stack([grid.positions] * 2), 5)
        else:
            op = make_operator(rng.uniform(size=(2, 16, 1)), 5)
        x = Tensor(rng.standard_normal((2, 16, 2)), requires_grad=True)
        y = rng.standard_normal((2, op.n_modes, 2, 2))
        out = op.analysis(x)
        (gx,) = vjp(out, [x], y)
        assert abs(np.sum(out.data * y) - np.sum(x.data * gx)) < 1e-10

        s = Tensor(rng.standard_normal((2, op.n_modes, 2, 2)), requires_grad=True)
        z = rng.standard_normal((2, 16, 2))
        out = op.synthesis(s)
        (gs,) = vjp(out, [s], z)
        assert abs(np.sum(out.data * z) - np.sum(s.data * gs)) < 1e-9

    def test_fft_path_needs_shared_grid(self, rng):
        """Test the FFT path refuses per-record positions"""
        with pytest.raises(NonUniformGridError):
            make_operator(rng.uniform(size=(2, 16, 1)), 4, "fft", (16,))

    def test_unknown_transform(self):
        """Test unknown transform names"""
        grid = Discretization.uniform(8)
        with pytest.raises(DomainError):
            make_operator(grid.positions[None], 2, "wavelet")


class TestBaselinePreprocessing:
    """Test replicate-pad real-FFT preprocessing"""

    def test_output_lengths(self):
        """1-D M=50 gives 100 values, 2-D M=16 gives 512"""
        assert SpectralPreprocessor((200,), 50, 20).output_dim == 100
        assert SpectralPreprocessor((64, 64), 16, 20).output_dim == 512
        grid = Discretization.uniform(200)
        assert spectral_preprocess_baseline(FunctionSample(np.zeros(200), grid), 50, 20).shape == (100,)

    def test_constant_single_entry(self):
        """A constant keeps only the mode-0 real part"""
        for grid, modes in [(Discretization.uniform(64), 8), (Discretization.uniform((32, 32)), 16)]:
            coeffs = spectral_preprocess_baseline(FunctionSample(np.full(grid.n_points, 1.5), grid), modes, 4)
            assert np.sum(np.abs(coeffs) > 1e-8) == 1

    def test_round_trip_band_limited(self):
        """Band-limited periodic functions are recovered"""
        grid = Discretization.uniform(64)
        f = _cosine(grid, 3)
        coeffs = spectral_preprocess_baseline(f, 8, 0)
        back = spectral_postprocess_baseline(coeffs, grid, 8, 0)
        assert np.max(np.abs(back.values - f.values)) < 1e-6

        grid2 = Discretization.uniform((32, 32))
        pos = grid2.positions
        f2 = FunctionSample(np.cos(2 * np.pi * (2 * pos[:, 0] + pos[:, 1])), grid2)
        back2 = spectral_postprocess_baseline(spectral_preprocess_baseline(f2, 16, 0), grid2, 16, 0)
        assert np.max(np.abs(back2.values - f2.values)) < 1e-6

    def test_negative_pad(self):
        """Test pad_width < 0 is rejected"""
        with pytest.raises(DomainError):
            SpectralPreprocessor((64,), 8, -1)


if __name__ == '__main__':
    pytest.main([__file__, '-v'])
