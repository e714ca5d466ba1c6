"""Fourier deconvolution route, checked against the closed-form CMIM solve."""

import math
import warnings

import numpy as np
import pytest
from pydantic import ValidationError

from engine.cmim_solver import solve_period
from engine.deconv import (
    DeconvConfig,
    TiltedKernel,
    assemble,
    convolution_residual,
    edge_taper,
    fourier_divide,
    solve,
    spectral_division,
    spectrum_rows,
    split,
    to_log_coordinates,
)
from engine.errors import (
    ConfigurationError,
    DomainError,
    DomainMismatchError,
    IllPosednessWarning,
    SolutionRejectedError,
)
from engine.grid import GridFunction
from engine.kernels import DEGENERATE, LogNormalLaw, moment
from engine.measures import Atom, RiskAversionMeasure, cmim, crra

Y_CHECK = np.geomspace(0.1, 10.0, 401)

# Two-atom law with a tilted transform that vanishes at xi = 2*pi for gamma_k = ALPHA / log 9
ALPHA = 0.5
BETA = 0.9
GAMMA_ON_LOCUS = ALPHA / math.log(9.0)


def locus_kernel(gamma_k: float) -> TiltedKernel:
    return TiltedKernel.from_shifted_atoms([-ALPHA, 0.0], [BETA * math.exp(-ALPHA / gamma_k), 1.0 - BETA], gamma_k)


@pytest.fixture
def mixture_config():
    return DeconvConfig(gamma1=1.4, gamma2=3.1)


class TestDeconvConfig:
    def test_defaults(self, mixture_config):
        assert mixture_config.half_width == 30.0
        assert mixture_config.n_points == 2**14
        assert mixture_config.taper_width == pytest.approx(4.5)
        assert mixture_config.frequencies[1] == pytest.approx(math.pi / 30.0)

    @pytest.mark.parametrize(
        "fields",
        [
            {"gamma1": 3.0, "gamma2": 2.0},
            {"gamma1": 1.0, "gamma2": 2.0, "n_points": 1000},
            {"gamma1": 1.0, "gamma2": 2.0, "taper_fraction": 0.5},
            {"gamma1": 1.0, "gamma2": 2.0, "split_width": -1.0},
        ],
    )
    def test_validation(self, fields):
        with pytest.raises(ValidationError):
            DeconvConfig(**fields)


class TestTiltedKernel:
    def test_lognormal_tilt(self, lognormal_law):
        kernel = TiltedKernel.from_law(lognormal_law, 2.0)
        assert kernel.form == "gaussian"
        assert kernel.mean == pytest.approx(0.0, abs=1e-17)
        assert kernel.variance == pytest.approx(0.09)
        assert kernel.transform(np.zeros(1))[0].real == pytest.approx(moment(lognormal_law, 0.5), rel=1e-14)

    def test_discrete_tilt(self, binomial_law):
        kernel = TiltedKernel.from_law(binomial_law, 4.0)
        np.testing.assert_allclose(kernel.shifts, [-math.log(5 / 9), -math.log(5 / 3)], rtol=1e-14)
        assert kernel.transform(np.zeros(1))[0].real == pytest.approx(moment(binomial_law, 0.75), rel=1e-14)
        assert kernel.reach == pytest.approx(math.log(9 / 5), rel=1e-14)

    def test_unknown_law(self):
        with pytest.raises(ConfigurationError):
            TiltedKernel.from_law(object(), 2.0)

    def test_gaussian_must_fit_the_grid(self):
        kernel = TiltedKernel.from_law(LogNormalLaw(sigma2=1.0), 2.0)
        with pytest.raises(ConfigurationError):
            kernel.check_localized(DeconvConfig(gamma1=1.0, gamma2=2.0, half_width=5.0, n_points=2**10))

    def test_atoms_must_fit_the_grid(self):
        kernel = TiltedKernel.from_shifted_atoms([-8.0, 0.0], [0.5, 0.5], 1.0)
        with pytest.raises(ConfigurationError):
            kernel.check_localized(DeconvConfig(gamma1=1.0, gamma2=2.0, half_width=5.0, n_points=2**10))

    def test_spectrum_rows(self, lognormal_law, mixture_config):
        kernel = TiltedKernel.from_law(lognormal_law, 1.4)
        rows = spectrum_rows(kernel, mixture_config)
        assert len(rows) == mixture_config.n_points
        xi = [row[0] for row in rows]
        assert xi == sorted(xi)
        centre = rows[mixture_config.n_points // 2]
        assert centre[0] == 0.0
        assert centre[3] == pytest.approx(kernel.mass, rel=1e-14)


class TestLogCoordinatesAndSplit:
    def test_to_log_coordinates(self, mixture, mixture_config):
        j0 = to_log_coordinates(cmim(mixture), mixture_config)
        np.testing.assert_allclose(j0.samples[::512], cmim(mixture)(np.exp(j0.t[::512])), rtol=1e-14)

    def test_smooth_split_is_a_partition(self, mixture, mixture_config):
        j0 = to_log_coordinates(cmim(mixture), mixture_config)
        j01, j02 = split(j0, mixture_config)
        t = j0.t
        rebuilt = np.exp(-t / 1.4) * j01.samples + np.exp(-t / 3.1) * j02.samples
        np.testing.assert_allclose(rebuilt, j0.samples * edge_taper(t, mixture_config), rtol=1e-12)

    def test_sharp_split(self, mixture):
        cfg = DeconvConfig(gamma1=1.4, gamma2=3.1, split_width=0.0)
        j0 = to_log_coordinates(cmim(mixture), cfg)
        j01, j02 = split(j0, cfg)
        t = j0.t
        inner = np.abs(t) <= 20.0
        np.testing.assert_allclose(
            j01.samples[inner], np.where(t < 0, j0.samples * np.exp(t / 1.4), 0.0)[inner], rtol=1e-12, atol=0.0
        )
        np.testing.assert_allclose(
            j02.samples[inner], np.where(t >= 0, j0.samples * np.exp(t / 3.1), 0.0)[inner], rtol=1e-12, atol=0.0
        )

    def test_edge_growth_is_a_mismatch(self):
        cfg = DeconvConfig(gamma1=2.0, gamma2=2.0, half_width=60.0, n_points=2**12)
        j0 = GridFunction.sample(lambda t: np.exp(-t), cfg.half_width, cfg.n_points)
        with pytest.raises(DomainMismatchError):
            split(j0, cfg)

    def test_non_positive_samples(self, mixture_config):
        j0 = GridFunction.sample(lambda t: np.tanh(t), mixture_config.half_width, mixture_config.n_points)
        with pytest.raises(DomainError):
            split(j0, mixture_config)

    def test_grid_mismatch(self, mixture, mixture_config):
        j0 = to_log_coordinates(cmim(mixture), DeconvConfig(gamma1=1.4, gamma2=3.1, n_points=2**10))
        with pytest.raises(ConfigurationError):
            split(j0, mixture_config)


class TestSolve:
    def test_degenerate_kernel_reproduces_input(self, mixture, mixture_config):
        solution = solve(cmim(mixture), DEGENERATE, mixture_config)
        marginal = solution.marginal
        assert marginal.t_lo <= -25.5 + mixture_config.step and marginal.t_hi >= 25.5 - mixture_config.step
        np.testing.assert_allclose(
            marginal.interior_values, solution.j0.samples[marginal.interior_mask], rtol=1e-10, atol=0.0
        )
        np.testing.assert_allclose(marginal(Y_CHECK), cmim(mixture)(Y_CHECK), rtol=1e-7)
        assert not solution.ill_posed

    def test_linear_in_the_input(self, binomial_law):
        """solve(2A + B/2) = 2 solve(A) + solve(B)/2 on the trusted grid nodes."""
        cfg = DeconvConfig(gamma1=1.0, gamma2=4.0)
        first = RiskAversionMeasure(
            atoms=[Atom(gamma=1.5, weight=0.5), Atom(gamma=3.0, weight=0.5)], gamma_min=1.0, gamma_max=4.0
        )
        second = RiskAversionMeasure(atoms=[Atom(gamma=2.0, weight=1.0)], gamma_min=1.0, gamma_max=4.0)
        combined = RiskAversionMeasure(
            atoms=[Atom(gamma=1.5, weight=1.0), Atom(gamma=3.0, weight=1.0), Atom(gamma=2.0, weight=0.5)],
            gamma_min=1.0,
            gamma_max=4.0,
        )

        a, b, c = (solve(cmim(measure), binomial_law, cfg).marginal for measure in (first, second, combined))
        assert (a.t_lo, a.t_hi) == (c.t_lo, c.t_hi) == (b.t_lo, b.t_hi)
        np.testing.assert_allclose(
            c.interior_values, 2.0 * a.interior_values + 0.5 * b.interior_values, rtol=1e-9, atol=0.0
        )

    def test_crra_under_lognormal(self, lognormal_law):
        solution = solve(cmim(crra(2.0, 1.0, 3.0)), lognormal_law, DeconvConfig(gamma1=1.5, gamma2=3.0))
        np.testing.assert_allclose(solution.marginal(Y_CHECK), math.exp(0.01125) * Y_CHECK**-0.5, rtol=1e-5)

    def test_mixture_matches_closed_form(self, mixture, lognormal_law, mixture_config):
        solution = solve(cmim(mixture), lognormal_law, mixture_config)
        exact = cmim(solve_period(mixture, lognormal_law))
        assert np.max(np.abs(solution.marginal(Y_CHECK) - exact(Y_CHECK))) <= 1e-3
        assert solution.marginal.gamma_bounds == (1.4, 3.1)
        assert convolution_residual(solution.marginal, lognormal_law, cmim(mixture)) <= 1e-3

    def test_halving_the_step_halves_the_error(self, mixture, lognormal_law):
        """Coarse grids are dominated by interpolation error, which shrinks at least linearly."""
        exact = cmim(solve_period(mixture, lognormal_law))(Y_CHECK)
        errors = []
        for n_points in (2**9, 2**10):
            cfg = DeconvConfig(gamma1=1.4, gamma2=3.1, n_points=n_points)
            errors.append(np.max(np.abs(solve(cmim(mixture), lognormal_law, cfg).marginal(Y_CHECK) - exact)))
        assert errors[1] <= 0.5 * errors[0]

    @pytest.mark.slow
    def test_halving_the_step_at_the_full_grid(self, mixture, lognormal_law):
        """L = 30 with n = 2^13 and 2^14; the floor stays clear of the interpolation error at 2^14."""
        exact = cmim(solve_period(mixture, lognormal_law))(Y_CHECK)
        errors = []
        for n_points in (2**13, 2**14):
            cfg = DeconvConfig(gamma1=1.4, gamma2=3.1, n_points=n_points, fourier_floor=1e-7)
            errors.append(np.max(np.abs(solve(cmim(mixture), lognormal_law, cfg).marginal(Y_CHECK) - exact)))
        assert errors[1] <= 1e-3
        assert errors[1] <= 0.5 * errors[0]

    def test_binomial_matches_closed_form(self, binomial_law):
        measure = RiskAversionMeasure(
            atoms=[Atom(gamma=1.5, weight=0.5), Atom(gamma=3.0, weight=0.5)], gamma_min=1.0, gamma_max=4.0
        )
        solution = solve(cmim(measure), binomial_law, DeconvConfig(gamma1=1.0, gamma2=4.0))
        exact = cmim(solve_period(measure, binomial_law))
        np.testing.assert_allclose(solution.marginal(Y_CHECK), exact(Y_CHECK), rtol=1e-6)

    def test_records_divisions(self, mixture, lognormal_law, mixture_config):
        solution = solve(cmim(mixture), lognormal_law, mixture_config)
        assert [division.gamma_k for division in solution.divisions] == [1.4, 3.1]
        assert all(division.zeroed_bins > 0 for division in solution.divisions)
        assert solution.marginal.t_hi <= 30.0 - 4.5 - solution.kernels[0].reach


class TestSpectralZeros:
    def test_zero_on_the_locus_warns(self):
        cfg = DeconvConfig(gamma1=GAMMA_ON_LOCUS, gamma2=1.0)
        kernel = locus_kernel(GAMMA_ON_LOCUS)
        piece = GridFunction.sample(lambda t: np.exp(-(t**2)), cfg.half_width, cfg.n_points)

        with pytest.warns(IllPosednessWarning) as record:
            division = spectral_division(piece, kernel, cfg)

        warning = next(item.message for item in record if isinstance(item.message, IllPosednessWarning))
        assert warning.gamma_k == GAMMA_ON_LOCUS
        assert any(abs(xi - 2.0 * math.pi) < 1e-9 for xi in warning.frequencies)
        assert any(abs(xi + 2.0 * math.pi) < 1e-9 for xi in warning.frequencies)
        assert division.ill_posed_frequencies == warning.frequencies
        assert abs(cfg.frequencies[60] - 2.0 * math.pi) < 1e-12

    def test_off_the_locus_is_well_posed(self):
        """gamma1 = 1.1 x the locus value; I0(y) = y^(-2) solves to c*y^(-2) with c = 1/(0.9/e + 0.1)."""
        gamma1 = 1.1 * GAMMA_ON_LOCUS
        cfg = DeconvConfig(gamma1=gamma1, gamma2=1.0)
        j0 = to_log_coordinates(cmim(crra(0.5, 0.1, 2.0)), cfg)
        j01, j02 = split(j0, cfg)

        with warnings.catch_warnings():
            warnings.simplefilter("error")
            j11 = fourier_divide(j01, locus_kernel(gamma1), cfg)
            j12 = fourier_divide(j02, locus_kernel(1.0), cfg)

        # e^(-t/gamma1) magnifies rounding in J11 far to the left; trust |t| <= 6 only
        marginal = assemble(j11, j12, cfg, reach=cfg.half_width - cfg.taper_width - 6.0)
        c = 1.0 / (0.9 * math.exp(-1.0) + 0.1)
        np.testing.assert_allclose(marginal(Y_CHECK), c * Y_CHECK**-2.0, rtol=1e-6)


class TestAssemble:
    def test_rejects_non_positive(self, mixture_config):
        zeros = GridFunction.from_array(mixture_config.half_width, np.zeros(mixture_config.n_points))
        with pytest.raises(SolutionRejectedError):
            assemble(zeros, zeros, mixture_config)

    def test_rejects_increasing(self, mixture_config):
        t = mixture_config.t
        rising = GridFunction.from_array(mixture_config.half_width, np.exp(t / 1.4) * (1.0 + 0.1 * np.sin(t)))
        zeros = rising.with_samples(np.zeros_like(t))
        with pytest.raises(SolutionRejectedError):
            assemble(rising, zeros, mixture_config)

    def test_needs_an_interior(self, mixture_config):
        ones = GridFunction.from_array(mixture_config.half_width, np.ones(mixture_config.n_points))
        with pytest.raises(ConfigurationError):
            assemble(ones, ones, mixture_config, reach=26.0)

    def test_power_tails_outside_interior(self, mixture_config):
        t = mixture_config.t
        j11 = GridFunction.from_array(mixture_config.half_width, np.exp(t * (1 / 1.4 - 1 / 2.0)))
        zeros = j11.with_samples(np.zeros_like(t))
        marginal = assemble(j11, zeros, mixture_config, reach=1.0)
        assert marginal.t_hi <= 24.5 and marginal.t_lo >= -24.5
        expected = math.exp(-marginal.t_lo / 2.0 + (marginal.t_lo + 27.0) / 1.4)
        assert marginal(math.exp(-27.0)) == pytest.approx(expected, rel=1e-9)
