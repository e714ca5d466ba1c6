"""Kernel laws built from period parameters, their moments and expectations."""

import math

import numpy as np
import pytest
from pydantic import ValidationError

from engine.errors import CapacityError, QuadratureError
from engine.kernels import (
    DEGENERATE,
    BinomialPeriodParams,
    BinomialStep,
    BsPeriodParams,
    FiniteDiscreteLaw,
    KernelAtom,
    LogNormalLaw,
    cmim_integrability_check,
    expect,
    expect_gated,
    kernel_for,
    kernel_from_binomial,
    kernel_from_bs,
    moment,
    risk_neutral_probability,
    sample,
)


def atoms_of(law):
    return [(atom.rho, atom.prob) for atom in law.atoms]


class TestBinomialKernel:
    def test_single_step(self, binomial_law):
        rhos, probs = zip(*atoms_of(binomial_law))
        np.testing.assert_allclose(rhos, [5.0 / 9.0, 5.0 / 3.0], rtol=1e-14)
        np.testing.assert_allclose(probs, [0.6, 0.4], rtol=1e-14)

    def test_risk_neutral_probability(self, one_step):
        step = one_step.steps[0]
        assert risk_neutral_probability(step) == pytest.approx(1.0 / 3.0, rel=1e-14)
        assert step.p * step.rho_up + (1.0 - step.p) * step.rho_down == pytest.approx(1.0, rel=1e-14)

    def test_two_identical_steps_merge(self):
        step = BinomialStep(u=1.2, d=0.9, p=0.6)
        law = kernel_from_binomial(BinomialPeriodParams(steps=[step, step]))
        rhos, probs = zip(*atoms_of(law))
        np.testing.assert_allclose(rhos, [25.0 / 81.0, 25.0 / 27.0, 25.0 / 9.0], rtol=1e-13)
        np.testing.assert_allclose(probs, [0.36, 0.48, 0.16], rtol=1e-13)

    def test_physical_equals_risk_neutral(self):
        step = BinomialStep(u=1.2, d=0.9, p=(1.0 - 0.9) / (1.2 - 0.9))
        law = kernel_from_binomial(BinomialPeriodParams(steps=[step]))
        assert len(law.atoms) == 1
        assert law.atoms[0].rho == 1.0
        assert law.atoms[0].prob == pytest.approx(1.0, abs=1e-15)
        assert law.is_degenerate

    def test_normalization(self, four_steps):
        law = kernel_from_binomial(four_steps)
        assert math.fsum(law.probs) == pytest.approx(1.0, abs=1e-12)
        assert math.fsum(law.probs * law.rhos) == pytest.approx(1.0, abs=1e-12)
        assert np.all(np.diff(law.rhos) > 0)
        assert len(law.atoms) <= 16

    @pytest.mark.parametrize("n_steps", [1, 2, 3, 4])
    @pytest.mark.parametrize("repeat", [False, True])
    def test_matches_recursive_enumeration(self, n_steps, repeat):
        """Walk all 2^N paths; outcomes with equal up-counts per distinct step share one atom."""
        rng = np.random.default_rng(100 + n_steps)
        distinct = [
            BinomialStep(u=rng.uniform(1.05, 1.4), d=rng.uniform(0.7, 0.97), p=rng.uniform(0.2, 0.8))
            for _ in range(2 if repeat else n_steps)
        ]
        kinds = [index % len(distinct) for index in range(n_steps)]
        steps = [distinct[kind] for kind in kinds]

        leaves: dict[tuple[int, ...], list[float]] = {}

        def walk(depth, ups, rho, prob):
            if depth == n_steps:
                key = tuple(ups)
                merged = leaves.setdefault(key, [rho, 0.0])
                merged[1] += prob
                return
            step, kind = steps[depth], kinds[depth]
            up = list(ups)
            up[kind] += 1
            walk(depth + 1, up, rho * step.rho_up, prob * step.p)
            walk(depth + 1, ups, rho * step.rho_down, prob * (1.0 - step.p))

        walk(0, [0] * len(distinct), 1.0, 1.0)
        expected = sorted(leaves.values())

        law = kernel_from_binomial(BinomialPeriodParams(steps=steps))
        assert len(law.atoms) == len(expected)
        np.testing.assert_allclose(law.rhos, [rho for rho, _ in expected], rtol=1e-12)
        np.testing.assert_allclose(law.probs, [prob for _, prob in expected], rtol=1e-12)

    def test_near_unit_atom_is_degenerate(self, mixture):
        law = FiniteDiscreteLaw(atoms=[KernelAtom(rho=1.0 + 2.0**-52, prob=1.0)])
        assert law.is_degenerate
        assert mixture.reweighted(law) is mixture
        assert not kernel_from_binomial(BinomialPeriodParams(steps=[BinomialStep(u=1.2, d=0.9, p=0.6)])).is_degenerate

    def test_step_cap(self, four_steps):
        with pytest.raises(CapacityError):
            kernel_from_binomial(four_steps, step_cap=3)

    @pytest.mark.parametrize(
        "fields",
        [
            {"u": 1.0, "d": 0.9, "p": 0.5},
            {"u": 1.2, "d": 1.0, "p": 0.5},
            {"u": 1.2, "d": 0.9, "p": 0.0},
            {"u": 1.2, "d": 0.9, "p": 1.0},
        ],
    )
    def test_step_validation(self, fields):
        with pytest.raises(ValidationError):
            BinomialStep(**fields)

    def test_empty_period(self):
        with pytest.raises(ValidationError):
            BinomialPeriodParams(steps=[])


class TestBsKernel:
    def test_sigma_squared(self):
        law = kernel_from_bs(BsPeriodParams(lam=[0.3]))
        assert isinstance(law, LogNormalLaw)
        assert law.sigma2 == pytest.approx(0.09, rel=1e-15)
        assert kernel_from_bs(BsPeriodParams(lam=[0.3, 0.4])).sigma2 == pytest.approx(0.25, rel=1e-15)

    def test_zero_market_price_of_risk(self):
        assert kernel_from_bs(BsPeriodParams(lam=[0.0, 0.0])) is DEGENERATE

    def test_lambda_alias(self):
        params = BsPeriodParams.model_validate({"type": "bs", "lambda": [0.1, 0.2]})
        assert params.lam == [0.1, 0.2]
        assert params.model_dump()["lambda"] == [0.1, 0.2]

    def test_dispatch(self, one_step):
        assert isinstance(kernel_for(one_step), FiniteDiscreteLaw)
        assert isinstance(kernel_for(BsPeriodParams(lam=[0.2])), LogNormalLaw)

    @pytest.mark.parametrize(
        "sigma",
        [
            [[1.0, 0.0]],
            [[1.0, 1.0], [1.0, 1.0]],
        ],
    )
    def test_sigma_validation(self, sigma):
        with pytest.raises(ValidationError):
            BsPeriodParams(lam=[0.1, 0.2], sigma=sigma)

    def test_non_finite_lambda(self):
        with pytest.raises(ValidationError):
            BsPeriodParams(lam=[float("inf")])


class TestMoment:
    def test_lognormal_closed_form(self):
        assert moment(LogNormalLaw(sigma2=1.0), 2.0) == pytest.approx(math.e, rel=1e-15)

    @pytest.mark.parametrize("a", [0.0, 1.0])
    def test_trivial_exponents(self, a, binomial_law, lognormal_law):
        assert moment(binomial_law, a) == pytest.approx(1.0, rel=1e-14)
        assert moment(lognormal_law, a) == pytest.approx(1.0, rel=1e-15)

    def test_discrete_is_finite_sum(self, binomial_law):
        expected = 0.6 * (5.0 / 9.0) ** -0.5 + 0.4 * (5.0 / 3.0) ** -0.5
        assert moment(binomial_law, -0.5) == pytest.approx(expected, rel=1e-14)

    @pytest.mark.parametrize("law_name", ["binomial_law", "four_step_law", "lognormal_law"])
    def test_jensen_bounds(self, law_name, request, four_steps):
        law = kernel_from_binomial(four_steps) if law_name == "four_step_law" else request.getfixturevalue(law_name)
        outside = moment(law, np.array([-3.0, -1.0, -0.25, 1.25, 2.0, 4.0]))
        inside = moment(law, np.array([0.1, 0.25, 0.5, 0.75, 0.9]))
        assert np.all(outside > 1.0)
        assert np.all(inside < 1.0)

    def test_vectorised(self, lognormal_law):
        a = np.array([-2.0, 0.5, 3.0])
        np.testing.assert_allclose(moment(lognormal_law, a), np.exp(0.045 * a * (a - 1.0)), rtol=1e-15)

    @pytest.mark.parametrize("sigma2", [0.01, 0.09, 1.0])
    @pytest.mark.parametrize("a", [-2.0, -0.5, 0.5, 1.5, 3.0])
    def test_against_trapezoid_of_density(self, sigma2, a):
        """Integrate rho^a against the normal density of log rho on 2000 nodes."""
        sigma = math.sqrt(sigma2)
        centre = -0.5 * sigma2 + a * sigma2
        x = np.linspace(centre - 14.0 * sigma, centre + 14.0 * sigma, 2000)
        density = np.exp(-((x + 0.5 * sigma2) ** 2) / (2.0 * sigma2)) / math.sqrt(2.0 * math.pi * sigma2)
        numerical = np.trapezoid(np.exp(a * x) * density, x)
        assert moment(LogNormalLaw(sigma2=sigma2), a) == pytest.approx(numerical, rel=1e-8)


class TestIntegrability:
    def test_discrete_laws_always_pass(self, binomial_law):
        assert cmim_integrability_check(binomial_law, 0.01, 100.0)

    def test_lognormal_passes(self, lognormal_law):
        assert cmim_integrability_check(lognormal_law, 0.5, 5.0)

    def test_overflowing_moment_fails(self):
        assert not cmim_integrability_check(LogNormalLaw(sigma2=2000.0), 0.1, 2.0)

    def test_bounds_validated(self, lognormal_law):
        with pytest.raises(ValueError):
            cmim_integrability_check(lognormal_law, 3.0, 2.0)


class TestSampling:
    def test_lognormal_clt(self, rng):
        law = LogNormalLaw(sigma2=0.04)
        draws = sample(law, rng, 200_000)
        standard_error = math.sqrt(math.expm1(law.sigma2) / draws.size)
        assert abs(draws.mean() - 1.0) < 4.0 * standard_error
        assert np.log(draws).std() == pytest.approx(0.2, rel=1e-2)

    def test_binomial_frequencies(self, rng, binomial_law):
        draws = sample(binomial_law, rng, 200_000)
        assert set(np.unique(draws).tolist()) <= set(binomial_law.rhos.tolist())
        assert np.mean(draws == binomial_law.rhos[0]) == pytest.approx(0.6, abs=0.004)

    def test_scalar_draw(self, rng, lognormal_law):
        assert isinstance(sample(lognormal_law, rng), float)

    def test_seed_determinism(self, lognormal_law):
        first = sample(lognormal_law, np.random.default_rng(7), 10)
        second = sample(lognormal_law, np.random.default_rng(7), 10)
        np.testing.assert_array_equal(first, second)


class TestExpect:
    def test_discrete_exact(self, binomial_law):
        assert expect(binomial_law, np.log) == pytest.approx(0.6 * math.log(5 / 9) + 0.4 * math.log(5 / 3), rel=1e-14)

    def test_gauss_hermite_moment(self, lognormal_law):
        value = expect(lognormal_law, lambda rho: rho**-1.5)
        assert value == pytest.approx(moment(lognormal_law, -1.5), rel=1e-13)

    def test_broadcasts_over_leading_axes(self, lognormal_law):
        a = np.array([-1.0, 0.5, 2.0])
        values = expect(lognormal_law, lambda rho: rho[None, :] ** a[:, None])
        np.testing.assert_allclose(values, moment(lognormal_law, a), rtol=1e-12)

    def test_gate_passes_smooth_integrands(self, lognormal_law):
        value = expect_gated(lognormal_law, lambda rho: rho**0.5, tolerance=1e-10)
        assert value == pytest.approx(moment(lognormal_law, 0.5), rel=1e-13)

    def test_gate_rejects_kinked_integrand(self):
        with pytest.raises(QuadratureError):
            expect_gated(LogNormalLaw(sigma2=1.0), lambda rho: np.abs(np.log(rho) + 0.5), tolerance=1e-12)

    def test_gate_skips_discrete_laws(self, binomial_law):
        value = expect_gated(binomial_law, lambda rho: np.abs(rho - 1.0), tolerance=0.0)
        assert value == pytest.approx(0.6 * 4 / 9 + 0.4 * 2 / 3, rel=1e-14)


def test_discrete_law_must_be_a_kernel():
    with pytest.raises(ValidationError):
        FiniteDiscreteLaw(atoms=[KernelAtom(rho=0.5, prob=0.5), KernelAtom(rho=1.0, prob=0.5)])
