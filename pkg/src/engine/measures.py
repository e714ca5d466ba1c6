"""Risk-aversion measures and the inverse marginals they induce.

A completely monotonic inverse marginal (CMIM) is

    I(y) = ∫ y^(−1/γ) dm(γ)

for a finite measure m compactly supported in (γ_min, γ_max). Measures are
atoms plus piecewise-constant density cells; cells may carry an ordered list of
kernel tilts so that period-to-period reweighting stays exact.

Everything here evaluates in log space and is vectorised over y.
"""

import math
from abc import ABC, abstractmethod
from typing import Callable, Literal, Optional

import numpy as np
from numpy.polynomial.legendre import leggauss
from pydantic import BaseModel, ConfigDict, Field, NonNegativeFloat, PositiveFloat, model_validator
from scipy.special import exprel, logsumexp

from engine.errors import DomainError, NumericalRangeError, QuadratureError
from engine.kernels import KernelLaw

Y_MIN = 1e-300
Y_MAX = 1e300
LOG_EXP_LIMIT = 709.0
CELL_QUADRATURE_TOLERANCE = 1e-12
INVERSION_TOLERANCE = 1e-10

_GL_NODES, _GL_WEIGHTS = leggauss(16)


# ------------------------------------------------------------------------- quadrature


def _gauss_legendre(integrand: Callable[[np.ndarray], np.ndarray], lo: float, hi: float) -> np.ndarray:
    half = 0.5 * (hi - lo)
    nodes = 0.5 * (hi + lo) + half * _GL_NODES
    return half * (integrand(nodes) @ _GL_WEIGHTS)


def adaptive_gauss_legendre(
    integrand: Callable[[np.ndarray], np.ndarray],
    lo: float,
    hi: float,
    rel_tol: float = CELL_QUADRATURE_TOLERANCE,
    max_depth: int = 40,
) -> np.ndarray:
    """Integrate over [lo, hi] by bisecting until halves agree with the whole to ``rel_tol``.

    ``integrand`` receives the node vector and returns values with the nodes on the
    last axis; the result has the leading shape.
    """

    def refine(a: float, b: float, whole: np.ndarray, depth: int) -> np.ndarray:
        mid = 0.5 * (a + b)
        left = _gauss_legendre(integrand, a, mid)
        right = _gauss_legendre(integrand, mid, b)
        both = left + right
        scale = np.maximum(np.abs(both), np.finfo(float).tiny)
        if np.all(np.abs(both - whole) <= rel_tol * scale):
            return both
        if depth == 0:
            raise QuadratureError(f"cell quadrature on [{lo}, {hi}] did not reach {rel_tol:.0e}")
        return refine(a, mid, left, depth - 1) + refine(mid, b, right, depth - 1)

    return refine(lo, hi, _gauss_legendre(integrand, lo, hi), max_depth)


# ------------------------------------------------------------------------------ types


class Atom(BaseModel):
    model_config = ConfigDict(frozen=True)

    gamma: PositiveFloat
    weight: PositiveFloat


class DensityCell(BaseModel):
    model_config = ConfigDict(frozen=True)

    lo: PositiveFloat
    hi: PositiveFloat
    level: NonNegativeFloat

    @model_validator(mode="after")
    def ordered(self) -> "DensityCell":
        if not self.lo < self.hi:
            raise ValueError(f"cell needs lo < hi, got [{self.lo}, {self.hi}]")
        return self


class MeasureTilt(BaseModel):
    """Density factor γ ↦ moment(law, 1 − 1/γ)^power applied to every cell."""

    model_config = ConfigDict(frozen=True)

    law: KernelLaw
    power: int = -1

    def factor(self, gammas: np.ndarray) -> np.ndarray:
        return self.law.moment(1.0 - 1.0 / gammas) ** self.power


class RiskAversionMeasure(BaseModel):
    model_config = ConfigDict(frozen=True)

    atoms: list[Atom] = Field(default_factory=list)
    cells: list[DensityCell] = Field(default_factory=list)
    tilts: list[MeasureTilt] = Field(default_factory=list, description="Exact reweighting history of the cells")
    gamma_min: PositiveFloat
    gamma_max: PositiveFloat

    @model_validator(mode="after")
    def supported_inside(self) -> "RiskAversionMeasure":
        if self.gamma_min > self.gamma_max:
            raise ValueError(f"gamma_min {self.gamma_min} exceeds gamma_max {self.gamma_max}")
        for atom in self.atoms:
            if not self.gamma_min < atom.gamma < self.gamma_max:
                raise ValueError(f"atom at gamma={atom.gamma} outside ({self.gamma_min}, {self.gamma_max})")
        for cell in self.cells:
            if not (self.gamma_min < cell.lo and cell.hi < self.gamma_max):
                raise ValueError(f"cell [{cell.lo}, {cell.hi}] outside ({self.gamma_min}, {self.gamma_max})")
        if not any(cell.level > 0 for cell in self.cells) and not self.atoms:
            raise ValueError("measure has zero mass")
        return self

    def cell_density(self, gammas: np.ndarray, level: float) -> np.ndarray:
        density = np.full(np.shape(gammas), float(level))
        for tilt in self.tilts:
            density = density * tilt.factor(gammas)
        return density

    @property
    def mass(self) -> float:
        return float(np.exp(self.log_mixture(np.zeros(1)))[0])

    def support(self) -> tuple[list[float], list[tuple[float, float]]]:
        return (
            [atom.gamma for atom in self.atoms],
            [(cell.lo, cell.hi) for cell in self.cells if cell.level > 0],
        )

    def reweighted(self, law, power: int = -1) -> "RiskAversionMeasure":
        """Multiply dm by moment(law, 1 − 1/γ)^power; the support is unchanged."""
        if law.is_degenerate:
            return self

        atoms = [
            Atom(gamma=atom.gamma, weight=atom.weight * float(law.moment(1.0 - 1.0 / atom.gamma)) ** power)
            for atom in self.atoms
        ]
        tilts = list(self.tilts)
        if self.cells:
            tilts.append(MeasureTilt(law=law, power=power))
        return self.model_copy(update={"atoms": atoms, "tilts": tilts})

    def scaled(self, factor: float) -> "RiskAversionMeasure":
        if not factor > 0:
            raise DomainError(f"scale factor must be positive, got {factor}")
        atoms = [Atom(gamma=atom.gamma, weight=atom.weight * factor) for atom in self.atoms]
        cells = [DensityCell(lo=cell.lo, hi=cell.hi, level=cell.level * factor) for cell in self.cells]
        return self.model_copy(update={"atoms": atoms, "cells": cells})

    def log_mixture(
        self,
        log_y: np.ndarray,
        weight_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    ) -> np.ndarray:
        """log ∫ g(γ)·y^(−1/γ) dm(γ) with g = ``weight_fn`` (1 if omitted)."""
        log_y = np.asarray(log_y, dtype=float)
        terms = []

        if self.atoms:
            gammas = np.array([atom.gamma for atom in self.atoms])
            log_weights = np.log([atom.weight for atom in self.atoms])
            if weight_fn is not None:
                log_weights = log_weights + np.log(weight_fn(gammas))
            exponents = log_weights - log_y[..., None] / gammas
            terms.append(logsumexp(exponents, axis=-1))

        for cell in self.cells:
            if cell.level == 0:
                continue
            # y^(−1/γ) is monotone in γ, so its largest value sits at an endpoint
            shift = np.maximum(-log_y / cell.lo, -log_y / cell.hi)

            def integrand(gammas: np.ndarray, cell=cell, shift=shift) -> np.ndarray:
                values = self.cell_density(gammas, cell.level) * np.exp(-log_y[..., None] / gammas - shift[..., None])
                if weight_fn is not None:
                    values = values * weight_fn(gammas)
                return values

            integral = adaptive_gauss_legendre(integrand, cell.lo, cell.hi)
            with np.errstate(divide="ignore"):
                terms.append(np.log(integral) + shift)

        return np.logaddexp.reduce(np.stack(terms), axis=0)

    def primitive(self, log_y: np.ndarray) -> np.ndarray:
        """Φ(y) = ∫₁^y s·I′(s) ds = −∫ (1/γ)·ln y·exprel((1 − 1/γ) ln y) dm(γ)."""
        log_y = np.asarray(log_y, dtype=float)

        def kernel(gammas: np.ndarray) -> np.ndarray:
            scaled = log_y[..., None] * (1.0 - 1.0 / gammas)
            with np.errstate(over="ignore"):
                return -(log_y[..., None] / gammas) * exprel(scaled)

        total = np.zeros(log_y.shape)
        if self.atoms:
            gammas = np.array([atom.gamma for atom in self.atoms])
            weights = np.array([atom.weight for atom in self.atoms])
            total = total + kernel(gammas) @ weights

        for cell in self.cells:
            if cell.level == 0:
                continue
            total = total + adaptive_gauss_legendre(
                lambda gammas, cell=cell: self.cell_density(gammas, cell.level) * kernel(gammas),
                cell.lo,
                cell.hi,
            )

        if not np.all(np.isfinite(total)):
            raise NumericalRangeError("utility primitive overflowed")
        return total


# ------------------------------------------------------------------ inverse marginals


def as_positive_array(y) -> np.ndarray:
    """Validate arguments of inverse marginals: positive, within the representable range."""
    values = np.asarray(y, dtype=float)
    if np.any(np.isnan(values)) or np.any(values <= 0):
        raise DomainError("inverse marginal arguments must be positive")
    if np.any(values < Y_MIN) or np.any(values > Y_MAX):
        raise NumericalRangeError(f"argument outside [{Y_MIN:g}, {Y_MAX:g}]")
    return values


def _unwrap(values: np.ndarray, like):
    return float(values) if np.ndim(like) == 0 else values


class InverseMarginal(BaseModel, ABC):
    """Strictly decreasing I: (0, ∞) → (0, ∞), the inverse of a utility's marginal."""

    model_config = ConfigDict(frozen=True)

    @abstractmethod
    def log_value(self, y: np.ndarray) -> np.ndarray:
        """log I(y) for a validated array ``y``."""

    @abstractmethod
    def log_slope(self, y: np.ndarray) -> np.ndarray:
        """d log I / d log y, strictly negative."""

    @abstractmethod
    def primitive(self, y: np.ndarray) -> np.ndarray:
        """Φ(y) = ∫₁^y s·I′(s) ds; the utility is U(x) = c + Φ(I⁻¹(x))."""

    @property
    @abstractmethod
    def gamma_bounds(self) -> tuple[float, float]:
        """Ambient (γ₁, γ₂); the tails decay like y^(−1/γ₁) at 0 and y^(−1/γ₂) at ∞."""

    def __call__(self, y):
        log_values = self.log_value(as_positive_array(y))
        if np.any(log_values > LOG_EXP_LIMIT):
            raise NumericalRangeError("inverse marginal overflows")
        return _unwrap(np.exp(log_values), y)

    def derivative(self, y):
        values = as_positive_array(y)
        return _unwrap(np.exp(self.log_value(values)) * self.log_slope(values) / values, y)

    def utility_primitive(self, y):
        return _unwrap(self.primitive(as_positive_array(y)), y)

    def inverse(self, x, rel_tol: float = INVERSION_TOLERANCE):
        return invert(self, x, rel_tol=rel_tol)


class CmimInverseMarginal(InverseMarginal):
    kind: Literal["cmim"] = "cmim"
    measure: RiskAversionMeasure

    def log_value(self, y: np.ndarray) -> np.ndarray:
        return self.measure.log_mixture(np.log(y))

    def log_slope(self, y: np.ndarray) -> np.ndarray:
        log_y = np.log(y)
        return -np.exp(self.measure.log_mixture(log_y, lambda gammas: 1.0 / gammas) - self.measure.log_mixture(log_y))

    def primitive(self, y: np.ndarray) -> np.ndarray:
        return self.measure.primitive(np.log(y))

    @property
    def gamma_bounds(self) -> tuple[float, float]:
        return self.measure.gamma_min, self.measure.gamma_max


def crra(gamma: float, gamma_min: float, gamma_max: float, weight: float = 1.0) -> RiskAversionMeasure:
    """Single-atom measure: I(y) = weight·y^(−1/γ)."""
    return RiskAversionMeasure(atoms=[Atom(gamma=gamma, weight=weight)], gamma_min=gamma_min, gamma_max=gamma_max)


def log_utility(gamma_min: float = 0.5, gamma_max: float = 2.0) -> RiskAversionMeasure:
    """I(y) = 1/y, i.e. U(x) = ln x up to the anchor."""
    return crra(1.0, gamma_min, gamma_max)


def cmim(measure: RiskAversionMeasure) -> CmimInverseMarginal:
    return CmimInverseMarginal(measure=measure)


# ------------------------------------------------------------------------- operations


def eval_cmim(m: RiskAversionMeasure, y):
    return cmim(m)(y)


def eval_cmim_derivative(m: RiskAversionMeasure, y):
    return cmim(m).derivative(y)


def sandwich_bounds(m: RiskAversionMeasure, y):
    """mass·y^(−1/γ₁) and mass·y^(−1/γ₂), ordered so lo ≤ I(y) ≤ hi."""
    values = as_positive_array(y)
    mass = m.mass
    first = mass * values ** (-1.0 / m.gamma_min)
    second = mass * values ** (-1.0 / m.gamma_max)
    return _unwrap(np.minimum(first, second), y), _unwrap(np.maximum(first, second), y)


def invert(marginal: InverseMarginal, x, rel_tol: float = INVERSION_TOLERANCE):
    """Solve I(y) = x for y by geometric bracketing from y = 1, bisection, then Newton.

    Works on log y; the bracket may grow up to [1e−300, 1e300].
    """
    targets = np.asarray(x, dtype=float)
    if np.any(np.isnan(targets)) or np.any(targets <= 0):
        raise DomainError("invert needs positive wealth levels")
    log_x = np.log(targets).reshape(-1)

    def gap(s: np.ndarray) -> np.ndarray:
        return marginal.log_value(np.exp(s)) - log_x

    limit = math.log(Y_MAX) - 1.0
    at_one = gap(np.zeros_like(log_x))
    # I is decreasing: I(1) > x puts the root at y > 1
    rising = at_one > 0
    falling = at_one < 0
    lo = np.zeros_like(log_x)
    hi = np.zeros_like(log_x)
    pending = rising | falling

    reach = 1.0
    while np.any(pending):
        probe = np.where(rising, reach, -reach)
        values = gap(np.where(pending, probe, 0.0))
        hit_rising = pending & rising & (values <= 0)
        hit_falling = pending & falling & (values >= 0)
        lo = np.where(pending & rising & ~hit_rising, probe, lo)
        hi = np.where(hit_rising, probe, hi)
        hi = np.where(pending & falling & ~hit_falling, probe, hi)
        lo = np.where(hit_falling, probe, lo)
        pending = pending & ~(hit_rising | hit_falling)
        if np.any(pending) and reach >= limit:
            raise NumericalRangeError(f"no bracket for I(y) = x within y in [{Y_MIN:g}, {Y_MAX:g}]")
        reach = min(2.0 * reach, limit)

    # gap(lo) >= 0 >= gap(hi)
    while np.max(hi - lo) > 1e-6:
        mid = 0.5 * (lo + hi)
        above = gap(mid) > 0
        lo = np.where(above, mid, lo)
        hi = np.where(above, hi, mid)

    s = 0.5 * (lo + hi)
    for _ in range(30):
        residual = gap(s)
        if np.all(np.abs(residual) <= 0.25 * rel_tol):
            break
        slope = marginal.log_slope(np.exp(s))
        s = np.clip(s - residual / slope, lo, hi)

    residual = np.abs(np.expm1(gap(s)))
    if np.any(residual > rel_tol):
        raise NumericalRangeError(f"inversion stalled at relative error {float(np.max(residual)):.2e}")

    return _unwrap(np.exp(s).reshape(targets.shape), x)
