"""One-period pricing-kernel laws for the binomial and Black-Scholes backends.

A law is the distribution ν of the kernel ρ = Z_n / Z_{n-1} given the period
parameters. Both variants are immutable pydantic models; array views are cached.
"""

import math
from functools import cached_property
from typing import Annotated, Callable, Literal, Optional, Union

import numpy as np
from numpy.polynomial.hermite import hermgauss
from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, field_validator, model_validator

from engine.errors import CapacityError, QuadratureError
from utils import Logger

NORMALIZATION_TOLERANCE = 1e-12
MERGE_TOLERANCE = 1e-12
DEFAULT_GH_ORDER = 64
DEFAULT_STEP_CAP = 20


# -------------------------------------------------------------------- period parameters


class BinomialStep(BaseModel):
    model_config = ConfigDict(frozen=True)

    u: float = Field(..., gt=1.0, description="Up factor of the sub-step")
    d: float = Field(..., gt=0.0, lt=1.0, description="Down factor of the sub-step")
    p: float = Field(..., gt=0.0, lt=1.0, description="Physical probability of the up move")

    @property
    def q(self) -> float:
        """Risk-neutral probability of the up move."""
        return (1.0 - self.d) / (self.u - self.d)

    @property
    def rho_up(self) -> float:
        return self.q / self.p

    @property
    def rho_down(self) -> float:
        return (1.0 - self.q) / (1.0 - self.p)


class BinomialPeriodParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    type: Literal["binomial"] = "binomial"
    steps: list[BinomialStep] = Field(..., min_length=1, description="Sub-steps (u, d, p) of the period")


class BsPeriodParams(BaseModel):
    model_config = ConfigDict(frozen=True, populate_by_name=True, serialize_by_alias=True)

    type: Literal["bs"] = "bs"
    lam: list[float] = Field(..., alias="lambda", min_length=1, description="Market price of risk vector")
    sigma: Optional[list[list[float]]] = Field(default=None, description="Volatility matrix (K x K), used by sim")

    @field_validator("lam")
    @classmethod
    def finite_lambda(cls, value: list[float]) -> list[float]:
        if not all(math.isfinite(component) for component in value):
            raise ValueError("lambda must be finite")
        return value

    @model_validator(mode="after")
    def sigma_invertible(self) -> "BsPeriodParams":
        if self.sigma is None:
            return self

        matrix = np.asarray(self.sigma, dtype=float)
        k = len(self.lam)
        if matrix.shape != (k, k):
            raise ValueError(f"sigma must be {k}x{k}, got {matrix.shape}")
        if not np.all(np.isfinite(matrix)) or np.linalg.cond(matrix) > 1e12:
            raise ValueError("sigma must be finite and nonsingular")
        return self

    @property
    def sigma2(self) -> float:
        lam = np.asarray(self.lam, dtype=float)
        return float(lam @ lam)


PeriodParams = Annotated[Union[BinomialPeriodParams, BsPeriodParams], Field(discriminator="type")]


# ------------------------------------------------------------------------------- laws


class KernelAtom(BaseModel):
    model_config = ConfigDict(frozen=True)

    rho: PositiveFloat
    prob: PositiveFloat


class FiniteDiscreteLaw(BaseModel):
    """ν = Σ π_i δ_{ρ_i}; expectations are exact finite sums."""

    model_config = ConfigDict(frozen=True)

    type: Literal["discrete"] = "discrete"
    atoms: list[KernelAtom] = Field(..., min_length=1)

    @model_validator(mode="after")
    def normalized(self) -> "FiniteDiscreteLaw":
        total = math.fsum(atom.prob for atom in self.atoms)
        mean = math.fsum(atom.prob * atom.rho for atom in self.atoms)
        if abs(total - 1.0) > NORMALIZATION_TOLERANCE:
            raise ValueError(f"probabilities sum to {total!r}, expected 1")
        if abs(mean - 1.0) > NORMALIZATION_TOLERANCE:
            raise ValueError(f"kernel mean is {mean!r}, expected 1")
        return self

    @cached_property
    def rhos(self) -> np.ndarray:
        return np.array([atom.rho for atom in self.atoms])

    @cached_property
    def probs(self) -> np.ndarray:
        return np.array([atom.prob for atom in self.atoms])

    @property
    def is_degenerate(self) -> bool:
        return bool(np.all(np.abs(self.rhos - 1.0) <= MERGE_TOLERANCE))

    def nodes(self, order: Optional[int] = None) -> tuple[np.ndarray, np.ndarray]:
        return self.rhos, self.probs

    def moment(self, a):
        exponents = np.multiply.outer(np.asarray(a, dtype=float), np.log(self.rhos))
        return np.exp(exponents) @ self.probs

    def sample(self, rng: np.random.Generator, size=None):
        cdf = np.cumsum(self.probs)
        cdf[-1] = 1.0
        index = np.searchsorted(cdf, rng.random(size), side="right")
        return self.rhos[index]


class LogNormalLaw(BaseModel):
    """ρ = exp(−σ²/2 − σZ) with Z standard normal."""

    model_config = ConfigDict(frozen=True)

    type: Literal["lognormal"] = "lognormal"
    sigma2: PositiveFloat

    @property
    def sigma(self) -> float:
        return math.sqrt(self.sigma2)

    @property
    def is_degenerate(self) -> bool:
        return False

    def nodes(self, order: Optional[int] = None) -> tuple[np.ndarray, np.ndarray]:
        """Gauss–Hermite nodes in log ρ and their probability weights."""
        points, weights = hermgauss(order or DEFAULT_GH_ORDER)
        z = math.sqrt(2.0) * points
        rhos = np.exp(-0.5 * self.sigma2 - self.sigma * z)
        return rhos, weights / math.sqrt(math.pi)

    def moment(self, a):
        a = np.asarray(a, dtype=float)
        return np.exp(0.5 * self.sigma2 * a * (a - 1.0))

    def sample(self, rng: np.random.Generator, size=None):
        return np.exp(-0.5 * self.sigma2 - self.sigma * rng.standard_normal(size))


KernelLaw = Annotated[Union[FiniteDiscreteLaw, LogNormalLaw], Field(discriminator="type")]

DEGENERATE = FiniteDiscreteLaw(atoms=[KernelAtom(rho=1.0, prob=1.0)])


# ------------------------------------------------------------------------- operations


def risk_neutral_probability(step: BinomialStep) -> float:
    return step.q


def kernel_from_binomial(params: BinomialPeriodParams, step_cap: int = DEFAULT_STEP_CAP) -> FiniteDiscreteLaw:
    """Enumerate the 2^N sub-step outcomes of a period and merge equal kernel values."""
    n_steps = len(params.steps)
    if n_steps > step_cap:
        raise CapacityError(f"{n_steps} binomial sub-steps exceed the cap of {step_cap}")

    rhos = np.ones(1)
    probs = np.ones(1)
    for step in params.steps:
        rhos = np.concatenate([rhos * step.rho_up, rhos * step.rho_down])
        probs = np.concatenate([probs * step.p, probs * (1.0 - step.p)])

    order = np.argsort(rhos, kind="stable")
    rhos, probs = rhos[order], probs[order]
    starts = np.flatnonzero(np.concatenate([[True], np.diff(rhos) > MERGE_TOLERANCE * rhos[1:]]))
    merged_rhos = rhos[starts]
    merged_probs = np.add.reduceat(probs, starts)

    Logger.debug("Binomial kernel enumerated", {"steps": n_steps, "outcomes": 2**n_steps, "atoms": len(starts)})

    return FiniteDiscreteLaw(
        atoms=[KernelAtom(rho=float(rho), prob=float(prob)) for rho, prob in zip(merged_rhos, merged_probs)]
    )


def kernel_from_bs(params: BsPeriodParams) -> Union[FiniteDiscreteLaw, LogNormalLaw]:
    sigma2 = params.sigma2
    if sigma2 == 0.0:
        return DEGENERATE
    return LogNormalLaw(sigma2=sigma2)


def kernel_for(params: Union[BinomialPeriodParams, BsPeriodParams], step_cap: int = DEFAULT_STEP_CAP):
    if isinstance(params, BinomialPeriodParams):
        return kernel_from_binomial(params, step_cap=step_cap)
    return kernel_from_bs(params)


def moment(law: Union[FiniteDiscreteLaw, LogNormalLaw], a):
    """∫ρ^a dν, scalar in scalar out."""
    value = law.moment(a)
    return float(value) if np.ndim(value) == 0 else value


def cmim_integrability_check(law: Union[FiniteDiscreteLaw, LogNormalLaw], gamma_min: float, gamma_max: float) -> bool:
    if not 0.0 < gamma_min <= gamma_max:
        raise ValueError(f"need 0 < gamma_min <= gamma_max, got ({gamma_min}, {gamma_max})")

    exponents = [-1.0 / gamma_min, 1.0 - 1.0 / gamma_min, 1.0 - 1.0 / gamma_max]
    with np.errstate(over="ignore"):
        values = law.moment(exponents)
    return bool(np.all(np.isfinite(values)))


def sample(law: Union[FiniteDiscreteLaw, LogNormalLaw], rng: np.random.Generator, size=None):
    draw = law.sample(rng, size)
    return float(draw) if size is None else draw


def expect(
    law: Union[FiniteDiscreteLaw, LogNormalLaw],
    integrand: Callable[[np.ndarray], np.ndarray],
    order: Optional[int] = None,
) -> np.ndarray:
    """E[f(ρ)]: exact sum for discrete laws, Gauss–Hermite for the lognormal law.

    ``integrand`` maps the node array (last axis) to values of the same trailing shape,
    so callers can evaluate a whole y grid at once via broadcasting.
    """
    rhos, weights = law.nodes(order)
    return np.asarray(integrand(rhos)) @ weights


def expect_gated(
    law: Union[FiniteDiscreteLaw, LogNormalLaw],
    integrand: Callable[[np.ndarray], np.ndarray],
    tolerance: float,
    order: int = DEFAULT_GH_ORDER,
) -> np.ndarray:
    """``expect`` with the order-doubling convergence gate for lognormal laws."""
    value = expect(law, integrand, order)
    if isinstance(law, FiniteDiscreteLaw):
        return value

    refined = expect(law, integrand, 2 * order)
    scale = np.maximum(np.abs(refined), 1.0)
    drift = float(np.max(np.abs(refined - value) / scale))
    if not np.isfinite(drift) or drift > tolerance:
        raise QuadratureError(f"Gauss-Hermite order {order} moved by {drift:.3e} on doubling (gate {tolerance:.1e})")
    return value
