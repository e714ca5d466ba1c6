"""Uniform log-coordinate grids and the grid-backed inverse marginal.

A GridFunction samples J(t) at t_j = −L + j·2L/n, j = 0..n−1 (n a power of two,
periodic layout for the FFT). A GridInverseMarginal reads I(y) = J(log y) off a
grid: monotone cubic interpolation on the trusted interior, power tails outside.
"""

from functools import cached_property
from typing import Annotated, Callable, Literal, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, model_validator
from scipy.integrate import cumulative_simpson
from scipy.interpolate import CubicHermiteSpline, PchipInterpolator
from scipy.special import exprel

from engine.measures import CmimInverseMarginal, InverseMarginal


class GridFunction(BaseModel):
    model_config = ConfigDict(frozen=True)

    half_width: PositiveFloat = Field(..., description="L, in log-coordinate units")
    values: list[float] = Field(..., description="Samples at t_j = -L + j*2L/n")

    @model_validator(mode="after")
    def power_of_two(self) -> "GridFunction":
        n = len(self.values)
        if n < 2 or n & (n - 1):
            raise ValueError(f"n_points must be a power of two, got {n}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("grid values must be finite")
        return self

    @classmethod
    def from_array(cls, half_width: float, samples: np.ndarray) -> "GridFunction":
        return cls(half_width=half_width, values=np.asarray(samples, dtype=float).tolist())

    @classmethod
    def sample(cls, fn: Callable[[np.ndarray], np.ndarray], half_width: float, n_points: int) -> "GridFunction":
        return cls.from_array(half_width, fn(grid_points(half_width, n_points)))

    @property
    def n_points(self) -> int:
        return len(self.values)

    @property
    def step(self) -> float:
        return 2.0 * self.half_width / self.n_points

    @cached_property
    def t(self) -> np.ndarray:
        return grid_points(self.half_width, self.n_points)

    @cached_property
    def samples(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float)

    def with_samples(self, samples: np.ndarray) -> "GridFunction":
        return GridFunction.from_array(self.half_width, samples)

    def rows(self) -> list[tuple[float, float]]:
        return list(zip(self.t.tolist(), self.values))


def grid_points(half_width: float, n_points: int) -> np.ndarray:
    return -half_width + np.arange(n_points) * (2.0 * half_width / n_points)


def _tail_integral(log_edge: float, exponent: float, t0: float, t: np.ndarray) -> np.ndarray:
    """∫_{t0}^{t} e^u·J(u) du for the power tail J(u) = e^log_edge·e^(−(u − t0)/γ), exponent = 1 − 1/γ."""
    return np.exp(log_edge + t0) * (t - t0) * exprel(exponent * (t - t0))


class GridInverseMarginal(InverseMarginal):
    """I(y) = J(log y) from samples, trusted on [t_lo, t_hi]."""

    kind: Literal["grid"] = "grid"
    grid: GridFunction
    gamma1: PositiveFloat
    gamma2: PositiveFloat
    t_lo: float
    t_hi: float

    @model_validator(mode="after")
    def interior_valid(self) -> "GridInverseMarginal":
        if self.gamma1 > self.gamma2:
            raise ValueError("gamma1 must not exceed gamma2")
        if not -self.grid.half_width <= self.t_lo < self.t_hi <= self.grid.half_width:
            raise ValueError(f"interior [{self.t_lo}, {self.t_hi}] must lie inside the grid")
        if self.interior_mask.sum() < 4:
            raise ValueError("interior holds fewer than four grid points")
        if np.any(self.interior_values <= 0):
            raise ValueError("grid-backed inverse marginal must be positive on its interior")
        return self

    @classmethod
    def from_function(
        cls,
        fn: Callable[[np.ndarray], np.ndarray],
        half_width: float,
        n_points: int,
        gamma1: float,
        gamma2: float,
    ) -> "GridInverseMarginal":
        """Tabulate an evaluable I on the whole grid, i.e. J(t) = I(e^t)."""
        grid = GridFunction.sample(lambda t: fn(np.exp(t)), half_width, n_points)
        return cls(grid=grid, gamma1=gamma1, gamma2=gamma2, t_lo=float(grid.t[0]), t_hi=float(grid.t[-1]))

    @cached_property
    def interior_mask(self) -> np.ndarray:
        t = self.grid.t
        return (t >= self.t_lo) & (t <= self.t_hi)

    @cached_property
    def interior_t(self) -> np.ndarray:
        return self.grid.t[self.interior_mask]

    @cached_property
    def interior_values(self) -> np.ndarray:
        return self.grid.samples[self.interior_mask]

    @cached_property
    def interpolant(self) -> PchipInterpolator:
        return PchipInterpolator(self.interior_t, self.interior_values, extrapolate=False)

    @cached_property
    def edges(self) -> tuple[float, float, float, float]:
        t = self.interior_t
        values = self.interior_values
        return float(t[0]), float(np.log(values[0])), float(t[-1]), float(np.log(values[-1]))

    @cached_property
    def tilted_antiderivative(self) -> CubicHermiteSpline:
        # G(t) = ∫ e^u J(u) du along the interior, Simpson accurate, Hermite interpolated
        t = self.interior_t
        integrand = np.exp(t) * self.interior_values
        cumulative = cumulative_simpson(integrand, x=t, initial=0.0)
        return CubicHermiteSpline(t, cumulative, integrand)

    @property
    def gamma_bounds(self) -> tuple[float, float]:
        return self.gamma1, self.gamma2

    def log_value(self, y: np.ndarray) -> np.ndarray:
        t = np.log(y)
        t_first, log_first, t_last, log_last = self.edges
        inside = (t >= t_first) & (t <= t_last)
        result = np.where(t < t_first, log_first - (t - t_first) / self.gamma1, log_last - (t - t_last) / self.gamma2)
        if np.any(inside):
            values = self.interpolant(np.where(inside, t, t_first))
            result = np.where(inside, np.log(np.maximum(values, 1e-300)), result)
        return result

    def log_slope(self, y: np.ndarray) -> np.ndarray:
        t = np.log(y)
        t_first, _, t_last, _ = self.edges
        inside = (t >= t_first) & (t <= t_last)
        result = np.where(t < t_first, -1.0 / self.gamma1, -1.0 / self.gamma2)
        if np.any(inside):
            clipped = np.where(inside, t, t_first)
            slope = self.interpolant.derivative()(clipped) / self.interpolant(clipped)
            result = np.where(inside, slope, result)
        return result

    def _antiderivative(self, t: np.ndarray) -> np.ndarray:
        t_first, log_first, t_last, log_last = self.edges
        spline = self.tilted_antiderivative
        inside = np.clip(t, t_first, t_last)
        value = spline(inside)
        left = _tail_integral(log_first, 1.0 - 1.0 / self.gamma1, t_first, t)
        right = _tail_integral(log_last, 1.0 - 1.0 / self.gamma2, t_last, t)
        value = np.where(t < t_first, spline(t_first) + left, value)
        return np.where(t > t_last, spline(t_last) + right, value)

    def primitive(self, y: np.ndarray) -> np.ndarray:
        # Φ(e^t) = e^t J(t) − J(0) − ∫_0^t e^u J(u) du
        t = np.log(y)
        at_one = float(np.exp(self.log_value(np.ones(1)))[0])
        return y * np.exp(self.log_value(y)) - at_one - (self._antiderivative(t) - self._antiderivative(np.zeros(1))[0])


AnyInverseMarginal = Annotated[Union[CmimInverseMarginal, GridInverseMarginal], Field(discriminator="kind")]
