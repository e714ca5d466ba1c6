"""Fourier deconvolution route for the single-period integral equation.

In log coordinates J(t) = I(e^t) the equation E[ρ·I₁(yρ)] = I₀(y) becomes a
convolution. J₀ is split into two pieces, J₀ₖ(t) = J₀(t)·e^(t/γₖ) restricted to
one side, each piece is divided by the transform of its tilted kernel μₖ on an
FFT grid, and the pieces are reassembled into J₁ = Σ e^(−t/γₖ)·J₁ₖ.
"""

import math
import warnings
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, PositiveInt, model_validator
from scipy.special import erf, log_ndtr

from engine.cmim_solver import integral_equation_report
from engine.errors import (
    ConfigurationError,
    DomainError,
    DomainMismatchError,
    IllPosednessWarning,
    NumericalRangeError,
    SolutionRejectedError,
    SolverError,
)
from engine.grid import GridFunction, GridInverseMarginal, grid_points
from engine.kernels import FiniteDiscreteLaw, LogNormalLaw
from engine.measures import LOG_EXP_LIMIT, InverseMarginal
from utils import Logger

EDGE_GROWTH_FACTOR = 1e6
MONOTONICITY_TOLERANCE = 1e-6
LOCALIZATION_SIGMAS = 12.0
CENTRAL_BAND_FRACTION = 0.9
DECONV_QUADRATURE_GATE = 1e-6


class DeconvConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    half_width: PositiveFloat = Field(default=30.0, description="L: the grid covers t in [-L, L)")
    n_points: PositiveInt = Field(default=2**14, description="Grid size, a power of two")
    gamma1: PositiveFloat = Field(..., description="Lower ambient risk aversion, governs the y -> 0 tail")
    gamma2: PositiveFloat = Field(..., description="Upper ambient risk aversion, governs the y -> inf tail")
    fourier_floor: PositiveFloat = Field(default=1e-8, description="Bins with |F[mu]| below this are zeroed")
    taper_fraction: float = Field(default=0.15, gt=0.0, lt=0.5, description="Share of L covered by the edge taper")
    split_width: float = Field(default=1.0, ge=0.0, description="Width of the smooth split at t = 0; 0 is sharp")

    @model_validator(mode="after")
    def consistent(self) -> "DeconvConfig":
        if self.gamma1 > self.gamma2:
            raise ValueError(f"gamma1 {self.gamma1} exceeds gamma2 {self.gamma2}")
        if self.n_points < 2 or self.n_points & (self.n_points - 1):
            raise ValueError(f"n_points must be a power of two, got {self.n_points}")
        return self

    @property
    def step(self) -> float:
        return 2.0 * self.half_width / self.n_points

    @property
    def taper_width(self) -> float:
        return self.taper_fraction * self.half_width

    @property
    def t(self) -> np.ndarray:
        return grid_points(self.half_width, self.n_points)

    @property
    def frequencies(self) -> np.ndarray:
        return 2.0 * np.pi * np.fft.fftfreq(self.n_points, self.step)


class TiltedKernel(BaseModel):
    """μₖ(dt) = ρ^(1 − 1/γₖ)·ν(dρ) pushed to t = −log ρ.

    Discrete kernels keep their shifted atoms; the lognormal kernel tilts to a
    scaled Gaussian with mean σ²(1/γₖ − 1/2), variance σ² and the given mass.
    """

    model_config = ConfigDict(frozen=True)

    gamma_k: PositiveFloat
    form: Literal["atoms", "gaussian"]
    shifts: list[float] = Field(default_factory=list)
    masses: list[PositiveFloat] = Field(default_factory=list)
    mean: float = 0.0
    variance: float = 0.0
    mass: float = 0.0

    @model_validator(mode="after")
    def well_formed(self) -> "TiltedKernel":
        if self.form == "atoms" and (not self.shifts or len(self.shifts) != len(self.masses)):
            raise ValueError("atom kernels need one positive mass per shift")
        if self.form == "gaussian" and not (self.variance > 0 and self.mass > 0):
            raise ValueError("gaussian kernels need positive variance and mass")
        return self

    @classmethod
    def from_law(cls, law, gamma_k: float) -> "TiltedKernel":
        a = 1.0 / gamma_k
        if isinstance(law, FiniteDiscreteLaw):
            shifts = -np.log(law.rhos)
            masses = law.probs * law.rhos ** (1.0 - a)
            return cls(gamma_k=gamma_k, form="atoms", shifts=shifts.tolist(), masses=masses.tolist())
        if isinstance(law, LogNormalLaw):
            return cls(
                gamma_k=gamma_k,
                form="gaussian",
                mean=law.sigma2 * (a - 0.5),
                variance=law.sigma2,
                mass=math.exp(0.5 * law.sigma2 * a * (a - 1.0)),
            )
        raise ConfigurationError(f"no tilted kernel for law type {type(law).__name__}")

    @classmethod
    def from_shifted_atoms(cls, shifts, masses, gamma_k: float) -> "TiltedKernel":
        """Raw atoms in t, for kernels that are not the tilt of a probability law."""
        return cls(gamma_k=gamma_k, form="atoms", shifts=list(shifts), masses=list(masses))

    @property
    def reach(self) -> float:
        if self.form == "atoms":
            return max(abs(shift) for shift in self.shifts)
        return abs(self.mean) + LOCALIZATION_SIGMAS * math.sqrt(self.variance)

    def transform(self, xi: np.ndarray) -> np.ndarray:
        """F[μ](ξ) = ∫ e^(−iξt) μ(dt)."""
        xi = np.asarray(xi, dtype=float)
        if self.form == "atoms":
            return np.exp(-1j * np.multiply.outer(xi, np.asarray(self.shifts))) @ np.asarray(self.masses)
        return self.mass * np.exp(-1j * xi * self.mean - 0.5 * self.variance * xi**2)

    def check_localized(self, cfg: DeconvConfig) -> None:
        if self.form == "atoms":
            outside = [shift for shift in self.shifts if abs(shift) > cfg.half_width]
            if outside:
                raise ConfigurationError(
                    f"kernel atoms at t={outside[:3]} lie outside [-{cfg.half_width}, {cfg.half_width}]"
                )
        elif self.reach > cfg.half_width:
            raise ConfigurationError(
                f"gaussian kernel needs L >= {self.reach:.3f} to hold its mass to 1e-12, got L={cfg.half_width}"
            )


class SpectralDivision(BaseModel):
    model_config = ConfigDict(frozen=True)

    solution: GridFunction
    gamma_k: float
    zeroed_bins: int
    band_limit: float = Field(..., description="Largest |xi| with |F[mu]| at or above the floor")
    ill_posed_frequencies: list[float] = Field(default_factory=list)


class DeconvSolution(BaseModel):
    model_config = ConfigDict(frozen=True)

    config: DeconvConfig
    marginal: GridInverseMarginal
    j0: GridFunction
    divisions: list[SpectralDivision]
    kernels: list[TiltedKernel]

    @property
    def ill_posed(self) -> bool:
        return any(division.ill_posed_frequencies for division in self.divisions)


# --------------------------------------------------------------------------- helpers


def edge_taper(t: np.ndarray, cfg: DeconvConfig) -> np.ndarray:
    """Erf-shaped window, within 1e−12 of 1 on |t| ≤ L − taper width and of 0 at ±L."""
    s = cfg.taper_width / 10.0
    c = 5.0 * s
    lo = (t + cfg.half_width - c) / s
    hi = (t - cfg.half_width + c) / s
    return 0.5 * (erf(lo) - erf(hi))


def _log_partition(t: np.ndarray, cfg: DeconvConfig) -> tuple[np.ndarray, np.ndarray]:
    """log χ and log(1 − χ) for χ = ½·erfc(t/w); the sharp indicator when w = 0."""
    if cfg.split_width == 0:
        with np.errstate(divide="ignore"):
            return np.log((t < 0).astype(float)), np.log((t >= 0).astype(float))
    scaled = math.sqrt(2.0) * t / cfg.split_width
    return log_ndtr(-scaled), log_ndtr(scaled)


def _grid_matches(grid: GridFunction, cfg: DeconvConfig) -> None:
    if grid.n_points != cfg.n_points or grid.half_width != cfg.half_width:
        raise ConfigurationError(
            f"grid ({grid.half_width}, {grid.n_points}) does not match config ({cfg.half_width}, {cfg.n_points})"
        )


# ------------------------------------------------------------------------- operations


def to_log_coordinates(i0: InverseMarginal, cfg: DeconvConfig) -> GridFunction:
    """J₀(t) = I₀(e^t) on the configured grid."""
    return GridFunction.sample(lambda t: np.asarray(i0(np.exp(t))), cfg.half_width, cfg.n_points)


def split(j0: GridFunction, cfg: DeconvConfig) -> tuple[GridFunction, GridFunction]:
    _grid_matches(j0, cfg)
    t = j0.t
    values = j0.samples
    if np.any(values <= 0):
        raise DomainError("J0 must be positive on the grid")

    log_left, log_right = _log_partition(t, cfg)
    taper = edge_taper(t, cfg)
    outer = np.abs(t) > cfg.half_width - cfg.taper_width
    central = np.abs(t) < 0.5 * cfg.half_width

    pieces = []
    for index, (gamma, log_weight) in enumerate(((cfg.gamma1, log_left), (cfg.gamma2, log_right)), start=1):
        log_piece = np.log(values) + t / gamma + log_weight
        if np.any(log_piece > LOG_EXP_LIMIT):
            raise DomainMismatchError(f"J0{index} overflows on the grid; J0 grows faster than y^(-1/{gamma:g})")
        piece = np.exp(log_piece)

        own_half = central & (log_weight >= math.log(0.5))
        reference = float(np.median(piece[own_half])) if np.any(own_half) else 0.0
        edge = float(np.max(piece[outer]))
        if edge > EDGE_GROWTH_FACTOR * max(reference, np.finfo(float).tiny):
            raise DomainMismatchError(
                f"J0{index} reaches {edge:.3e} at the grid edge against a central median of {reference:.3e}"
            )
        pieces.append(j0.with_samples(piece * taper))

    Logger.debug("Split J0", {"gamma1": cfg.gamma1, "gamma2": cfg.gamma2, "split_width": cfg.split_width})
    return pieces[0], pieces[1]


def spectral_division(j0k: GridFunction, mu_k: TiltedKernel, cfg: DeconvConfig) -> SpectralDivision:
    _grid_matches(j0k, cfg)
    mu_k.check_localized(cfg)

    xi = cfg.frequencies
    spectrum = mu_k.transform(xi)
    resolved = np.abs(spectrum) >= cfg.fourier_floor
    if not np.any(resolved):
        raise SolverError(f"|F[mu]| is below the floor at every frequency for gamma_k={mu_k.gamma_k:g}")

    quotient = np.zeros_like(spectrum)
    quotient[resolved] = np.fft.fft(j0k.samples)[resolved] / spectrum[resolved]
    solution = np.fft.ifft(quotient).real

    band_limit = float(np.max(np.abs(xi[resolved])))
    offending = np.sort(xi[~resolved & (np.abs(xi) <= CENTRAL_BAND_FRACTION * band_limit)])
    if offending.size:
        Logger.warning(
            "Spectral zeros inside the resolved band",
            {"gamma_k": mu_k.gamma_k, "count": int(offending.size), "first": offending[:6].tolist()},
        )
        warnings.warn(IllPosednessWarning(offending, mu_k.gamma_k), stacklevel=2)

    return SpectralDivision(
        solution=j0k.with_samples(solution),
        gamma_k=mu_k.gamma_k,
        zeroed_bins=int(np.count_nonzero(~resolved)),
        band_limit=band_limit,
        ill_posed_frequencies=offending.tolist(),
    )


def fourier_divide(j0k: GridFunction, mu_k: TiltedKernel, cfg: DeconvConfig) -> GridFunction:
    """J₁ₖ = F⁻¹[F[J₀ₖ] / F[μₖ]] with sub-floor bins zeroed."""
    return spectral_division(j0k, mu_k, cfg).solution


def spectrum_rows(mu_k: TiltedKernel, cfg: DeconvConfig) -> list[tuple[float, float, float, float]]:
    xi = np.fft.fftshift(cfg.frequencies)
    spectrum = mu_k.transform(xi)
    return list(zip(xi.tolist(), spectrum.real.tolist(), spectrum.imag.tolist(), np.abs(spectrum).tolist()))


def assemble(j11: GridFunction, j12: GridFunction, cfg: DeconvConfig, reach: float = 0.0) -> GridInverseMarginal:
    """J₁ = e^(−t/γ₁)·J₁₁ + e^(−t/γ₂)·J₁₂, trusted on |t| ≤ L − taper width − reach."""
    _grid_matches(j11, cfg)
    _grid_matches(j12, cfg)
    t = j11.t
    bound = cfg.half_width - cfg.taper_width - reach
    if bound <= 0:
        raise ConfigurationError(f"no trusted interior: L={cfg.half_width} is too small for kernel reach {reach:.3f}")

    interior = np.abs(t) <= bound
    with np.errstate(over="ignore"):
        values = np.exp(-t / cfg.gamma1) * j11.samples + np.exp(-t / cfg.gamma2) * j12.samples
    inner = values[interior]

    if np.any(~np.isfinite(inner)) or np.any(inner <= 0):
        raise SolutionRejectedError("assembled J1 is not positive on the trusted interior")
    rising = np.flatnonzero(inner[1:] > inner[:-1] * (1.0 + MONOTONICITY_TOLERANCE))
    if rising.size:
        where = float(t[interior][rising[0]])
        raise SolutionRejectedError(f"assembled J1 increases at t={where:.4f} ({rising.size} rising steps)")

    # outside the interior the stored samples follow the power tails
    t_lo, t_hi = float(t[interior][0]), float(t[interior][-1])
    log_lo, log_hi = math.log(inner[0]), math.log(inner[-1])
    log_tails = np.where(t < t_lo, log_lo - (t - t_lo) / cfg.gamma1, log_hi - (t - t_hi) / cfg.gamma2)
    if np.any(log_tails[~interior] > LOG_EXP_LIMIT):
        raise NumericalRangeError("power tail of J1 overflows on the grid")
    samples = np.where(interior, values, np.exp(np.minimum(log_tails, LOG_EXP_LIMIT)))

    return GridInverseMarginal(
        grid=j11.with_samples(samples), gamma1=cfg.gamma1, gamma2=cfg.gamma2, t_lo=t_lo, t_hi=t_hi
    )


def convolution_residual(
    i1: InverseMarginal,
    law,
    i0: InverseMarginal,
    y_grid: Optional[np.ndarray] = None,
    gate: float = DECONV_QUADRATURE_GATE,
) -> float:
    """max_y |E[ρ·I₁(yρ)] − I₀(y)| / I₀(y), checked directly by quadrature."""
    return integral_equation_report(i1, law, i0, y_grid, gate=gate).max_rel_err


def solve(i0: InverseMarginal, law, cfg: DeconvConfig) -> DeconvSolution:
    """Full pipeline: sample, split, divide each piece, assemble."""
    kernels = [TiltedKernel.from_law(law, cfg.gamma1), TiltedKernel.from_law(law, cfg.gamma2)]
    for kernel in kernels:
        kernel.check_localized(cfg)

    j0 = to_log_coordinates(i0, cfg)
    pieces = split(j0, cfg)
    divisions = [spectral_division(piece, kernel, cfg) for piece, kernel in zip(pieces, kernels)]
    marginal = assemble(
        divisions[0].solution, divisions[1].solution, cfg, reach=max(kernel.reach for kernel in kernels)
    )

    Logger.info(
        "Deconvolution solved",
        {
            "n_points": cfg.n_points,
            "half_width": cfg.half_width,
            "zeroed_bins": [division.zeroed_bins for division in divisions],
            "interior": [marginal.t_lo, marginal.t_hi],
        },
    )
    return DeconvSolution(config=cfg, marginal=marginal, j0=j0, divisions=divisions, kernels=kernels)
