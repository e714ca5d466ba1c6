"""Closed-form single-period solve for CMIM data and the residual checks shared by both routes.

For I₀ = ∫ y^(−1/γ) dm₀ the unique CMIM solution of E[ρ·I₁(yρ)] = I₀(y) has
dm₁/dm₀(γ) = moment(ν, 1 − 1/γ)⁻¹, so a period solve is a reweighting of m₀.
"""

from typing import Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.special import logsumexp

from engine.errors import PreconditionError, QuadratureError, SolverError
from engine.kernels import DEFAULT_GH_ORDER, FiniteDiscreteLaw, KernelLaw, cmim_integrability_check
from engine.measures import LOG_EXP_LIMIT, InverseMarginal, RiskAversionMeasure, as_positive_array, cmim
from utils import Logger

QUADRATURE_GATE = 1e-10


def default_y_grid(n_points: int = 200, lo: float = 1e-2, hi: float = 1e2) -> np.ndarray:
    return np.geomspace(lo, hi, n_points)


class ResidualRow(BaseModel):
    model_config = ConfigDict(frozen=True)

    y: float
    lhs: float
    rhs: float
    rel_err: float


class ResidualReport(BaseModel):
    """Pointwise check of E[ρ·I₁(yρ)] = I₀(y) on a y grid."""

    model_config = ConfigDict(frozen=True)

    rows: list[ResidualRow] = Field(default_factory=list)
    quadrature_order: Optional[int] = Field(default=None, description="Gauss–Hermite order, None for exact sums")

    @property
    def max_rel_err(self) -> float:
        return max((row.rel_err for row in self.rows), default=0.0)

    def csv_rows(self) -> list[tuple[float, float, float, float]]:
        return [(row.y, row.lhs, row.rhs, row.rel_err) for row in self.rows]


class PeriodSolve(BaseModel):
    model_config = ConfigDict(frozen=True)

    input_measure: RiskAversionMeasure
    kernel: KernelLaw
    output_measure: RiskAversionMeasure
    residual_report: ResidualReport


MarginalLike = Union[RiskAversionMeasure, InverseMarginal]


def _as_marginal(value: MarginalLike) -> InverseMarginal:
    return cmim(value) if isinstance(value, RiskAversionMeasure) else value


def log_expectation(law, log_integrand, order: int = DEFAULT_GH_ORDER) -> np.ndarray:
    """log E[exp(g(ρ))] from log-space integrand values; nodes on the last axis."""
    rhos, weights = law.nodes(order)
    return logsumexp(log_integrand(rhos) + np.log(weights), axis=-1)


def _gated_log_expectation(law, log_integrand, gate: float, order: int) -> tuple[np.ndarray, Optional[int]]:
    value = log_expectation(law, log_integrand, order)
    if isinstance(law, FiniteDiscreteLaw):
        return value, None

    refined = log_expectation(law, log_integrand, 2 * order)
    drift = float(np.max(np.abs(np.expm1(refined - value))))
    if not np.isfinite(drift) or drift > gate:
        raise QuadratureError(f"Gauss-Hermite order {order} moved the expectation by {drift:.3e} (gate {gate:.1e})")
    return value, order


def integral_equation_report(
    i1: MarginalLike,
    law,
    i0: MarginalLike,
    y_grid: Optional[np.ndarray] = None,
    gate: float = QUADRATURE_GATE,
    order: int = DEFAULT_GH_ORDER,
) -> ResidualReport:
    """Evaluate both sides of E[ρ·I₁(yρ)] = I₀(y) on ``y_grid``."""
    i1, i0 = _as_marginal(i1), _as_marginal(i0)
    y = as_positive_array(default_y_grid() if y_grid is None else y_grid).reshape(-1)

    def log_integrand(rhos: np.ndarray) -> np.ndarray:
        points = as_positive_array(y[:, None] * rhos)
        return np.log(rhos) + i1.log_value(points)

    log_lhs, used_order = _gated_log_expectation(law, log_integrand, gate, order)
    log_rhs = i0.log_value(y)
    if np.any(log_lhs > LOG_EXP_LIMIT) or np.any(log_rhs > LOG_EXP_LIMIT):
        raise SolverError("integral equation sides overflow on the y grid")

    lhs, rhs = np.exp(log_lhs), np.exp(log_rhs)
    rel_err = np.abs(np.expm1(log_lhs - log_rhs))
    rows = [
        ResidualRow(y=float(a), lhs=float(b), rhs=float(c), rel_err=float(d))
        for a, b, c, d in zip(y, lhs, rhs, rel_err)
    ]
    return ResidualReport(rows=rows, quadrature_order=used_order)


# ------------------------------------------------------------------------- operations


def solve_period(m_prev: RiskAversionMeasure, law) -> RiskAversionMeasure:
    if not cmim_integrability_check(law, m_prev.gamma_min, m_prev.gamma_max):
        raise PreconditionError(
            f"kernel moments not finite on ({m_prev.gamma_min}, {m_prev.gamma_max}); CMIM route unavailable"
        )

    output = m_prev.reweighted(law, power=-1)
    Logger.debug(
        "CMIM period solved",
        {"atoms": [atom.weight for atom in output.atoms], "cells": len(output.cells), "tilts": len(output.tilts)},
    )
    return output


def solve_period_report(
    m_prev: RiskAversionMeasure,
    law,
    y_grid: Optional[np.ndarray] = None,
    gate: float = QUADRATURE_GATE,
) -> PeriodSolve:
    """``solve_period`` plus the residual report of the solution it returns."""
    output = solve_period(m_prev, law)
    report = integral_equation_report(output, law, m_prev, y_grid, gate=gate)
    return PeriodSolve(input_measure=m_prev, kernel=law, output_measure=output, residual_report=report)


def residual(m1: MarginalLike, m0: MarginalLike, law, y_grid: Optional[np.ndarray] = None) -> float:
    """max_y |E[ρ·I₁(yρ)] − I₀(y)| / I₀(y)."""
    return integral_equation_report(m1, law, m0, y_grid).max_rel_err


def finiteness_check(m1: MarginalLike, law, y_grid: Optional[np.ndarray] = None) -> bool:
    """True when E[I₁(yρ)] is finite in double precision for every y on the grid."""
    marginal = _as_marginal(m1)
    y = as_positive_array(default_y_grid() if y_grid is None else y_grid).reshape(-1)

    try:
        values = log_expectation(law, lambda rhos: marginal.log_value(as_positive_array(y[:, None] * rhos)))
    except SolverError as error:
        Logger.info("Finiteness check failed during evaluation", {"error": str(error)})
        return False

    finite = bool(np.all(np.isfinite(values)) and np.all(values < LOG_EXP_LIMIT))
    if not finite:
        Logger.info("E[I1(y rho)] is not finite on the y grid", {"max_log_value": float(np.nanmax(values))})
    return finite
