"""Forward construction of predictable forward performance processes.

A PfppState holds, for periods 0..n, the inverse marginals I_k, the anchors
c_k and the realized parameter blocks. Utilities are never stored: with
Φ_k(y) = ∫₁^y s·I_k′(s) ds they are U_k(x) = c_k + Φ_k(I_k⁻¹(x)), where

    c_0 = anchor,    c_k = c_{k−1} − E[Φ_k(ρ_k)],

so that a_k = U_k(I_k(1)) = c_k and E[U_k(I_k(yρ))] = U_{k−1}(I_{k−1}(y)).
"""

from typing import Literal, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, TypeAdapter, model_validator

from engine import cmim_solver, deconv
from engine.errors import ConstructionFailedError, DomainError, UnsupportedRouteError
from engine.grid import AnyInverseMarginal
from engine.kernels import (
    DEFAULT_STEP_CAP,
    KernelLaw,
    PeriodParams,
    cmim_integrability_check,
    expect,
    expect_gated,
    kernel_for,
)
from engine.measures import CmimInverseMarginal, InverseMarginal, as_positive_array, cmim, invert
from utils import Logger

Route = Literal["cmim", "deconv"]
RouteChoice = Literal["cmim", "deconv", "auto"]

SUPERMARTINGALE_INVERSION_TOLERANCE = 1e-13
GAP_EPSILONS = (0.02, 0.04, 0.08)

PERIOD_PARAMS: TypeAdapter = TypeAdapter(PeriodParams)


def default_x_grid(n_points: int = 100, lo: float = 1e-2, hi: float = 1e2) -> np.ndarray:
    return np.geomspace(lo, hi, n_points)


class Tolerances(BaseModel):
    cmim_residual: PositiveFloat = Field(default=1e-9, description="Integral-equation residual gate, CMIM route")
    deconv_residual: PositiveFloat = Field(default=1e-3, description="Integral-equation residual gate, deconv route")
    martingale_cmim: PositiveFloat = Field(default=1e-7)
    martingale_deconv: PositiveFloat = Field(default=1e-4)
    budget_cmim: PositiveFloat = Field(default=1e-9)
    budget_deconv: PositiveFloat = Field(default=1e-4)
    supermartingale_slack: PositiveFloat = Field(default=1e-10)
    quadrature_gate: PositiveFloat = Field(default=1e-10, description="Gauss-Hermite order-doubling gate")
    replication: PositiveFloat = Field(default=1e-10)
    inversion: PositiveFloat = Field(default=1e-10)

    def residual_for(self, route: Route) -> float:
        return self.cmim_residual if route == "cmim" else self.deconv_residual

    def martingale_for(self, route: Route) -> float:
        return self.martingale_cmim if route == "cmim" else self.martingale_deconv

    def budget_for(self, route: Route) -> float:
        return self.budget_cmim if route == "cmim" else self.budget_deconv

    def replication_for(self, route: Route) -> float:
        """Root-value gate of a replication tree.

        On the CMIM route the tree prices the payoff exactly, so the root misses the budget only by the
        inversion error of I_{k-1}⁻¹(x). Deconv payoffs carry the route's budget error.
        """
        return self.replication + self.inversion if route == "cmim" else self.budget_deconv


class PfppState(BaseModel):
    model_config = ConfigDict(frozen=True)

    period: int = Field(default=0, ge=0)
    thetas: list[PeriodParams] = Field(default_factory=list, description="Realized parameter blocks theta_1..theta_n")
    kernels: list[KernelLaw] = Field(default_factory=list, description="Kernel law of each period")
    marginals: list[AnyInverseMarginal] = Field(..., min_length=1, description="I_0..I_n")
    anchors: list[float] = Field(..., min_length=1, description="a_k = U_k(I_k(1))")
    routes: list[Route] = Field(default_factory=list)
    residuals: list[float] = Field(default_factory=list)

    @model_validator(mode="after")
    def aligned(self) -> "PfppState":
        if not len(self.marginals) == len(self.anchors) == self.period + 1:
            raise ValueError(f"period {self.period} needs {self.period + 1} marginals and anchors")
        if not len(self.thetas) == len(self.kernels) == len(self.routes) == len(self.residuals) == self.period:
            raise ValueError(f"period {self.period} needs {self.period} thetas, kernels, routes and residuals")
        return self

    def marginal(self, k: int) -> InverseMarginal:
        self._check_period(k, lowest=0)
        return self.marginals[k]

    def kernel(self, k: int):
        self._check_period(k, lowest=1)
        return self.kernels[k - 1]

    def route(self, k: int) -> Route:
        self._check_period(k, lowest=1)
        return self.routes[k - 1]

    def _check_period(self, k: int, lowest: int) -> None:
        if not lowest <= k <= self.period:
            raise DomainError(f"period {k} outside [{lowest}, {self.period}]")


class UtilityCurve(BaseModel):
    """U_k tabulated on an x grid; U′ = I_k⁻¹ comes exactly from the backing marginal."""

    model_config = ConfigDict(frozen=True)

    period: int
    anchor: float
    marginal: AnyInverseMarginal
    x: list[float]
    u: list[float]
    u_prime: list[float]

    @model_validator(mode="after")
    def increasing_concave(self) -> "UtilityCurve":
        x, u, u_prime = np.asarray(self.x), np.asarray(self.u), np.asarray(self.u_prime)
        if np.any(np.diff(x) <= 0):
            raise ValueError("x grid must be strictly increasing")
        if np.any(u_prime <= 0) or np.any(np.diff(u_prime) >= 0):
            raise ValueError("U' must be positive and strictly decreasing")
        if np.any(np.diff(u) <= 0):
            raise ValueError("U must be strictly increasing")
        slopes = np.diff(u) / np.diff(x)
        if np.any(np.diff(slopes) > 1e-12 * np.abs(slopes[1:])):
            raise ValueError("U must be concave on the grid")
        return self

    def value(self, x):
        return self.anchor + self.marginal.utility_primitive(self.marginal.inverse(x))

    def csv_rows(self) -> list[tuple[float, float, float]]:
        return list(zip(self.x, self.u, self.u_prime))


# -------------------------------------------------------------------------- building


def init(i0: InverseMarginal, anchor: float = 0.0) -> PfppState:
    Logger.info("PFPP initialised", {"kind": i0.kind, "anchor": anchor})
    return PfppState(marginals=[i0], anchors=[anchor])


def choose_route(marginal: InverseMarginal, law, requested: RouteChoice) -> Route:
    is_cmim = isinstance(marginal, CmimInverseMarginal)
    if requested == "cmim" and not is_cmim:
        raise UnsupportedRouteError("route 'cmim' needs a CMIM-backed inverse marginal")
    if requested != "auto":
        return requested
    if is_cmim and cmim_integrability_check(law, *marginal.gamma_bounds):
        return "cmim"
    return "deconv"


def utility_primitive(marginal: InverseMarginal, y):
    """Φ(y) = ∫₁^y s·I′(s) ds, so that U(x) = c + Φ(I⁻¹(x))."""
    return marginal.utility_primitive(y)


def advance(
    state: PfppState,
    theta: Union[PeriodParams, dict],
    route: RouteChoice = "auto",
    tolerances: Optional[Tolerances] = None,
    deconv_config: Optional[deconv.DeconvConfig] = None,
    y_grid: Optional[np.ndarray] = None,
    step_cap: int = DEFAULT_STEP_CAP,
) -> PfppState:
    """Solve one period forward: I_{n+1} from I_n and the kernel of ``theta``."""
    tolerances = tolerances or Tolerances()
    if isinstance(theta, dict):
        theta = PERIOD_PARAMS.validate_python(theta)
    period = state.period + 1
    law = kernel_for(theta, step_cap=step_cap)
    previous = state.marginals[-1]
    chosen = choose_route(previous, law, route)

    if chosen == "cmim":
        following: InverseMarginal = cmim(cmim_solver.solve_period(previous.measure, law))
        report = cmim_solver.integral_equation_report(
            following, law, previous, y_grid, gate=tolerances.quadrature_gate
        )
    else:
        gamma1, gamma2 = previous.gamma_bounds
        cfg = deconv_config or deconv.DeconvConfig(gamma1=gamma1, gamma2=gamma2)
        following = deconv.solve(previous, law, cfg).marginal
        report = cmim_solver.integral_equation_report(
            following, law, previous, y_grid, gate=deconv.DECONV_QUADRATURE_GATE
        )

    tolerance = tolerances.residual_for(chosen)
    if report.max_rel_err > tolerance:
        Logger.error("Construction residual above tolerance", {"period": period, "residual": report.max_rel_err})
        raise ConstructionFailedError(period, report.max_rel_err, tolerance)

    anchor = state.anchors[-1] - float(expect(law, lambda rhos: following.utility_primitive(rhos)))
    Logger.info(
        "PFPP period constructed",
        {"period": period, "route": chosen, "residual": report.max_rel_err, "anchor": anchor},
    )
    return PfppState(
        period=period,
        thetas=[*state.thetas, theta],
        kernels=[*state.kernels, law],
        marginals=[*state.marginals, following],
        anchors=[*state.anchors, anchor],
        routes=[*state.routes, chosen],
        residuals=[*state.residuals, report.max_rel_err],
    )


def construct(
    i0: InverseMarginal,
    thetas: Sequence[PeriodParams],
    anchor: float = 0.0,
    route: RouteChoice = "auto",
    **options,
) -> PfppState:
    state = init(i0, anchor)
    for theta in thetas:
        state = advance(state, theta, route, **options)
    return state


# ---------------------------------------------------------------------------- wealth


def wealth_step(state: PfppState, x_prev, rho_realized, period: Optional[int] = None):
    """X*_k = I_k(ρ_k · I_{k−1}⁻¹(X*_{k−1}))."""
    k = state.period if period is None else period
    rho = as_positive_array(rho_realized)
    y = invert(state.marginal(k - 1), x_prev)
    wealth = state.marginal(k)(np.asarray(y) * rho)
    return wealth


def utility(state: PfppState, k: int, x):
    marginal = state.marginal(k)
    return state.anchors[k] + marginal.utility_primitive(invert(marginal, x))


def reconstruct_utility(state: PfppState, k: int, x_grid: Optional[np.ndarray] = None) -> UtilityCurve:
    x = as_positive_array(default_x_grid() if x_grid is None else x_grid).reshape(-1)
    marginal = state.marginal(k)
    y = invert(marginal, x)
    u = state.anchors[k] + marginal.utility_primitive(y)
    return UtilityCurve(
        period=k,
        anchor=state.anchors[k],
        marginal=marginal,
        x=x.tolist(),
        u=np.asarray(u).tolist(),
        u_prime=np.asarray(y).tolist(),
    )


def convex_dual(curve: UtilityCurve, y):
    """V(y) = U(I(y)) − y·I(y) = c + Φ(y) − y·I(y)."""
    values = as_positive_array(y)
    result = curve.anchor + curve.marginal.primitive(values) - values * np.exp(curve.marginal.log_value(values))
    return float(result) if np.ndim(y) == 0 else result


# ---------------------------------------------------------------------- verification


def _quadrature_gate(state: PfppState, k: int) -> float:
    return cmim_solver.QUADRATURE_GATE if state.route(k) == "cmim" else deconv.DECONV_QUADRATURE_GATE


def _expect(state: PfppState, k: int, integrand) -> np.ndarray:
    return expect_gated(state.kernel(k), integrand, _quadrature_gate(state, k))


def period_report(
    state: PfppState,
    k: int,
    y_grid: Optional[np.ndarray] = None,
    quadrature_gate: float = cmim_solver.QUADRATURE_GATE,
) -> cmim_solver.ResidualReport:
    """The integral-equation report ``advance`` gated period k on."""
    gate = quadrature_gate if state.route(k) == "cmim" else deconv.DECONV_QUADRATURE_GATE
    return cmim_solver.integral_equation_report(state.marginal(k), state.kernel(k), state.marginal(k - 1), y_grid, gate)


def verify_martingale(state: PfppState, k: int, x_grid: Optional[np.ndarray] = None) -> float:
    """max_x |U_{k−1}(x) − E[U_k(I_k(U′_{k−1}(x)·ρ))]|."""
    x = as_positive_array(default_x_grid() if x_grid is None else x_grid).reshape(-1)
    previous, current = state.marginal(k - 1), state.marginal(k)
    y = invert(previous, x)
    lhs = state.anchors[k - 1] + previous.utility_primitive(y)
    rhs = state.anchors[k] + _expect(state, k, lambda rhos: current.primitive(y[:, None] * rhos))
    deviation = float(np.max(np.abs(lhs - rhs)))
    Logger.debug("Martingale check", {"period": k, "deviation": deviation})
    return deviation


def verify_budget(state: PfppState, k: int, x_grid: Optional[np.ndarray] = None) -> float:
    """max_x |E[ρ·I_k(yρ)] − x| / x with y = I_{k−1}⁻¹(x)."""
    x = as_positive_array(default_x_grid() if x_grid is None else x_grid).reshape(-1)
    previous = state.marginal(k - 1)
    report = cmim_solver.integral_equation_report(
        state.marginal(k), state.kernel(k), previous, invert(previous, x), gate=_quadrature_gate(state, k)
    )
    return report.max_rel_err


def verify_dual(state: PfppState, k: int, y_grid: Optional[np.ndarray] = None) -> float:
    """max_y |V_{k−1}(y) − E[V_k(yρ)]|."""
    y = as_positive_array(cmim_solver.default_y_grid() if y_grid is None else y_grid).reshape(-1)
    previous, current = state.marginal(k - 1), state.marginal(k)

    def dual(marginal: InverseMarginal, anchor: float, points: np.ndarray) -> np.ndarray:
        return anchor + marginal.primitive(points) - points * np.exp(marginal.log_value(points))

    lhs = dual(previous, state.anchors[k - 1], y)
    rhs = _expect(state, k, lambda rhos: dual(current, state.anchors[k], y[:, None] * rhos))
    return float(np.max(np.abs(lhs - rhs)))


class Perturbation(BaseModel):
    """Bounded payoff shape h(ρ) = Σ a_j cos(b_j·log ρ + c_j) / Σ|a_j|, so |h| ≤ 1."""

    model_config = ConfigDict(frozen=True)

    amplitudes: list[float] = Field(..., min_length=1)
    frequencies: list[float] = Field(..., min_length=1)
    phases: list[float] = Field(..., min_length=1)

    @classmethod
    def draw(cls, rng: np.random.Generator, terms: int = 3) -> "Perturbation":
        return cls(
            amplitudes=rng.standard_normal(terms).tolist(),
            frequencies=rng.uniform(0.5, 3.0, terms).tolist(),
            phases=rng.uniform(0.0, 2.0 * np.pi, terms).tolist(),
        )

    def __call__(self, rhos: np.ndarray) -> np.ndarray:
        a, b, c = (np.asarray(values) for values in (self.amplitudes, self.frequencies, self.phases))
        return np.cos(np.multiply.outer(np.log(rhos), b) + c) @ a / np.sum(np.abs(a))


def optimality_gap(state: PfppState, k: int, x: float, shape: Perturbation, epsilon: float) -> float:
    """E[U_k(X)] − U_{k−1}(x) for X = X*·(1 + ε(h − κ)), κ = E[ρX*h]/E[ρX*].

    The perturbation keeps E[ρX] = x; ε is halved until X > 0 at every node.
    """
    law = state.kernel(k)
    previous, current = state.marginal(k - 1), state.marginal(k)
    rhos, weights = law.nodes()
    y = float(invert(previous, x))
    optimal = current(y * rhos)
    h = shape(rhos)
    kappa = np.sum(weights * rhos * optimal * h) / np.sum(weights * rhos * optimal)

    while epsilon > 0 and np.min(1.0 + epsilon * (h - kappa)) <= 0:
        epsilon *= 0.5
        Logger.debug("Perturbation step halved", {"period": k, "epsilon": epsilon})

    if epsilon == 0:
        points = y * rhos
    else:
        payoff = optimal * (1.0 + epsilon * (h - kappa))
        points = invert(current, payoff, rel_tol=SUPERMARTINGALE_INVERSION_TOLERANCE)

    expected = state.anchors[k] + np.sum(weights * current.utility_primitive(points))
    baseline = state.anchors[k - 1] + previous.utility_primitive(y)
    return float(expected - baseline)


def worst_optimality_gap(
    state: PfppState, k: int, x: float, n_perturbations: int, rng: np.random.Generator, epsilon: float = 0.1
) -> float:
    """Largest gap over randomly drawn perturbation shapes; -inf when none are drawn."""
    gaps = [optimality_gap(state, k, x, Perturbation.draw(rng), epsilon) for _ in range(n_perturbations)]
    worst = max(gaps, default=float("-inf"))
    Logger.debug("Supermartingale check", {"period": k, "x": x, "worst_gap": worst})
    return worst


def verify_supermartingale(
    state: PfppState,
    k: int,
    x: float,
    n_perturbations: int,
    rng: np.random.Generator,
    epsilon: float = 0.1,
    slack: float = 1e-10,
) -> bool:
    return worst_optimality_gap(state, k, x, n_perturbations, rng, epsilon) <= slack


def gap_exponent(
    state: PfppState,
    k: int,
    x: float,
    shape: Perturbation,
    epsilons: Sequence[float] = GAP_EPSILONS,
) -> float:
    """Slope of log|gap| against log ε; 2 at a strict optimum."""
    gaps = np.array([optimality_gap(state, k, x, shape, epsilon) for epsilon in epsilons])
    if np.any(gaps >= 0):
        raise DomainError(f"optimality gaps must be negative to fit an exponent, got {gaps.tolist()}")
    slope, _ = np.polyfit(np.log(epsilons), np.log(-gaps), 1)
    return float(slope)
