"""Scenario generation, Monte Carlo wealth paths, binomial replication and BS interpolation.

Randomness is drawn from counter-based streams keyed by (seed, path, period, kind),
so a path's record depends only on the scenario and its index.
"""

import asyncio
from functools import partial
from typing import Annotated, Callable, Literal, Optional, Sequence, Union

import numpy as np
import ujson as json
from pydantic import BaseModel, ConfigDict, Field, NonNegativeInt, PositiveFloat, PositiveInt, model_validator

from engine import pfpp
from engine.deconv import DeconvConfig
from engine.errors import (
    BudgetMismatchError,
    CapacityError,
    DomainError,
    PfppError,
    UnsupportedRouteError,
)
from engine.kernels import (
    DEFAULT_STEP_CAP,
    BinomialPeriodParams,
    BinomialStep,
    BsPeriodParams,
    FiniteDiscreteLaw,
    LogNormalLaw,
    PeriodParams,
    sample,
)
from engine.measures import CmimInverseMarginal, InverseMarginal, cmim, invert
from utils import Logger, WorkerPool
from utils.rng import Stream, stream

QUANTILES = (5, 25, 50, 75, 95)
ENUMERATION_CAP = 2**20


# ------------------------------------------------------------------------- scenarios


class Interval(BaseModel):
    model_config = ConfigDict(frozen=True)

    lo: float
    hi: float

    @model_validator(mode="after")
    def ordered(self) -> "Interval":
        if self.lo > self.hi:
            raise ValueError(f"interval needs lo <= hi, got [{self.lo}, {self.hi}]")
        return self

    def draw(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.uniform(self.lo, self.hi, size)


class BinomialSampler(BaseModel):
    """IID binomial blocks: every sub-step draws u, d, p uniformly from its interval."""

    model_config = ConfigDict(frozen=True)

    type: Literal["binomial_iid"] = "binomial_iid"
    n_steps: PositiveInt
    u: Interval
    d: Interval
    p: Interval

    @model_validator(mode="after")
    def valid_ranges(self) -> "BinomialSampler":
        if self.u.lo <= 1.0:
            raise ValueError("u must stay above 1")
        if not (0.0 < self.d.lo and self.d.hi < 1.0):
            raise ValueError("d must stay inside (0, 1)")
        if not (0.0 < self.p.lo and self.p.hi < 1.0):
            raise ValueError("p must stay inside (0, 1)")
        return self

    def draw(self, rng: np.random.Generator) -> BinomialPeriodParams:
        u, d, p = (interval.draw(rng, self.n_steps) for interval in (self.u, self.d, self.p))
        return BinomialPeriodParams(
            steps=[BinomialStep(u=float(a), d=float(b), p=float(c)) for a, b, c in zip(u, d, p)]
        )


class BsSampler(BaseModel):
    """IID Black-Scholes blocks: λ ~ N(mean, diag(std²))."""

    model_config = ConfigDict(frozen=True)

    type: Literal["bs_iid"] = "bs_iid"
    mean: list[float] = Field(..., min_length=1)
    std: list[float] = Field(..., min_length=1)
    sigma: Optional[list[list[float]]] = None

    @model_validator(mode="after")
    def matching(self) -> "BsSampler":
        if len(self.mean) != len(self.std) or any(value < 0 for value in self.std):
            raise ValueError("mean and std need equal length and std >= 0")
        return self

    def draw(self, rng: np.random.Generator) -> BsPeriodParams:
        lam = np.asarray(self.mean) + np.asarray(self.std) * rng.standard_normal(len(self.mean))
        return BsPeriodParams(lam=lam.tolist(), sigma=self.sigma)


ParameterSampler = Annotated[Union[BinomialSampler, BsSampler], Field(discriminator="type")]


class ScenarioSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    horizon: NonNegativeInt = Field(..., description="Number of periods T")
    thetas: Optional[list[PeriodParams]] = Field(default=None, description="Fixed parameter blocks, one per period")
    sampler: Optional[ParameterSampler] = Field(default=None, description="IID parameter sampler")
    seed: int = Field(default=0, description="Root seed of every random stream")

    @model_validator(mode="after")
    def one_source(self) -> "ScenarioSpec":
        if (self.thetas is None) == (self.sampler is None):
            raise ValueError("give exactly one of thetas or sampler")
        if self.thetas is not None and len(self.thetas) != self.horizon:
            raise ValueError(f"{len(self.thetas)} theta blocks for a horizon of {self.horizon}")
        return self

    @property
    def is_fixed(self) -> bool:
        return self.thetas is not None

    def theta(self, path: int, period: int):
        if self.thetas is not None:
            return self.thetas[period - 1]
        return self.sampler.draw(stream(self.seed, path, period, Stream.THETA))


# --------------------------------------------------------------------------- records


class SubStepHolding(BaseModel):
    model_config = ConfigDict(frozen=True)

    step: int
    spot: float
    delta: float
    bond: float


class PathStep(BaseModel):
    model_config = ConfigDict(frozen=True)

    period: int
    theta: PeriodParams
    rho: PositiveFloat
    wealth: PositiveFloat
    holdings: list[SubStepHolding] = Field(default_factory=list)


class PathRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    path: int
    x0: PositiveFloat
    steps: list[PathStep] = Field(default_factory=list)
    error: Optional[str] = None

    @property
    def failed(self) -> bool:
        return self.error is not None

    @property
    def terminal_wealth(self) -> float:
        return self.steps[-1].wealth if self.steps else self.x0

    def csv_rows(self) -> list[tuple]:
        return [
            (self.path, step.period, json.dumps(step.theta.model_dump(mode="json")), step.rho, step.wealth)
            for step in self.steps
        ]


# ----------------------------------------------------------------------- replication


class ReplicationLevel(BaseModel):
    """Nodes after ``step`` sub-steps; node i has children 2i (up) and 2i + 1 (down)."""

    model_config = ConfigDict(frozen=True)

    step: int
    spot: list[float]
    value: list[float]
    delta: list[float]
    bond: list[float]


class ReplicationTree(BaseModel):
    model_config = ConfigDict(frozen=True)

    params: BinomialPeriodParams
    levels: list[ReplicationLevel]
    leaf_spot: list[float]
    leaf_rho: list[float]
    payoff: list[float]

    @property
    def root_value(self) -> float:
        return self.levels[0].value[0]

    def replication_error(self) -> float:
        """Largest gap between the portfolio carried into a node and that node's value (leaves: payoff)."""
        worst = 0.0
        for index, level in enumerate(self.levels):
            step = self.params.steps[level.step]
            spot, delta, bond = (np.asarray(values) for values in (level.spot, level.delta, level.bond))
            if index + 1 < len(self.levels):
                child = np.asarray(self.levels[index + 1].value)
            else:
                child = np.asarray(self.payoff)
            up = delta * spot * step.u + bond
            down = delta * spot * step.d + bond
            worst = max(worst, float(np.max(np.abs(up - child[0::2]))), float(np.max(np.abs(down - child[1::2]))))
        return worst

    def holdings_along(self, moves: Sequence[bool]) -> list[SubStepHolding]:
        """(Δ, bond) held over each sub-step of a realized up/down sequence."""
        node = 0
        held = []
        for level, up in zip(self.levels, moves):
            held.append(
                SubStepHolding(step=level.step, spot=level.spot[node], delta=level.delta[node], bond=level.bond[node])
            )
            node = 2 * node + (0 if up else 1)
        return held


def _leaf_paths(params: BinomialPeriodParams, spot: float) -> tuple[np.ndarray, np.ndarray]:
    rho = np.ones(1)
    for step in params.steps:
        rho = np.stack([rho * step.rho_up, rho * step.rho_down], axis=-1).reshape(-1)
    return rho, _level_spots(params, spot, len(params.steps))


def binomial_replication(
    params: BinomialPeriodParams,
    x_start: float,
    payoff_fn: Callable[[np.ndarray], np.ndarray],
    tolerance: float = 1e-10,
    spot: float = 1.0,
) -> ReplicationTree:
    """Backward induction over the non-recombining N-step tree with a unit riskless bond."""
    leaf_rho, leaf_spot = _leaf_paths(params, spot)
    payoff = np.asarray(payoff_fn(leaf_rho), dtype=float)
    if payoff.shape != leaf_rho.shape:
        raise DomainError(f"payoff must have one value per leaf ({leaf_rho.size}), got shape {payoff.shape}")

    levels = []
    value = payoff
    for index in range(len(params.steps) - 1, -1, -1):
        step = params.steps[index]
        spots = _level_spots(params, spot, index)
        up, down = value[0::2], value[1::2]
        delta = (up - down) / (spots * (step.u - step.d))
        value = step.q * up + (1.0 - step.q) * down
        bond = value - delta * spots
        levels.append(
            ReplicationLevel(
                step=index, spot=spots.tolist(), value=value.tolist(), delta=delta.tolist(), bond=bond.tolist()
            )
        )

    root = float(value[0])
    if abs(root - x_start) > tolerance * max(1.0, abs(x_start)):
        raise BudgetMismatchError(f"payoff costs {root!r} at the root, budget is {x_start!r}")

    return ReplicationTree(
        params=params,
        levels=levels[::-1],
        leaf_spot=leaf_spot.tolist(),
        leaf_rho=leaf_rho.tolist(),
        payoff=payoff.tolist(),
    )


def _level_spots(params: BinomialPeriodParams, spot: float, n_steps: int) -> np.ndarray:
    prices = np.full(1, spot)
    for step in params.steps[:n_steps]:
        prices = np.stack([prices * step.u, prices * step.d], axis=-1).reshape(-1)
    return prices


# -------------------------------------------------------------------------- budgets


def iterated_budget(state: pfpp.PfppState, x0: float) -> float:
    """E[∏ρ_k · X*_T] by enumerating every kernel atom of every period."""
    wealth = np.array([float(x0)])
    weight = np.ones(1)
    for k in range(1, state.period + 1):
        law = state.kernel(k)
        if not isinstance(law, FiniteDiscreteLaw):
            raise UnsupportedRouteError(f"period {k} kernel is not finite-discrete; enumeration impossible")
        if wealth.size * law.rhos.size > ENUMERATION_CAP:
            raise CapacityError(f"enumeration would exceed {ENUMERATION_CAP} leaves at period {k}")
        y = np.asarray(invert(state.marginal(k - 1), wealth))
        wealth = state.marginal(k)(np.multiply.outer(y, law.rhos)).reshape(-1)
        weight = np.multiply.outer(weight, law.probs * law.rhos).reshape(-1)
    return float(np.sum(weight * wealth))


def bs_wealth_interpolation(state: pfpp.PfppState, k: int, x_prev: float, t: float, increment):
    """X_t = E[X*_k·ρ_k/ρ_t | F_t] for a CMIM period with Brownian increment ΔB over [0, t].

    With ρ_t = exp(−tσ²/2 − λ·ΔB) and m_k the period's measure,
    X_t = ∫ (yρ_t)^(−1/γ) · moment(LogNormal((1−t)σ²), 1 − 1/γ) dm_k(γ), y = I_{k−1}⁻¹(x_prev).
    """
    theta = state.thetas[k - 1]
    marginal = state.marginal(k)
    if state.route(k) != "cmim" or not isinstance(marginal, CmimInverseMarginal):
        raise UnsupportedRouteError("intra-period interpolation needs a CMIM-backed period")
    if not isinstance(theta, BsPeriodParams):
        raise UnsupportedRouteError("intra-period interpolation needs a Black-Scholes period")
    if not 0.0 <= t < 1.0:
        raise DomainError(f"t must lie in [0, 1), got {t}")

    lam = np.asarray(theta.lam)
    sigma2 = theta.sigma2
    increment = np.asarray(increment, dtype=float)
    rho_t = np.exp(-0.5 * t * sigma2 - increment @ lam)
    y = float(invert(state.marginal(k - 1), x_prev))

    remaining = (1.0 - t) * sigma2
    measure = marginal.measure
    if remaining > 0:
        measure = measure.reweighted(LogNormalLaw(sigma2=remaining), power=1)
    return cmim(measure)(y * rho_t)


# ---------------------------------------------------------------------------- paths


class PathContext(BaseModel):
    model_config = ConfigDict(frozen=True)

    scenario: ScenarioSpec
    i0: pfpp.AnyInverseMarginal
    x0: PositiveFloat
    route: pfpp.RouteChoice = "auto"
    anchor: float = 0.0
    shared_state: Optional[pfpp.PfppState] = None
    shared_error: Optional[str] = None
    tolerances: pfpp.Tolerances = Field(default_factory=pfpp.Tolerances)
    deconv_config: Optional[DeconvConfig] = None
    step_cap: int = DEFAULT_STEP_CAP


def _draw_binomial(theta: BinomialPeriodParams, rng: np.random.Generator) -> tuple[float, list[bool]]:
    moves = [bool(move) for move in rng.random(len(theta.steps)) < [step.p for step in theta.steps]]
    rho = 1.0
    for step, up in zip(theta.steps, moves):
        rho *= step.rho_up if up else step.rho_down
    return rho, moves


def simulate_path(context: PathContext, path: int) -> PathRecord:
    scenario = context.scenario
    steps: list[PathStep] = []
    if context.shared_error is not None:
        return PathRecord(path=path, x0=context.x0, error=context.shared_error)

    state = context.shared_state or pfpp.init(context.i0, context.anchor)
    wealth = context.x0
    try:
        for period in range(1, scenario.horizon + 1):
            if context.shared_state is None:
                state = pfpp.advance(
                    state,
                    scenario.theta(path, period),
                    context.route,
                    tolerances=context.tolerances,
                    deconv_config=context.deconv_config,
                    step_cap=context.step_cap,
                )
            theta = state.thetas[period - 1]
            rng = stream(scenario.seed, path, period, Stream.KERNEL)

            holdings: list[SubStepHolding] = []
            if isinstance(theta, BinomialPeriodParams):
                rho, moves = _draw_binomial(theta, rng)
                tree = binomial_replication(
                    theta,
                    wealth,
                    partial(pfpp.wealth_step, state, wealth, period=period),
                    tolerance=context.tolerances.replication_for(state.route(period)),
                )
                holdings = tree.holdings_along(moves)
            else:
                rho = sample(state.kernel(period), rng)

            following = float(pfpp.wealth_step(state, wealth, rho, period=period))
            steps.append(PathStep(period=period, theta=theta, rho=rho, wealth=following, holdings=holdings))
            wealth = following
    except PfppError as error:
        Logger.warning("Path failed", {"path": path, "period": len(steps) + 1, "error": str(error)})
        return PathRecord(path=path, x0=context.x0, steps=steps, error=f"{type(error).__name__}: {error}")

    return PathRecord(path=path, x0=context.x0, steps=steps)


def build_context(
    spec: ScenarioSpec,
    i0: InverseMarginal,
    x0: float,
    route: pfpp.RouteChoice = "auto",
    state: Optional[pfpp.PfppState] = None,
    **options,
) -> PathContext:
    """Fixed-theta scenarios construct the PFPP once and share it across paths."""
    options = {key: value for key, value in options.items() if value is not None}
    shared_error = None
    if state is not None and state.period < spec.horizon:
        raise DomainError(f"state covers {state.period} periods, scenario needs {spec.horizon}")
    if state is None and spec.is_fixed:
        try:
            state = pfpp.construct(
                i0,
                spec.thetas,
                anchor=options.get("anchor", 0.0),
                route=route,
                tolerances=options.get("tolerances"),
                deconv_config=options.get("deconv_config"),
                step_cap=options.get("step_cap", DEFAULT_STEP_CAP),
            )
        except PfppError as error:
            shared_error = f"{type(error).__name__}: {error}"
    return PathContext(
        scenario=spec, i0=i0, x0=x0, route=route, shared_state=state, shared_error=shared_error, **options
    )


def run_paths(
    spec: ScenarioSpec,
    i0: InverseMarginal,
    x0: float,
    n_paths: int,
    route: pfpp.RouteChoice = "auto",
    state: Optional[pfpp.PfppState] = None,
    **options,
) -> list[PathRecord]:
    context = build_context(spec, i0, x0, route, state, **options)
    records = [simulate_path(context, path) for path in range(n_paths)]
    Logger.info("Paths simulated", {"paths": n_paths, "failed": sum(record.failed for record in records)})
    return records


async def run_paths_concurrent(
    spec: ScenarioSpec,
    i0: InverseMarginal,
    x0: float,
    n_paths: int,
    route: pfpp.RouteChoice = "auto",
    state: Optional[pfpp.PfppState] = None,
    max_workers: int = 0,
    **options,
) -> list[PathRecord]:
    """``run_paths`` on a worker pool; records come back ordered by path index."""
    context = build_context(spec, i0, x0, route, state, **options)
    pool = WorkerPool(max_workers)
    results = await pool.run_blocking([partial(simulate_path, context, path) for path in range(n_paths)])

    records = []
    for path, result in enumerate(results):
        if isinstance(result, Exception):
            Logger.error("Path raised outside the solver", {"path": path, "error": str(result)})
            result = PathRecord(path=path, x0=x0, error=f"{type(result).__name__}: {result}")
        records.append(result)
    return records


def run_paths_sync(*args, **kwargs) -> list[PathRecord]:
    return asyncio.run(run_paths_concurrent(*args, **kwargs))


# --------------------------------------------------------------------------- summary


class PeriodSummary(BaseModel):
    period: int
    mean: float
    std: float
    quantiles: dict[str, float]
    mean_log_wealth: float
    budget_residual: float = Field(..., description="mean(rho_k * X_k / X_{k-1}) - 1")


class SimulationSummary(BaseModel):
    n_paths: int
    n_failed: int
    failure_rate: float
    periods: list[PeriodSummary]
    failures: dict[str, int] = Field(default_factory=dict, description="Failure counts by error type")


def summarize(paths: Sequence[PathRecord]) -> SimulationSummary:
    succeeded = [record for record in paths if not record.failed]
    if not succeeded:
        raise DomainError("summary needs at least one successful path")

    failures: dict[str, int] = {}
    for record in paths:
        if record.failed:
            kind = record.error.split(":", 1)[0]
            failures[kind] = failures.get(kind, 0) + 1

    horizon = len(succeeded[0].steps)
    wealth = np.array([[record.x0] + [step.wealth for step in record.steps] for record in succeeded])
    rho = np.array([[step.rho for step in record.steps] for record in succeeded]).reshape(len(succeeded), horizon)

    periods = []
    for k in range(1, horizon + 1):
        column = wealth[:, k]
        periods.append(
            PeriodSummary(
                period=k,
                mean=float(np.mean(column)),
                std=float(np.std(column)),
                quantiles={str(q): float(value) for q, value in zip(QUANTILES, np.percentile(column, QUANTILES))},
                mean_log_wealth=float(np.mean(np.log(column))),
                budget_residual=float(np.mean(rho[:, k - 1] * column / wealth[:, k - 1]) - 1.0),
            )
        )

    n_failed = len(paths) - len(succeeded)
    return SimulationSummary(
        n_paths=len(paths),
        n_failed=n_failed,
        failure_rate=n_failed / len(paths),
        periods=periods,
        failures=failures,
    )
