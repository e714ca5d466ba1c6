from typing import Optional

from opentelemetry import trace
from pydantic import BaseModel, Field

from engine import pfpp
from engine.errors import VerificationError
from engine.pfpp import PfppState, Tolerances
from utils import Logger
from utils.io import write_csv, write_json
from utils.rng import Stream, stream

from .base_handler import BaseHandler, StateHandlerConfig

VERIFICATION_HEADER = ("period", "gate", "value", "tolerance", "passed")
# supermartingale probes sit at these multiples of x0
PROBE_MULTIPLES = (0.5, 1.0, 2.0)


class VerifyHandlerConfig(StateHandlerConfig):
    pass


class GateResult(BaseModel):
    period: int
    gate: str
    value: float
    tolerance: float
    passed: bool


class VerificationReport(BaseModel):
    periods: int
    seed: int
    gates: list[GateResult] = Field(default_factory=list)
    residuals_reproduced: bool = Field(..., description="Residuals recomputed from the loaded state match the file")

    @property
    def first_failure(self) -> Optional[GateResult]:
        return next((gate for gate in self.gates if not gate.passed), None)


def _gate(period: int, name: str, value: float, tolerance: float) -> GateResult:
    return GateResult(period=period, gate=name, value=value, tolerance=tolerance, passed=value <= tolerance)


class VerifyHandler(BaseHandler):
    """Runs the budget, martingale, dual and supermartingale gates on every period of a state."""

    async def handle(self) -> VerificationReport:
        Logger.info("Starting verify handler")

        state = self.load_state()
        tolerances = self.tolerances("budget_cmim", "budget_deconv")
        seed = self.seed()

        with trace.get_tracer("verify").start_as_current_span("Verify Handler") as span:
            span.set_attributes(
                {
                    "periods": state.period,
                    "seed": seed,
                    "perturbations": self.run.perturbations,
                    "budget_cmim": tolerances.budget_cmim,
                }
            )

            gates = [
                gate for k in range(1, state.period + 1) for gate in self._period_gates(state, k, tolerances, seed)
            ]
            report = VerificationReport(
                periods=state.period,
                seed=seed,
                gates=gates,
                residuals_reproduced=self._residuals_reproduced(state, tolerances),
            )

            write_json(self.config.out / "verification.json", report.model_dump())
            write_csv(
                self.config.out / "verification.csv",
                VERIFICATION_HEADER,
                [(gate.period, gate.gate, gate.value, gate.tolerance, gate.passed) for gate in gates],
            )

            failure = report.first_failure
            span.set_attribute("passed", failure is None)
            if failure is not None:
                Logger.error("Verification gate failed", failure.model_dump())
                raise VerificationError(failure.gate, failure.period, failure.value)

            Logger.info("Verification passed", {"periods": state.period, "gates": len(gates)})
            return report

    def seed(self) -> int:
        if self.config.seed is not None:
            return self.config.seed
        return self.run.scenario.seed if self.run.scenario is not None else 0

    def _period_gates(self, state: PfppState, k: int, tolerances: Tolerances, seed: int) -> list[GateResult]:
        route = state.route(k)
        x_grid = self.x_grid()

        budget = pfpp.verify_budget(state, k, x_grid)
        martingale = pfpp.verify_martingale(state, k, x_grid)
        dual = pfpp.verify_dual(state, k, self.y_grid())
        results = [
            _gate(k, "budget", budget, tolerances.budget_for(route)),
            _gate(k, "martingale", martingale, tolerances.martingale_for(route)),
            _gate(k, "dual", dual, tolerances.martingale_for(route)),
        ]

        if self.run.perturbations:
            rng = stream(seed, 0, k, Stream.PERTURBATION)
            worst = max(
                pfpp.worst_optimality_gap(state, k, multiple * self.run.x0, self.run.perturbations, rng)
                for multiple in PROBE_MULTIPLES
            )
            results.append(_gate(k, "supermartingale", worst, tolerances.supermartingale_slack))
        return results

    def _residuals_reproduced(self, state: PfppState, tolerances: Tolerances) -> bool:
        recomputed = [
            pfpp.period_report(state, k, self.y_grid(), tolerances.quadrature_gate).max_rel_err
            for k in range(1, state.period + 1)
        ]
        reproduced = recomputed == state.residuals
        if not reproduced:
            Logger.warning(
                "Stored residuals differ from recomputed ones", {"stored": state.residuals, "now": recomputed}
            )
        return reproduced
