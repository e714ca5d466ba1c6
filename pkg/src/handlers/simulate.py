from typing import Optional

from opentelemetry import trace

import config
from engine import sim
from engine.errors import CapacityError, ConfigurationError, PathFailureError, UnsupportedRouteError
from engine.pfpp import PfppState
from engine.sim import PathRecord, ScenarioSpec
from utils import Logger
from utils.io import write_csv, write_json

from .base_handler import BaseHandler, StateHandlerConfig

PATH_HEADER = ("path", "period", "theta", "rho", "wealth")


class SimulateHandlerConfig(StateHandlerConfig):
    pass


class SimulateHandler(BaseHandler):
    """Monte Carlo wealth paths, from a stored state or constructed along each path."""

    async def handle(self) -> list[PathRecord]:
        Logger.info("Starting simulate handler")

        scenario = self.scenario()
        state = self.load_state(required=False)
        initial = state.marginal(0) if state is not None else self.initial()
        tolerances = self.tolerances("cmim_residual", "deconv_residual")

        with trace.get_tracer("simulate").start_as_current_span("Simulate Handler") as span:
            span.set_attributes(
                {
                    "route": self.run.route,
                    "horizon": scenario.horizon,
                    "seed": scenario.seed,
                    "n_paths": self.run.n_paths,
                    "fixed_thetas": scenario.is_fixed,
                    "from_state": state is not None,
                    "max_workers": config.SIM_MAX_WORKERS,
                }
            )

            records = await sim.run_paths_concurrent(
                scenario,
                initial,
                self.run.x0,
                self.run.n_paths,
                route=self.run.route,
                state=state,
                max_workers=config.SIM_MAX_WORKERS,
                anchor=self.run.anchor,
                tolerances=tolerances,
                deconv_config=self.run.deconv,
                step_cap=self.run.step_cap,
            )

            rows = [row for record in records for row in record.csv_rows()]
            write_csv(self.config.out / "paths.csv", PATH_HEADER, rows)

            n_failed = sum(record.failed for record in records)
            failure_rate = n_failed / len(records)
            span.set_attribute("failure_rate", failure_rate)

            if n_failed == len(records):
                raise PathFailureError(f"all {n_failed} paths failed, first error: {records[0].error}")

            summary = sim.summarize(records).model_dump()
            summary["iterated_budget"] = self._iterated_budget(state, scenario)
            write_json(self.config.out / "summary.json", summary)

            if failure_rate > self.run.max_failure_rate:
                raise PathFailureError(
                    f"{n_failed} of {len(records)} paths failed, rate {failure_rate:.3f} "
                    f"above {self.run.max_failure_rate:.3f}"
                )

            Logger.info("Simulation finished", {"paths": len(records), "failed": n_failed})
            return records

    def scenario(self) -> ScenarioSpec:
        if self.run.scenario is None:
            raise ConfigurationError("simulate needs a `scenario` section")
        if self.config.seed is None:
            return self.run.scenario
        return self.run.scenario.model_copy(update={"seed": self.config.seed})

    def _iterated_budget(self, state: Optional[PfppState], scenario: ScenarioSpec) -> Optional[float]:
        """E[∏ρ·X*_T] by enumeration when every kernel is finite; None otherwise."""
        if state is None or not scenario.is_fixed:
            return None
        try:
            return sim.iterated_budget(state, self.run.x0)
        except (UnsupportedRouteError, CapacityError) as error:
            Logger.debug("Iterated budget skipped", {"reason": str(error)})
            return None
