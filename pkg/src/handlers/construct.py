from opentelemetry import trace

from engine import pfpp
from engine.pfpp import PfppState
from utils import Logger
from utils.io import write_csv

from .base_handler import BaseHandler, BaseHandlerConfig

RESIDUAL_HEADER = ("period", "route", "y", "lhs", "rhs", "rel_err")
UTILITY_HEADER = ("x", "U", "U_prime")


class ConstructHandlerConfig(BaseHandlerConfig):
    pass


class ConstructHandler(BaseHandler):
    """Builds I_1..I_T for the configured market and writes the state, residuals and utility curves."""

    async def handle(self) -> PfppState:
        Logger.info("Starting construct handler")

        with trace.get_tracer("construct").start_as_current_span("Construct Handler") as span:
            tolerances = self.tolerances("cmim_residual", "deconv_residual")
            y_grid = self.y_grid()
            span.set_attributes(
                {
                    "route": self.run.route,
                    "periods": len(self.run.market),
                    "y_points": len(y_grid),
                    "cmim_residual": tolerances.cmim_residual,
                    "deconv_residual": tolerances.deconv_residual,
                }
            )

            state = pfpp.construct(
                self.initial(),
                self.run.market,
                anchor=self.run.anchor,
                route=self.run.route,
                tolerances=tolerances,
                deconv_config=self.run.deconv,
                y_grid=y_grid,
                step_cap=self.run.step_cap,
            )
            self._write(state, tolerances)

            span.set_attribute("routes", ",".join(state.routes))
            Logger.info("State constructed", {"periods": state.period, "residuals": state.residuals})
            return state

    def _write(self, state: PfppState, tolerances: pfpp.Tolerances):
        out = self.config.out
        (out / "state.json").write_text(state.model_dump_json(indent=2), encoding="utf-8")

        rows = []
        for k in range(1, state.period + 1):
            report = pfpp.period_report(state, k, self.y_grid(), tolerances.quadrature_gate)
            rows.extend((k, state.route(k), *row) for row in report.csv_rows())
        write_csv(out / "residuals.csv", RESIDUAL_HEADER, rows)

        x_grid = self.x_grid()
        for k in range(state.period + 1):
            curve = pfpp.reconstruct_utility(state, k, x_grid)
            write_csv(out / f"utility_{k}.csv", UTILITY_HEADER, curve.csv_rows())

        Logger.debug("Construct artifacts written", {"out": str(out)})
