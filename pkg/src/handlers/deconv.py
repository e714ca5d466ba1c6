import warnings

from opentelemetry import trace

from engine import deconv
from engine.deconv import DeconvSolution
from engine.errors import ConfigurationError, ConstructionFailedError, IllPosednessWarning
from engine.kernels import kernel_for
from utils import Logger
from utils.io import write_csv, write_json

from .base_handler import BaseHandler, BaseHandlerConfig

SOLUTION_HEADER = ("t", "J1")
SPECTRUM_HEADER = ("xi", "re", "im", "abs")


class DeconvHandlerConfig(BaseHandlerConfig):
    pass


class DeconvHandler(BaseHandler):
    """One deconvolution solve of I_0 against the first market period, with its diagnostics."""

    async def handle(self) -> DeconvSolution:
        Logger.info("Starting deconv handler")

        if self.run.deconv is None:
            raise ConfigurationError("deconv needs a `deconv` section")
        if not self.run.market:
            raise ConfigurationError("deconv needs at least one `market` period")

        cfg = self.run.deconv
        tolerance = self.tolerances("deconv_residual").deconv_residual
        law = kernel_for(self.run.market[0], step_cap=self.run.step_cap)
        initial = self.initial()

        with trace.get_tracer("deconv").start_as_current_span("Deconv Handler") as span:
            span.set_attributes(
                {
                    "n_points": cfg.n_points,
                    "half_width": cfg.half_width,
                    "gamma1": cfg.gamma1,
                    "gamma2": cfg.gamma2,
                    "tolerance": tolerance,
                }
            )

            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always", IllPosednessWarning)
                solution = deconv.solve(initial, law, cfg)
            ill_posed = [
                str(warning.message) for warning in caught if issubclass(warning.category, IllPosednessWarning)
            ]

            residual = deconv.convolution_residual(solution.marginal, law, initial, self.y_grid())
            self._write(solution, residual, ill_posed)
            span.set_attributes({"residual": residual, "ill_posed": bool(ill_posed)})

            if residual > tolerance:
                raise ConstructionFailedError(1, residual, tolerance)

            Logger.info("Deconvolution finished", {"residual": residual, "warnings": len(ill_posed)})
            return solution

    def _write(self, solution: DeconvSolution, residual: float, ill_posed: list[str]):
        out = self.config.out
        write_csv(out / "solution.csv", SOLUTION_HEADER, solution.marginal.grid.rows())
        for index, kernel in enumerate(solution.kernels, start=1):
            write_csv(out / f"spectrum_k{index}.csv", SPECTRUM_HEADER, deconv.spectrum_rows(kernel, solution.config))

        write_json(
            out / "deconv_report.json",
            {
                "residual": residual,
                "interior": [solution.marginal.t_lo, solution.marginal.t_hi],
                "ill_posed": solution.ill_posed,
                "warnings": ill_posed,
                "divisions": [
                    {
                        "gamma_k": division.gamma_k,
                        "zeroed_bins": division.zeroed_bins,
                        "band_limit": division.band_limit,
                        "ill_posed_frequencies": division.ill_posed_frequencies,
                    }
                    for division in solution.divisions
                ],
            },
        )
