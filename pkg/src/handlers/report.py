from datetime import datetime
from pathlib import Path
from typing import Any, Optional

from opentelemetry import trace

import config
from engine.kernels import FiniteDiscreteLaw
from engine.pfpp import PfppState
from utils import Logger, TemplateManager
from utils.io import read_json

from .base_handler import BaseHandler, StateHandlerConfig

TEMPLATES = Path(__file__).parent.parent / "templates" / "report.yaml"
# template variable, artifact written by the matching command
ARTIFACTS = (("verification", "verification.json"), ("summary", "summary.json"), ("deconv", "deconv_report.json"))


class ReportHandlerConfig(StateHandlerConfig):
    pass


def _kernel_label(law) -> str:
    if isinstance(law, FiniteDiscreteLaw):
        return f"discrete ({len(law.atoms)} atoms)"
    return f"lognormal (sigma^2={law.sigma2:.6g})"


class ReportHandler(BaseHandler):
    """Renders report.md from whatever artifacts the other commands left in the output directory."""

    def __init__(self, config: ReportHandlerConfig, run):
        super().__init__(config, run)

        self._templates = TemplateManager(TEMPLATES, "report")

    async def handle(self) -> Path:
        Logger.info("Starting report handler")

        with trace.get_tracer("report").start_as_current_span("Report Handler") as span:
            generated_at = datetime.now().isoformat(timespec="seconds")
            sections = [self._templates.render("header", generated_at=generated_at, version=config.VERSION)]

            state = self.load_state(required=False)
            if state is not None:
                sections.append(self._templates.render("state", state=state.model_dump(), periods=self._periods(state)))

            for name, file_name in ARTIFACTS:
                payload = self._artifact(file_name)
                if payload is not None:
                    template = "simulation" if name == "summary" else name
                    sections.append(self._templates.render(template, **{name: payload}))

            span.set_attribute("sections", len(sections))
            target = self.config.out / "report.md"
            target.write_text("\n".join(sections), encoding="utf-8")

            Logger.info("Report written", {"path": str(target), "sections": len(sections)})
            return target

    def _artifact(self, file_name: str) -> Optional[Any]:
        path = self.config.out / file_name
        if not path.exists():
            return None
        return read_json(path)

    @staticmethod
    def _periods(state: PfppState) -> list[dict]:
        return [
            {
                "period": k,
                "route": state.route(k),
                "kernel": _kernel_label(state.kernel(k)),
                "residual": state.residuals[k - 1],
                "anchor": state.anchors[k],
            }
            for k in range(1, state.period + 1)
        ]
