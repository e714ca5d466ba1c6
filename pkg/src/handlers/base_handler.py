from abc import ABC, abstractmethod
from pathlib import Path
from typing import Optional

import numpy as np
from pydantic import BaseModel, Field, PositiveFloat, model_validator

from config import RunConfig
from engine.errors import ConfigurationError
from engine.measures import InverseMarginal
from engine.pfpp import PfppState, Tolerances
from utils import Logger


class BaseHandlerConfig(BaseModel):
    config: Optional[Path] = Field(default=None, description="The path to the YAML run configuration")
    out: Path = Field(default=Path("out"), description="Directory the command writes its artifacts to")
    seed: Optional[int] = Field(default=None, description="Overrides the scenario seed and the perturbation seed")
    tolerance: Optional[PositiveFloat] = Field(default=None, description="Overrides the residual gate of the command")

    @model_validator(mode="after")
    def config_exists(self) -> "BaseHandlerConfig":
        if self.config is not None and not self.config.exists():
            raise ValueError(f"config file {self.config} does not exist")
        return self


class StateHandlerConfig(BaseHandlerConfig):
    state: Optional[Path] = Field(
        default=None,
        description="The path to a state.json written by construct. If not specified, <out>/state.json is used",
    )

    @model_validator(mode="after")
    def resolve_state_path(self) -> "StateHandlerConfig":
        """Fall back to the state construct wrote into the output directory."""
        if self.state is None:
            default_state = self.out / "state.json"
            if default_state.exists():
                self.state = default_state
        elif not self.state.exists():
            raise ValueError(f"state file {self.state} does not exist")

        return self


class AbstractHandler(ABC):
    @abstractmethod
    async def handle(self):
        pass


class BaseHandler(AbstractHandler, ABC):
    def __init__(self, config: BaseHandlerConfig, run: RunConfig):
        self.config = config
        self.run = run

        self.config.out.mkdir(parents=True, exist_ok=True)

    @abstractmethod
    async def handle(self):
        pass

    def initial(self) -> InverseMarginal:
        if self.run.initial is None:
            raise ConfigurationError("no initial inverse marginal: set `initial` or `initial_path`")
        return self.run.initial

    def load_state(self, required: bool = True) -> Optional[PfppState]:
        path = getattr(self.config, "state", None)
        if path is None:
            if required:
                raise ConfigurationError(f"no state file: pass --state or run construct into {self.config.out}")
            return None

        state = PfppState.model_validate_json(path.read_text(encoding="utf-8"))
        Logger.debug("State loaded", {"path": str(path), "period": state.period})
        return state

    def tolerances(self, *gates: str) -> Tolerances:
        """Tolerances with ``--tolerance`` applied to the named gates."""
        if self.config.tolerance is None:
            return self.run.tolerances
        return self.run.tolerances.model_copy(update={gate: self.config.tolerance for gate in gates})

    def y_grid(self) -> np.ndarray:
        grids = self.run.grids
        return np.geomspace(grids.y_lo, grids.y_hi, grids.y_points)

    def x_grid(self) -> np.ndarray:
        grids = self.run.grids
        return np.geomspace(grids.x_lo, grids.x_hi, grids.x_points)
