import logging
import os
from pathlib import Path
from typing import Optional, Type, TypeVar

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, Field, NonNegativeInt, PositiveFloat, PositiveInt, TypeAdapter, model_validator

from engine.deconv import DeconvConfig
from engine.grid import AnyInverseMarginal
from engine.kernels import PeriodParams
from engine.pfpp import RouteChoice, Tolerances
from engine.sim import ScenarioSpec
from utils.dict import merge_dicts
from utils.io import read_json

load_dotenv()


def str_to_bool(value: str) -> bool:
    if value.lower() in ["true", "1", "yes", "y"]:
        return True
    elif value.lower() in ["false", "0", "no", "n"]:
        return False
    else:
        raise ValueError(f"Invalid boolean value: {value}")


VERSION = os.getenv("APP_VERSION", "0.1.0")

# General
ENVIRONMENT = os.getenv("ENVIRONMENT", "development")

CONSOLE_LOG_LEVEL = getattr(logging, os.getenv("CONSOLE_LOG_LEVEL", "WARNING").upper())
FILE_LOG_LEVEL = getattr(logging, os.getenv("FILE_LOG_LEVEL", "INFO").upper())
LOG_DIR = Path(os.getenv("LOG_DIR", ".logs"))

# Tracing
ENABLE_TRACING = str_to_bool(os.getenv("ENABLE_TRACING", "false"))

# Simulation
SIM_MAX_WORKERS = int(os.getenv("SIM_MAX_WORKERS", "0"))

# Kernels
BINOMIAL_STEP_CAP = int(os.getenv("BINOMIAL_STEP_CAP", "20"))

INVERSE_MARGINAL: TypeAdapter = TypeAdapter(AnyInverseMarginal)


class GridSettings(BaseModel):
    """Evaluation grids for residuals and verification (log-spaced)."""

    y_points: PositiveInt = Field(default=200, description="Points of the y grid used by residual reports")
    y_lo: PositiveFloat = Field(default=1e-2)
    y_hi: PositiveFloat = Field(default=1e2)
    x_points: PositiveInt = Field(default=100, description="Points of the wealth grid used by verification")
    x_lo: PositiveFloat = Field(default=1e-2)
    x_hi: PositiveFloat = Field(default=1e2)

    @model_validator(mode="after")
    def ordered(self) -> "GridSettings":
        if self.y_lo >= self.y_hi or self.x_lo >= self.x_hi:
            raise ValueError("grid bounds need lo < hi")
        return self


class RunConfig(BaseModel):
    """Everything a command reads from the YAML run file (top level of the file)."""

    market: list[PeriodParams] = Field(default_factory=list, description="Theta blocks, one per period")
    initial: Optional[AnyInverseMarginal] = Field(default=None, description="Initial inverse marginal I_0")
    initial_path: Optional[Path] = Field(default=None, description="JSON file holding the initial inverse marginal")
    anchor: float = Field(default=0.0, description="Anchor of U_0, i.e. U_0(I_0(1))")
    route: RouteChoice = Field(default="auto", description="Period solver: cmim, deconv or auto")
    deconv: Optional[DeconvConfig] = Field(default=None, description="Grid settings of the deconvolution route")
    scenario: Optional[ScenarioSpec] = Field(default=None, description="Scenario used by simulate")
    tolerances: Tolerances = Field(default_factory=Tolerances)
    grids: GridSettings = Field(default_factory=GridSettings)
    x0: PositiveFloat = Field(default=1.0, description="Initial wealth")
    n_paths: PositiveInt = Field(default=1000, description="Monte Carlo paths for simulate")
    max_failure_rate: float = Field(default=0.0, ge=0.0, le=1.0, description="Tolerated share of failed paths")
    perturbations: NonNegativeInt = Field(default=100, description="Random perturbations per period in verify")
    step_cap: PositiveInt = Field(default=BINOMIAL_STEP_CAP, description="Largest N for binomial kernels")

    @model_validator(mode="after")
    def resolve_initial(self) -> "RunConfig":
        if self.initial_path is not None:
            if not self.initial_path.exists():
                raise ValueError(f"initial_path {self.initial_path} does not exist")
            if self.initial is None:
                self.initial = INVERSE_MARGINAL.validate_python(read_json(self.initial_path))
        if self.initial is not None and self.route == "cmim" and self.initial.kind != "cmim":
            raise ValueError("route 'cmim' requires a CMIM initial inverse marginal")
        return self


# --------------------------
# Helper Function


def load_config_from_file(args, file_key: str = "") -> dict:
    """
    Helper function to load configuration from a YAML file.

    Args:
        args: Arguments object with a `config` attribute
        file_key: Optional dot-separated key path of the section to read; empty reads the whole file

    Returns:
        dict: Configuration dictionary from file, or empty dict if the file doesn't exist or key not found
    """
    config_path = getattr(args, "config", None)
    if not config_path:
        return {}

    config_path = Path(config_path)
    if not config_path.exists():
        return {}

    config = yaml.safe_load(config_path.read_text()) or {}
    if file_key:
        try:
            for key in file_key.split("."):
                config = config[key]
        except (KeyError, TypeError):
            config = {}

    return config


def load_config_as_dict(args, handler_config: Type[BaseModel]) -> dict:
    """
    Helper function to extract explicitly set CLI values for the fields of a pydantic model.

    Nested models are only descended into when the flag names match their own fields.
    """
    config = {}

    for field_name, field_info in handler_config.model_fields.items():
        if isinstance(field_info.annotation, type) and issubclass(field_info.annotation, BaseModel):
            nested = load_config_as_dict(args, field_info.annotation)
            if nested:
                config[field_name] = nested

        elif hasattr(args, field_name) and getattr(args, field_name) is not None:
            arg_value = getattr(args, field_name)
            if field_info.annotation in [Path, Optional[Path]]:
                config[field_name] = Path(arg_value)
            else:
                config[field_name] = arg_value

    return config


T = TypeVar("T", bound=BaseModel)


def load_config(args, handler_config: Type[T], file_key: str = "") -> T:
    """
    Load configuration from multiple sources with precedence order.

    Configuration loading order (later sources override earlier ones):
    1. Start with Pydantic model defaults
    2. Override with config file values (if file exists and key is found)
    3. Override with CLI arguments (only if explicitly set, i.e., not None)

    Args:
        args: Arguments object with the config path and CLI values
        handler_config: Pydantic BaseModel class type defining the expected configuration structure
        file_key: Optional dot-separated key path for nested config file sections

    Returns:
        T: Instantiated Pydantic model with merged configuration values
    """
    file_config = load_config_from_file(args, file_key)
    cli_config = load_config_as_dict(args, handler_config)

    config = merge_dicts(file_config, cli_config)

    return handler_config(**config)
