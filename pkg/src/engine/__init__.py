"""Numerical core: measures, kernels, the two period solvers, the PFPP recursion and simulation."""

from engine.errors import (
    ConfigurationError,
    GateError,
    IllPosednessWarning,
    PfppError,
    SolverError,
    VerificationError,
)

__all__ = [
    "ConfigurationError",
    "GateError",
    "IllPosednessWarning",
    "PfppError",
    "SolverError",
    "VerificationError",
]
