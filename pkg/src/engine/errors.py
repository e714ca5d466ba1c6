from typing import Iterable, Optional


class PfppError(Exception):
    """Root of every error the engine raises on purpose.

    ``exit_code`` is what the CLI returns when the error escapes a command.
    """

    exit_code: int = 1


# Configuration (exit 2)


class ConfigurationError(PfppError):
    exit_code = 2


# Solver (exit 3)


class SolverError(PfppError):
    exit_code = 3


class DomainError(SolverError, ValueError):
    pass


class NumericalRangeError(SolverError, ArithmeticError):
    pass


class CapacityError(SolverError):
    pass


class PreconditionError(SolverError):
    pass


class QuadratureError(SolverError):
    pass


class DomainMismatchError(SolverError):
    """The sampled J₀ grows at a grid edge, so it is not in J(γ₁,γ₂) numerically."""


class UnsupportedRouteError(SolverError):
    pass


class BudgetMismatchError(SolverError):
    pass


class PathFailureError(SolverError):
    pass


# Residual and shape gates (exit 4)


class GateError(PfppError):
    exit_code = 4


class ConstructionFailedError(GateError):
    def __init__(self, period: int, residual: float, tolerance: float):
        super().__init__(f"period {period}: residual {residual:.3e} exceeds tolerance {tolerance:.1e}")
        self.period = period
        self.residual = residual
        self.tolerance = tolerance


class SolutionRejectedError(GateError):
    pass


# Verification (exit 5)


class VerificationError(PfppError):
    exit_code = 5

    def __init__(self, gate: str, period: Optional[int] = None, value: Optional[float] = None):
        where = f" at period {period}" if period is not None else ""
        detail = f" (value {value:.3e})" if value is not None else ""
        super().__init__(f"verification gate '{gate}' failed{where}{detail}")
        self.gate = gate
        self.period = period
        self.value = value


class IllPosednessWarning(UserWarning):
    """Spectral zeros inside the resolved band: the deconvolution may not be unique."""

    def __init__(self, frequencies: Iterable[float], gamma_k: float):
        self.frequencies = [float(xi) for xi in frequencies]
        self.gamma_k = gamma_k
        preview = ", ".join(f"{xi:.4f}" for xi in self.frequencies[:6])
        more = "" if len(self.frequencies) <= 6 else f", ... ({len(self.frequencies)} total)"
        super().__init__(f"|F[mu]| below floor for gamma_k={gamma_k:g} at xi = {preview}{more}")
