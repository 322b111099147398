"""Errors raised by the fluidq solvers."""

from typing import Any, Dict, Optional


class FluidQueueError(Exception):
    """Base class for every error raised on purpose by fluidq"""


class ModelError(FluidQueueError, ValueError):
    """A model file or model arrays failed to parse or validate"""


class ParameterError(FluidQueueError, ValueError):
    """Invalid solver parameters or arguments"""


class TripletError(FluidQueueError, ValueError):
    """A triplet representation violates its sign conditions"""


class GthError(FluidQueueError, ArithmeticError):
    """GTH-like elimination hit a negative or premature zero pivot"""


class NumericalError(FluidQueueError, ArithmeticError):
    """Non-finite values, overflow, or a singular explicit factorization"""


class RecurrenceError(FluidQueueError):
    """The queue is not positive recurrent, so no stationary density exists"""


class OracleError(FluidQueueError):
    """The extended-precision reference computation failed"""


class ConvergenceError(FluidQueueError):
    """
    The doubling iteration did not converge

    Args:
        message: Human readable description
        diagnostics: Iteration record at the point of failure
    """

    def __init__(self, message: str, diagnostics: Optional[Any] = None):
        super().__init__(message)
        self.diagnostics = diagnostics

    def to_dict(self) -> Dict[str, Any]:
        data = {"error": str(self)}
        if self.diagnostics is not None and hasattr(self.diagnostics, "to_dict"):
            data["diagnostics"] = self.diagnostics.to_dict()
        return data
