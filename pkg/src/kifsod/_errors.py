from __future__ import annotations

from typing import Optional

__all__ = [
    "ConfigurationError",
    "DataError",
    "DegenerateGeometryError",
    "KifsodError",
    "NumericalError",
    "ShapeError",
]


class KifsodError(Exception):
    """Base class for all errors raised by kifsod."""


class ConfigurationError(KifsodError, ValueError):
    """An argument or configuration value violates a documented precondition."""


class DataError(KifsodError, ValueError):
    """Input data is missing, malformed or inconsistent."""


class ShapeError(DataError):
    """Array or tensor dimensions do not match what the model was built for."""


class DegenerateGeometryError(DataError):
    """A zero-length vector was found where a direction or length is required."""


class NumericalError(KifsodError, ArithmeticError):
    """A loss or statistic became non-finite.

    Attributes
    ----------
    component : str | None
        Name of the offending loss component (e.g. `"L_cls"`), if known.
    iteration : int | None
        Training iteration at which the failure was detected, if any.
    """

    def __init__(
        self,
        message: str,
        *,
        component: Optional[str] = None,
        iteration: Optional[int] = None,
    ) -> None:
        details = []
        if component is not None:
            details.append(f"component={component}")
        if iteration is not None:
            details.append(f"iteration={iteration}")
        if details:
            message = f"{message} ({', '.join(details)})"
        super().__init__(message)
        self.component = component
        self.iteration = iteration
