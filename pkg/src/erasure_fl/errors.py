"""Exception hierarchy shared across the package."""

from __future__ import annotations


class ErasureFLError(Exception):
    """Base class for all package errors."""


class InvalidConfigError(ErasureFLError, ValueError):
    """A parameter or configuration value violates its contract."""


class DimensionError(ErasureFLError, ValueError):
    """Parameter vectors or datasets have incompatible shapes."""


class DatasetParseError(ErasureFLError, ValueError):
    """A dataset file could not be parsed.

    ``line`` is the 1-based line number in the file, or None when the problem
    is not tied to a single line (e.g. an empty data section).
    """

    def __init__(self, message: str, line: int | None = None) -> None:
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DivergenceError(ErasureFLError, ArithmeticError):
    """Local gradient descent produced non-finite parameters."""

    def __init__(
        self,
        iteration: int,
        round_index: int | None = None,
        device: int | None = None,
    ) -> None:
        self.iteration = iteration
        self.round_index = round_index
        self.device = device
        where = f"local iteration {iteration}"
        if device is not None:
            where = f"device {device}, " + where
        if round_index is not None:
            where = f"round {round_index}, " + where
        super().__init__(f"gradient descent diverged at {where}; learning rate too large?")

    def with_context(self, round_index: int, device: int) -> "DivergenceError":
        return DivergenceError(self.iteration, round_index=round_index, device=device)


class RankDeficiencyError(ErasureFLError, ArithmeticError):
    """The least-squares normal equations are singular."""


class NumericalError(ErasureFLError, ArithmeticError):
    """An iterative numerical routine failed to converge."""


class NotApplicableError(ErasureFLError, ValueError):
    """Preconditions of the convergence bound are not met.

    ``condition`` names the failed condition.
    """

    def __init__(self, condition: str, message: str) -> None:
        self.condition = condition
        super().__init__(message)
