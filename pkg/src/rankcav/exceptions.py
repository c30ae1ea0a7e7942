from typing import Any


class RankcavError(Exception):
    """Base exception carrying structured context for pipeline errors."""

    def __init__(
        self,
        message: str,
        *,
        context: dict[str, Any] | None = None,
    ) -> None:
        super().__init__(message)
        self.context = context or {}

    def __str__(self) -> str:
        context_info = f"\nContext: {self.context}" if self.context else ""
        return f"{super().__str__()}{context_info}"


class ShapeError(RankcavError, ValueError):
    """Dimension mismatch, invalid layer index or non-finite numeric input."""


class ConfigError(RankcavError, ValueError):
    """Invalid configuration or violated parameter precondition."""


class InfeasibleSpecError(ConfigError):
    """Composition bounds that no profile (or no grid of this size) can realise."""


class UndefinedMetricError(RankcavError, ArithmeticError):
    """A statistic whose value is undefined for the given data."""


class TrainingError(RankcavError, RuntimeError):
    """Training or probing could not run on the given data."""


class ArtifactError(RankcavError, OSError):
    """Missing, corrupt or mis-versioned artifact file."""
