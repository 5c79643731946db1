"""
Structured errors raised by the numerical services.

Every error carries the CLI exit code the command layer maps it to.
"""

from typing import Any, Optional


class BiLoRAError(Exception):
    """Base class for all bilora errors."""

    exit_code: int = 1

    def __init__(self, message: str) -> None:
        super().__init__(message)
        self.message = message


class ShapeError(BiLoRAError):
    """Operand dimensions don't compose."""

    exit_code = 2


class NonFiniteError(BiLoRAError):
    """An operation produced NaN or Inf."""

    exit_code = 3


class ConfigError(BiLoRAError):
    """Invalid experiment configuration."""

    exit_code = 2

    def __init__(self, message: str, key: Optional[str] = None) -> None:
        super().__init__(message)
        self.key = key


class SplitError(BiLoRAError):
    """The train-set split can't feed both levels."""

    exit_code = 2


class HypergradientModeError(BiLoRAError):
    """Unrolled exact hypergradients requested for an unsupported lower optimizer."""

    exit_code = 2


class DivergenceError(BiLoRAError):
    """
    Training produced a non-finite loss or gradient.

    Attributes:
        step: Global step (BiLoRA) or epoch (baseline) where it happened
        stage: Which update diverged ("lower", "upper", "baseline", "eval")
        trace: Partial RunTrace recorded before the failure, if any
    """

    exit_code = 3

    def __init__(self, step: int, stage: str, detail: str = "") -> None:
        message = f"Divergence at step {step} during {stage} update"
        if detail:
            message = f"{message}: {detail}"
        super().__init__(message)
        self.step = step
        self.stage = stage
        self.detail = detail
        self.trace: Any = None

    def __reduce__(self):
        return (self.__class__, (self.step, self.stage, self.detail))


class ArtifactError(BiLoRAError):
    """Reading or writing an artifact failed."""

    exit_code = 4


class ToleranceError(BiLoRAError):
    """A gradient oracle check exceeded its tolerance."""

    exit_code = 5

    def __init__(self, component: str, error: float, tolerance: float) -> None:
        super().__init__(
            f"Gradient check failed for {component}: "
            f"max relative error {error:.3e} > tolerance {tolerance:.1e}"
        )
        self.component = component
        self.error = error
        self.tolerance = tolerance

    def __reduce__(self):
        return (self.__class__, (self.component, self.error, self.tolerance))


class SnapshotError(BiLoRAError):
    """Traces carry no singular-value snapshots."""

    exit_code = 2
