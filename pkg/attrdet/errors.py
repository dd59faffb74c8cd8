"""Exception hierarchy for attrdet."""

from typing import Optional


class AttrDetError(Exception):
    """Base class for all attrdet errors."""


class GeometryError(AttrDetError, ValueError):
    """Raised for invalid or degenerate boxes."""


class ManifestError(AttrDetError, ValueError):
    """Raised when a manifest cannot be parsed or fails validation.

    Args:
        message: Human readable description of the problem
        locator: Record locator such as ``samples[3].annotations[1]`` or ``line 12``
    """

    def __init__(self, message: str, locator: Optional[str] = None) -> None:
        self.locator = locator
        super().__init__(f"{locator}: {message}" if locator else message)


class SynthError(AttrDetError, RuntimeError):
    """Raised when the synthetic generator cannot place a scene."""


class ModelError(AttrDetError, ValueError):
    """Raised for invalid model configuration or wiring."""


class LossError(AttrDetError, ValueError):
    """Raised for labels outside the vocabulary range."""


class TrainingError(AttrDetError, RuntimeError):
    """Raised when training must abort.

    Args:
        message: Description of the failure
        step: Optimisation step at which the failure happened
        component: Loss component responsible, if any
    """

    def __init__(
        self, message: str, step: Optional[int] = None, component: Optional[str] = None
    ) -> None:
        self.step = step
        self.component = component
        super().__init__(message)


class EvaluationError(AttrDetError, ValueError):
    """Raised when a metric cannot be computed for the given inputs."""


class ConfigError(AttrDetError, ValueError):
    """Raised for unknown or invalid configuration values."""


class PipelineError(AttrDetError, RuntimeError):
    """Raised when a pipeline finishes with failed steps."""
