"""Exception types raised across the package."""

from __future__ import annotations


class SnrEditError(Exception):
    """Base class for all package errors."""


class InvalidInput(SnrEditError, ValueError):
    """Input data violates a precondition (non-finite values, bad shapes, ...)."""


class InvalidArgument(SnrEditError, ValueError):
    """A scalar/config argument is out of its allowed range."""


class FormatError(SnrEditError, ValueError):
    """A file could not be parsed as the expected format."""


class TrainingFailed(SnrEditError, RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"training diverged at step {step} (loss={loss})")
        self.step = step
        self.loss = loss


class IntegrationDiverged(SnrEditError, RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"non-finite latent state at integration step {step}")
        self.step = step
