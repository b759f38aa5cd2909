"""Error types shared across the package.

Every failure mode the library promises to detect maps to one of these, so
callers (and the CLI exit-code table) can branch on type rather than message.
"""

from __future__ import annotations


class AftrackError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(AftrackError):
    """Operands have incompatible or unsupported shapes."""


class NumericError(AftrackError):
    """A computation produced NaN/Inf or diverged."""


class UsageError(AftrackError):
    """An API was called with arguments outside its contract."""


class DegenerateInputError(UsageError):
    """Input is structurally valid but empty or zero-area where substance is required."""


class ConfigError(AftrackError):
    """A config file, key, or CLI argument is invalid."""


class ArtifactError(AftrackError):
    """A stored artifact (weight file, log, frame dir) is missing or malformed."""


class TrainingDiverged(NumericError):
    """Training hit a non-finite loss.  Carries the last finite state."""

    def __init__(self, step: int, checkpoint=None, history=None):
        super().__init__(f"loss became non-finite at step {step}")
        self.step = step
        self.checkpoint = checkpoint
        self.history = history if history is not None else []
