"""
Exception types raised by spamlens.

Every error derives from ``SpamLensError`` and from the builtin exception that
callers would otherwise expect (``ValueError`` for bad input, ``RuntimeError``
for failures during a run), so either can be caught.
"""


class SpamLensError(Exception):
    """Root of all spamlens errors."""


class ShapeError(SpamLensError, ValueError):
    """A tensor does not have the shape a kernel requires."""


class DatasetError(SpamLensError, ValueError):
    """A corpus or split cannot be built from the given samples."""


class CorruptImageError(DatasetError):
    """An image file could not be decoded."""


class TrainingError(SpamLensError, RuntimeError):
    """Training cannot start or was aborted."""


class CheckpointError(SpamLensError, ValueError):
    """A checkpoint file is malformed or belongs to another architecture."""


class UndefinedMetricError(SpamLensError, ValueError):
    """A metric has a zero denominator for the given confusion matrix."""

    def __init__(self, metric, message):
        super().__init__(message)
        self.metric = metric


class ExplanationError(SpamLensError, ValueError):
    """An explainer cannot produce a well-defined answer."""


class ConfigError(SpamLensError, ValueError):
    """A configuration value or file is invalid."""
