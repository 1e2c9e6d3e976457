"""Exception types shared across the pipeline.

Every failure the pipeline raises deliberately derives from PipelineError so
callers (and the CLI) can distinguish anticipated input problems from bugs.
"""


class PipelineError(Exception):
    """Base class for anticipated pipeline failures."""


class VolumeFormatError(PipelineError):
    """Stack file is unreadable, inconsistent, or uses an unsupported layout."""


class DegenerateInputError(PipelineError, ValueError):
    """Input has no usable signal (constant volume, empty foreground, ...)."""


class ArchSyntaxError(PipelineError, ValueError):
    """Architecture descriptor string does not parse."""


class ShapeInferenceError(PipelineError, ValueError):
    """Layer stack is incompatible with the requested field of view."""


class CheckpointError(PipelineError):
    """Checkpoint file is corrupt, truncated, or from an unknown version."""


class UndefinedMetricError(PipelineError, ValueError):
    """Metric has no defined value for this input (0/0 style cases)."""


class ConfigError(PipelineError, ValueError):
    """Configuration file or flag values are invalid."""
