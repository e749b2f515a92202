"""
Exception hierarchy for the GVS pipeline.

Every error carries a context dict so the CLI can emit a machine-readable
error JSON without knowing which module raised it.
"""

from typing import Any, Dict


class GVSError(Exception):
    """Base class for all pipeline errors."""

    def __init__(self, message: str, **context: Any):
        super().__init__(message)
        self.message = message
        self.context = context

    def to_dict(self) -> Dict[str, Any]:
        payload = {"error": type(self).__name__, "message": self.message}
        for key, value in self.context.items():
            # Keep the payload JSON-friendly; large objects are summarized by repr.
            if isinstance(value, (str, int, float, bool, type(None), list, dict)):
                payload[key] = value
            else:
                payload[key] = repr(value)
        return payload


class InvalidInputError(GVSError, ValueError):
    """Shape mismatch, out-of-range pixels, empty inputs."""


class InvalidConfigError(GVSError, ValueError):
    """A configuration value violates its invariant (lambda <= 0, lo >= hi, ...)."""


class GenerationError(GVSError):
    """The phantom generator could not place a lesion inside the anatomy."""


class DatasetLoadError(GVSError):
    """A manifest entry could not be read; `entry_id` names the entry."""


class NonFiniteLossError(GVSError):
    """A training loss became NaN/inf. `snapshot` holds the diagnostic dump path, if any."""


class NonFiniteDiceError(NonFiniteLossError):
    """The recorded training dice of an evaluation segmentor became NaN/inf."""


class UndefinedMetricError(GVSError, ValueError):
    """A metric is undefined for the given inputs (e.g. a mask covering every pixel)."""


class CheckpointError(GVSError):
    """A checkpoint could not be written, read, or does not match its declared spec."""
