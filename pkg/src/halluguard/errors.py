"""Exception hierarchy.

Every error raised by the library derives from :class:`HalluguardError` so
callers can catch the whole family at once. Subclasses are grouped by the
module that raises them.
"""

from __future__ import annotations


class HalluguardError(Exception):
    """Base class for all library errors."""


# -- core validation ---------------------------------------------------------


class ValidationError(HalluguardError, ValueError):
    pass


class ConfidenceOutOfRange(ValidationError):
    def __init__(self, index: int, confidence: float):
        super().__init__(f"detection {index}: confidence {confidence!r} outside [0, 1]")
        self.index = index
        self.confidence = confidence


class BoxOutOfBounds(ValidationError):
    def __init__(self, index: int, detail: str = ""):
        msg = f"detection {index}: bounding box outside frame"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.index = index


class EmptyLabel(ValidationError):
    def __init__(self, index: int | None = None):
        where = "" if index is None else f"detection {index}: "
        super().__init__(f"{where}empty class label")
        self.index = index


class UnknownLabel(ValidationError):
    def __init__(self, index: int, label: str):
        super().__init__(f"detection {index}: label {label!r} not in vocabulary")
        self.index = index
        self.label = label


class FrameMismatch(ValidationError):
    pass


# -- controller --------------------------------------------------------------


class HRateOutOfRange(ValidationError):
    pass


class GammaOutOfRange(ValidationError):
    pass


class NonPositiveInput(ValidationError):
    pass


# -- grounding ---------------------------------------------------------------


class UnknownTagInOracleMode(HalluguardError):
    pass


class OutOfRange(ValidationError):
    pass


class UnknownTruthTags(HalluguardError):
    pass


class EmptySet(HalluguardError):
    pass


# -- pipeline ----------------------------------------------------------------


class ZeroAreaRoi(HalluguardError):
    pass


class GeometryMismatch(HalluguardError):
    pass


class AlignmentMismatch(HalluguardError):
    pass


class BackendError(HalluguardError):
    pass


class BackendUnavailable(BackendError):
    pass


class BackendTimeout(BackendError):
    def __init__(self, message: str, elapsed_s: float):
        super().__init__(f"{message} (after {elapsed_s * 1000:.1f} ms)")
        self.elapsed_s = elapsed_s


class MalformedBackendReply(BackendError):
    pass


class StageError(HalluguardError):
    """A stage failure annotated with the stage name; the original is ``__cause__``."""

    def __init__(self, stage: str, frame_id: int, cause: BaseException):
        super().__init__(f"stage {stage!r} failed on frame {frame_id}: {cause}")
        self.stage = stage
        self.frame_id = frame_id


# -- simworld ----------------------------------------------------------------


class InsufficientSamples(HalluguardError, ValueError):
    pass


# -- adapters ----------------------------------------------------------------


class VersionMismatch(BackendError):
    pass


class Unreachable(BackendUnavailable):
    pass


class HandshakeTimeout(BackendTimeout):
    pass


class CapabilityError(BackendError):
    pass


# -- experiments / cli -------------------------------------------------------


class ConfigError(HalluguardError, ValueError):
    def __init__(self, message: str, key: str | None = None):
        super().__init__(message if key is None else f"{key}: {message}")
        self.key = key


class ExperimentIOError(HalluguardError, OSError):
    def __init__(self, message: str, path: str | None = None):
        super().__init__(message if path is None else f"{path}: {message}")
        self.path = path
