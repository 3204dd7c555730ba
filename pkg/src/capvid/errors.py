"""Exception hierarchy shared across the package.

Every error class carries a distinct CLI exit code (see ``capvid.cli``).
"""


class CapvidError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ParameterError(CapvidError):
    """An argument is outside its documented range."""

    exit_code = 5


class ShapeError(CapvidError):
    """Array shapes are incompatible with the operation."""

    exit_code = 5


class VocabularyError(CapvidError):
    """A word is not in the closed vocabulary."""

    exit_code = 5

    def __init__(self, word: str):
        self.word = word
        super().__init__(f"word not in vocabulary: {word!r}")


class AlignmentError(CapvidError):
    """A token alignment is inconsistent with the attention key dimension."""

    exit_code = 5


class HookError(CapvidError):
    """A write hook returned an invalid replacement map."""

    exit_code = 5


class StoreMissError(CapvidError):
    """A required attention map is missing from the store."""

    exit_code = 6

    def __init__(self, timestep: int, layer: str, frame: int, kind: str):
        self.key = (timestep, layer, frame, kind)
        super().__init__(
            f"attention store miss: t={timestep} layer={layer} frame={frame} kind={kind}"
        )


class StateError(CapvidError):
    """An operation was called in an invalid order or on empty state."""

    exit_code = 6


class NumericError(CapvidError):
    """Non-finite values were produced or consumed."""

    exit_code = 7


class InversionError(NumericError):
    """DDIM inversion blew up; carries the failing step index."""

    def __init__(self, step: int, message: str = "non-finite latent during inversion"):
        self.step = step
        super().__init__(f"{message} (step {step})")


class ConfigError(CapvidError):
    """A run configuration is malformed or contains unknown keys."""

    exit_code = 3


class PathError(CapvidError):
    """A required input path is missing or an output path already exists."""

    exit_code = 4


class PipelineStageError(CapvidError):
    """Wraps a failure inside a named pipeline stage."""

    exit_code = 6

    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        if isinstance(cause, CapvidError):
            self.exit_code = cause.exit_code
        super().__init__(f"stage {stage!r} failed: {cause}")
