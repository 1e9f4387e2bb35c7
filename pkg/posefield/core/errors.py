from __future__ import annotations

from functools import partial


class PoseFieldError(Exception):
    exit_code: int = 4


class ConfigError(PoseFieldError, ValueError):
    exit_code = 2


class AnnotationParseError(ConfigError):
    pass


class AnnotationReferenceError(ConfigError):
    pass


class DimensionError(PoseFieldError, ValueError):
    exit_code = 2


class FieldValidationError(PoseFieldError, ValueError):
    exit_code = 2


class FieldFormatError(PoseFieldError, ValueError):
    exit_code = 3

    def __init__(self, message: str, *, offset: int) -> None:
        super().__init__(f"{message} (at byte offset {offset})")
        self.message = message
        self.offset = offset

    def __reduce__(self):
        return partial(type(self), offset=self.offset), (self.message,)


class FieldTruncationError(FieldFormatError):
    pass


class GenerationError(PoseFieldError, RuntimeError):
    exit_code = 2


class MatchingSizeError(PoseFieldError, ValueError):
    exit_code = 2


class InvariantViolation(PoseFieldError, AssertionError):
    exit_code = 4
