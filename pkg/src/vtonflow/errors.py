"""Exception types shared across the package."""


class ShapeError(ValueError):
    pass


class VocabularyError(ValueError):
    pass


class EmptySegmentationError(ValueError):
    pass


class FormatError(RuntimeError):
    pass


class VersionError(FormatError):
    pass


class IntegrityError(RuntimeError):
    pass


class CompatibilityError(RuntimeError):
    pass


class NumericError(FloatingPointError):
    def __init__(self, msg: str, last_good: str | None = None):
        super().__init__(msg if last_good is None else f"{msg} (last good checkpoint: {last_good})")
        self.last_good = last_good


class DetectionError(RuntimeError):
    pass


class GradingError(RuntimeError):
    pass


class GradeParseError(GradingError, ValueError):
    pass
