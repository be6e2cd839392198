"""Exception types shared across the package."""


class HiersplatError(Exception):
    """Base class for all package-specific errors."""


# geometry
class BehindCamera(HiersplatError):
    """Point projects to non-positive camera depth."""


# semantic tree / codecs
class UnknownClass(HiersplatError):
    pass


class PathLevelMismatch(HiersplatError):
    pass


class LevelOutOfRange(HiersplatError):
    pass


# tree builder
class TooFewPoints(HiersplatError):
    pass


class CriticBudgetExhausted(HiersplatError):
    def __init__(self, message, omissions=()):
        super().__init__(message)
        self.omissions = list(omissions)


class DegenerateVarianceWarning(UserWarning):
    """A shape-embedding column had (near-)zero variance and was zeroed."""


# llm client
class LlmUnavailable(HiersplatError):
    pass


class UnparseableResponse(HiersplatError):
    pass


class CredentialMissing(HiersplatError):
    pass


class HttpError(HiersplatError):
    def __init__(self, status, message=""):
        super().__init__(f"HTTP {status}: {message}" if message else f"HTTP {status}")
        self.status = status


class Timeout(HiersplatError):
    pass


# map / rendering / losses
class NoValidDepth(HiersplatError):
    pass


class LayoutMismatch(HiersplatError):
    pass


class ShapeMismatch(HiersplatError):
    pass


class EmptyMask(HiersplatError):
    pass


# slam
class TrackingDiverged(HiersplatError):
    pass


class NonFiniteLoss(HiersplatError):
    pass


# datasets / priors
class MissingFile(HiersplatError):
    pass


class CorruptImage(HiersplatError):
    pass


class ParseError(HiersplatError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class LengthMismatch(HiersplatError):
    pass


class OutOfRange(HiersplatError):
    pass


class DegeneratePrior(HiersplatError):
    """Prior depth is constant over the mask; scale is unobservable."""
