"""Exception hierarchy shared by every subpackage."""


class HnsurvError(Exception):
    """Base class for all errors raised by this package."""


# tensor / autodiff
class ShapeMismatch(HnsurvError, ValueError):
    pass


class KernelTooLarge(HnsurvError, ValueError):
    pass


class AxisOutOfRange(HnsurvError, ValueError):
    pass


class NotScalar(HnsurvError, ValueError):
    pass


class TapeConsumed(HnsurvError, RuntimeError):
    pass


class TapeError(HnsurvError, RuntimeError):
    pass


class NonFiniteError(HnsurvError, FloatingPointError):
    pass


# layers
class DegenerateBatch(HnsurvError, ValueError):
    pass


class InputTooSmall(HnsurvError, ValueError):
    pass


class BadReduction(HnsurvError, ValueError):
    pass


class EvenKernel(HnsurvError, ValueError):
    pass


class EmptyStack(HnsurvError, ValueError):
    pass


# survival / metrics
class TooFewDistinctTimes(HnsurvError, ValueError):
    pass


class NonPositiveTime(HnsurvError, ValueError):
    pass


class HazardOutOfRange(HnsurvError, ValueError):
    pass


class NoComparablePairs(HnsurvError, ValueError):
    pass


class EmptyCohort(HnsurvError, ValueError):
    pass


# data
class BadMagic(HnsurvError, ValueError):
    pass


class TruncatedPayload(HnsurvError, ValueError):
    pass


class DimOverflow(HnsurvError, ValueError):
    pass


class SchemaError(HnsurvError, ValueError):
    pass


class MissingVolume(HnsurvError, FileNotFoundError):
    pass


class CohortTooSmall(HnsurvError, ValueError):
    pass


class BadDims(HnsurvError, ValueError):
    pass


# training
class MissingGradient(HnsurvError, ValueError):
    pass


class EmptySplit(HnsurvError, ValueError):
    pass


class DivergedLoss(HnsurvError, FloatingPointError):
    pass


class BadVersion(HnsurvError, ValueError):
    pass


class CorruptCheckpoint(HnsurvError, ValueError):
    pass


class ConfigMismatch(BadVersion):
    pass


class ConfigError(HnsurvError, ValueError):
    pass
