"""Exception hierarchy shared by every tipstate module."""


class TipStateError(Exception):
    """Base class for all package errors."""


class DataError(TipStateError, ValueError):
    """Input data violates a documented precondition."""


# imagecore
class NonFiniteInput(DataError):
    pass


class TooSmall(DataError):
    pass


class UnsupportedSize(DataError):
    pass


class HoldoutTooLarge(DataError):
    pass


class EmptyClass(DataError):
    pass


class ManifestError(DataError):
    pass


# augment
class BoxOutOfBounds(DataError):
    pass


class BoxTooSmall(DataError):
    pass


class SigmaOutOfRange(DataError):
    pass


class PolicyMismatch(DataError):
    pass


# tensor engine / zoo
class ShapeMismatch(DataError):
    pass


class BatchTooSmall(DataError):
    pass


class VersionMismatch(DataError):
    pass


class CorruptFile(DataError):
    pass


# training / evaluation
class EmptyTrainSet(DataError):
    pass


class LabelOutOfRange(DataError):
    pass


class ModeError(TipStateError, RuntimeError):
    pass


# ensemble / metrics
class ClassSetMismatch(DataError):
    pass


class UnmappedClass(DataError):
    pass


class LengthMismatch(DataError):
    pass


class DegenerateLabels(DataError):
    pass


class NoPositives(DataError):
    pass


class EmptyClassSupport(DataError):
    pass


# synthgen
class InvalidLabelForSurface(DataError):
    pass
