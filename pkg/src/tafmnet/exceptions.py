"""Exception hierarchy shared by every subpackage."""


class TAFMError(Exception):
    """Base class for all library errors."""


class ShapeMismatch(TAFMError, ValueError):
    pass


class InvalidAxis(TAFMError, ValueError):
    pass


class NonFiniteValue(TAFMError, FloatingPointError):
    pass


class NonScalarRoot(TAFMError, ValueError):
    pass


class TapeReused(TAFMError, RuntimeError):
    pass


class NonDeterministicFunction(TAFMError, RuntimeError):
    pass


class InvalidRate(TAFMError, ValueError):
    pass


class OddChannels(TAFMError, ValueError):
    pass


class InvalidGamma(TAFMError, ValueError):
    pass


class DegenerateMask(TAFMError, ValueError):
    pass


class MissingLevelSet(TAFMError, ValueError):
    pass


class InvalidThreshold(TAFMError, ValueError):
    pass


class EmptyInput(TAFMError, ValueError):
    pass


class InvalidConfig(TAFMError, ValueError):
    pass


class FormatError(TAFMError, ValueError):
    pass


class InvalidFractions(TAFMError, ValueError):
    pass


class EmptyDataset(TAFMError, ValueError):
    pass


class DivergedLoss(TAFMError, FloatingPointError):
    pass


class NonBinaryInput(TAFMError, ValueError):
    pass
