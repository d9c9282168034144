"""Exception types raised across the package."""


class DistTuneError(Exception):
    """Base class for all package errors."""


class NonPositiveSpeed(DistTuneError, ValueError):
    pass


class NonPositiveReference(DistTuneError, ValueError):
    pass


class NonFiniteInput(DistTuneError, ValueError):
    pass


class OffGrid(DistTuneError, ValueError):
    """A hyperparameter value that does not sit on the tuning grid."""


class EmptyInput(DistTuneError, ValueError):
    pass


class LengthMismatch(DistTuneError, ValueError):
    pass


class NonPositiveActual(DistTuneError, ValueError):
    pass


class NonPositiveDenominator(DistTuneError, ValueError):
    pass


class SeriesTooShort(DistTuneError, ValueError):
    pass


class WrongHistoryLength(DistTuneError, ValueError):
    pass


class NonFiniteLoss(DistTuneError, ArithmeticError):
    """Training diverged: the loss or gradient stopped being finite."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class DeserializeError(DistTuneError, ValueError):
    pass


class BudgetTooSmall(DistTuneError, ValueError):
    pass


class AlreadyProcessed(DistTuneError, KeyError):
    pass


class UnknownDetector(DistTuneError, KeyError):
    pass


class NoDonor(DistTuneError, LookupError):
    pass


class MalformedJob(DistTuneError, ValueError):
    pass


class ProtocolError(DistTuneError, ValueError):
    """Bytes that do not decode to a valid protocol message."""


class ParseError(DistTuneError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class GapTooLarge(DistTuneError, ValueError):
    pass


class ManifestError(DistTuneError, ValueError):
    pass


class NoArtifacts(DistTuneError, FileNotFoundError):
    pass


class NoWorkerAvailable(DistTuneError, RuntimeError):
    """Jobs are queued but no live worker can take them."""


class RegistryInvariantError(DistTuneError, AssertionError):
    pass
