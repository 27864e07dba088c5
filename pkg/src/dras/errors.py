"""Exception types shared across the package."""


class DrasError(Exception):
    """Base class for all package-specific errors."""


# -- dataset ingestion --------------------------------------------------------

class MalformedFilename(DrasError):
    pass


class NegativeAge(DrasError):
    pass


class DecodeError(DrasError):
    pass


class NonRGBInput(DrasError):
    pass


class TooFewRecords(DrasError):
    pass


class EmptyDataset(DrasError):
    pass


# -- model / loss contracts ---------------------------------------------------

class ShapeMismatch(DrasError):
    pass


class LengthMismatch(DrasError):
    pass


class ScoreOutOfRange(DrasError):
    pass


class InvalidDim(DrasError):
    pass


class InvalidComponent(DrasError):
    pass


# -- training -----------------------------------------------------------------

class InvalidConfig(DrasError):
    pass


class NonFiniteLoss(DrasError):
    pass


class DivergenceDetected(DrasError):
    """Raised when a training loss goes non-finite.

    ``last_checkpoint`` points at the most recent on-disk checkpoint, if any.
    """

    def __init__(self, message: str, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


class WrongStageCheckpoint(DrasError):
    pass


# -- evaluation ---------------------------------------------------------------

class MissingClassifier(DrasError):
    pass


class MissingReference(DrasError):
    pass


class MissingIdentityTags(DrasError):
    pass


class EmptyGroup(DrasError):
    pass


class ServiceUnavailable(DrasError):
    pass
