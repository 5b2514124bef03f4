"""Exception types shared across the pipeline."""


class DqPipeError(Exception):
    """Base class for all pipeline errors."""


class EmptyCycle(DqPipeError):
    """Cycle has no non-missing readings, so no label can be extracted."""


class NonMonotoneTimestamps(DqPipeError):
    """Reading timestamps are not strictly increasing."""


class MalformedRecord(DqPipeError):
    """A replayed CSV row could not be parsed."""

    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


class AllMissingWindow(DqPipeError):
    """Window contains zero non-missing values."""


class EmptySample(DqPipeError):
    """A sample passed to a two-sample statistic is empty."""


class BinMismatch(DqPipeError):
    """Histograms do not share identical bin edges."""


class InsufficientSample(DqPipeError):
    """Too few present values for the requested statistic."""


class DegenerateCorpus(DqPipeError):
    """Score corpus carries no usable variance."""


class EmptyTrainingSet(DqPipeError):
    """No rows available to train on."""


class NonFiniteInput(DqPipeError):
    """Training data contains NaN or infinite values."""


class DimensionMismatch(DqPipeError):
    """Feature vector width does not match the trained model."""


class LengthMismatch(DqPipeError):
    """Prediction and label sequences differ in length."""


class StorageFailure(DqPipeError):
    """Registry could not persist or read an artifact."""


class WriterLockHeld(StorageFailure):
    """A second writer attempted to open a single-writer registry."""


class NotFound(DqPipeError):
    """Requested artifact kind/version does not exist."""


class InsufficientData(DqPipeError):
    """Not enough recent data to perform an adaptation."""


class InsufficientBaseline(DqPipeError):
    """Baseline stream too small to initialize the system."""


class ConfigError(DqPipeError):
    """Invalid configuration value."""
