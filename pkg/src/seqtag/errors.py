"""Exception taxonomy shared by all seqtag modules."""


class SeqtagError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(SeqtagError):
    """Tensor shapes do not satisfy an operation's contract."""


class NumericError(SeqtagError):
    """Non-finite input fed to an operation that requires finite values."""


class ContractError(SeqtagError):
    """A caller violated an API precondition."""


class ConfigError(SeqtagError):
    """Invalid configuration value."""


class IngestionError(SeqtagError):
    """A corpus file could not be parsed or is internally inconsistent."""


class VocabMismatchError(IngestionError):
    """Data requires vocabulary entries the model does not have."""


class FormatError(SeqtagError):
    """Malformed tag string."""


class MetricUndefinedError(SeqtagError):
    """The requested metric has no defined value for this input."""


class TrainingError(SeqtagError):
    """Training diverged or could not proceed."""
