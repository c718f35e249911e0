"""Exception hierarchy shared by all modules."""


class SpackleError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 5


class InputError(SpackleError, ValueError):
    """Bad user input: malformed files, inconsistent datasets, bad config."""

    exit_code = 2


class FormatError(InputError):
    """A dataset directory or file does not follow the on-disk format."""


class ConsistencyError(InputError):
    """Slides, genes or splits disagree with each other."""


class DataError(InputError):
    """Numeric content is invalid (non-finite, negative counts, empty)."""


class ConfigError(InputError):
    """Unknown or invalid configuration keys/values."""


class TrainingError(SpackleError):
    """Training could not proceed (empty split, divergence)."""

    exit_code = 3


class ModelMismatchError(SpackleError):
    """A checkpoint does not fit the gene panel it is applied to."""

    exit_code = 4
