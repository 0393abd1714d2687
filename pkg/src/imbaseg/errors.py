"""Exception types shared across the package.

Errors are grouped under three bases so the CLI can map them to exit codes:
``DataError`` (unreadable or malformed inputs), ``ConfigError`` and
``TrainingError``.
"""


class ImbasegError(Exception):
    pass


class ConfigError(ImbasegError, ValueError):
    pass


class DataError(ImbasegError, ValueError):
    pass


class TrainingError(ImbasegError, RuntimeError):
    pass


class LengthError(DataError):
    pass


class ParseError(DataError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class MissingKeyError(DataError):
    pass


class NonRigidError(DataError):
    pass


class SpecError(ConfigError):
    pass


class EmptyDatasetError(DataError):
    pass


class EmptyCloudError(DataError):
    pass


class DomainError(ImbasegError, ValueError):
    pass


class CatalogMismatchError(DataError):
    pass


class CheckpointError(DataError):
    pass


class BadMagic(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class TruncatedFile(CheckpointError):
    pass


class NonFiniteGradientError(TrainingError):
    pass
