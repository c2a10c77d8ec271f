"""Exception hierarchy.

Every error carries the CLI exit code it maps to: 2 for configuration
problems, 3 for bad or missing data, 4 for numerical failures.
"""


class OsaqError(Exception):
    exit_code = 3


class ConfigError(OsaqError):
    exit_code = 2


class UnknownLayer(ConfigError):
    pass


class DataError(OsaqError):
    exit_code = 3


class DimMismatch(DataError):
    pass


class NonFinite(DataError):
    pass


class EmptyCalibration(DataError):
    pass


class EmptySpectrum(DataError):
    pass


class EmptyNullSpace(DataError):
    pass


class TokenOutOfRange(DataError):
    pass


class SequenceTooLong(DataError):
    pass


class ArchiveError(DataError):
    pass


class MalformedHeader(ArchiveError):
    pass


class TruncatedPayload(ArchiveError):
    pass


class UnknownDtype(ArchiveError):
    pass


class NameCollision(ArchiveError):
    pass


class NumericalError(OsaqError):
    exit_code = 4


class NoConvergence(NumericalError):
    pass


class NotPositiveDefinite(NumericalError):
    pass
