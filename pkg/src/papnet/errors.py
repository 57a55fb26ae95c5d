"""Exception hierarchy.

Each top-level family carries the process exit code the CLI reports for it.
"""


class PapnetError(Exception):
    exit_code = 1


class ConfigError(PapnetError):
    exit_code = 2


class DataError(PapnetError):
    exit_code = 3


class NumericError(PapnetError):
    exit_code = 4


class ManifestError(DataError):
    pass


class InvalidClass(ManifestError):
    pass


class DimensionMismatch(DataError):
    pass


class UnmappedColor(DataError):
    pass


class EmptyNucleus(DataError):
    pass


class EmptyMask(DataError):
    pass


class ProvenanceError(DataError):
    pass


class CheckpointError(DataError):
    pass


class ShapeError(ConfigError):
    pass
