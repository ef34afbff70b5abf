"""Exception hierarchy. Each family maps onto one CLI exit code."""


class DiseCTRError(Exception):
    exit_code = 1


class ConfigError(DiseCTRError):
    exit_code = 2


class DataError(DiseCTRError):
    exit_code = 3


class SchemaError(DataError):
    pass


class EmptyBatchError(DataError):
    pass


class OODConstructionError(DataError):
    pass


class UndefinedMetricError(DataError):
    pass


class NumericalError(DiseCTRError):
    exit_code = 4


class CheckpointError(DataError):
    pass


class CheckpointManifestError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointIncompatibleError(CheckpointError):
    pass
