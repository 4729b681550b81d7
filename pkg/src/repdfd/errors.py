"""Exception hierarchy. Each class carries a short ``category`` used by the CLI."""


class RepDFDError(Exception):
    category = "runtime"


class ConfigurationError(RepDFDError):
    category = "configuration"


class GeometryError(ConfigurationError):
    category = "geometry"


class InputError(RepDFDError):
    category = "input"


class ContractError(RepDFDError):
    category = "contract"


class NumericError(RepDFDError):
    category = "numeric"


class CorruptCheckpointError(RepDFDError):
    category = "corrupt-checkpoint"


class UndefinedMetricError(RepDFDError):
    category = "undefined-metric"
