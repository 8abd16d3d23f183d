"""Exception hierarchy.

Every error carries a short machine-readable ``code`` which the command line
front end prints on failure.
"""


class AQDGPError(Exception):
    code = "error"


class DimensionError(AQDGPError, ValueError):
    code = "dimension"


class ContractError(AQDGPError, ValueError):
    code = "contract"


class NumericDomainError(AQDGPError, ValueError):
    code = "numeric-domain"


class DecompositionError(AQDGPError, ArithmeticError):
    """Cholesky failed even after the maximum jitter was added."""

    code = "decomposition"

    def __init__(self, message, pivot=None):
        super().__init__(message)
        self.pivot = pivot


class SingularMatrixError(AQDGPError, ArithmeticError):
    code = "singular"


class LayerDegenerateError(AQDGPError, ArithmeticError):
    code = "layer-degenerate"


class TrainingDivergenceError(AQDGPError, ArithmeticError):
    """Non-finite objective or gradient. ``snapshot`` maps parameter names to arrays."""

    code = "divergence"

    def __init__(self, message, snapshot=None, parameter=None):
        super().__init__(message)
        self.snapshot = snapshot or {}
        self.parameter = parameter


class SchemaError(AQDGPError, KeyError):
    code = "schema"

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class DataError(AQDGPError, ValueError):
    code = "data"


class ParameterError(AQDGPError, ValueError):
    code = "parameter"


class ModelError(AQDGPError, ValueError):
    code = "model"


class SizeError(AQDGPError, ValueError):
    code = "size"


class StationLookupError(AQDGPError, LookupError):
    code = "lookup"


class MetricUndefinedError(AQDGPError, ValueError):
    code = "metric-undefined"


class CheckpointError(AQDGPError, ValueError):
    code = "checkpoint"
