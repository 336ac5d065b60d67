"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """A configuration value is out of its allowed range."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class GraphError(RuntimeError):
    """A value is not connected to the differentiation tape it is used with."""


class ContractError(ValueError):
    """A call violated an operation precondition."""


class AlignmentError(ValueError):
    """Two streams that must share a time axis do not."""


class DataError(ValueError):
    """Bad or missing input data (manifests, stream files, datasets)."""


class IntegrityError(ValueError):
    """A checkpoint file failed its checksum or is truncated."""


class IncompatibleCheckpointError(ValueError):
    """A checkpoint has the wrong version or parameter shapes."""


class NonFiniteLossError(NumericError):
    """A loss term evaluated to NaN or infinity."""

    def __init__(self, component: str, value: float):
        super().__init__(f"non-finite loss in component {component!r}: {value}")
        self.component = component
        self.value = value
